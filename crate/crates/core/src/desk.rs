//! Desk benchmark: generated multiple-choice questions and a scripted model
//! that answers them through the three-stage Recall / Analysis / Summary plan.
//!
//! Questions ask for the option holding the largest or smallest number. The
//! [`DeskModel`] reads its stage prompt, writes the stage's reasoning text
//! byte by byte and emits logits whose top probability is the scripted
//! confidence. Skipping sub-layers accumulates "damage" (the sum of the
//! skipped sub-layers' weights), which
//!
//! * corrupts recalled or analysed numbers and the final pick, at a rate
//!   that depends on how skip-sensitive the stage is,
//! * lowers token confidence along the generation,
//! * appends low-confidence filler after the useful text.
//!
//! Corruptions propagate: the Analysis stage reads the Recall output from its
//! prompt and the Summary stage reads both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{AnswerOption, DatasetRecord};
use crate::model::{
    LanguageModel, ModelDims, Prefill, ResidualTrace, SkipSet, SubLayerKind, SubLayerRef, TraceMode,
};
use crate::tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub n_blocks: usize,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self { n_blocks: 22, seed: 0 }
    }
}

/// How one stage reacts to damage.
#[derive(Debug, Clone, Copy, PartialEq)]
struct StageBehavior {
    /// Corruption probability at zero damage.
    base_error: f64,
    /// Added corruption probability per unit of damage beyond `tolerance`.
    sensitivity: f64,
    tolerance: f64,
    /// Filler bytes per unit of damage.
    verbosity: f64,
    /// Confidence lost by the end of the useful text per unit of damage.
    decay: f64,
}

const RECALL: StageBehavior =
    StageBehavior { base_error: 0.0, sensitivity: 0.25, tolerance: 0.15, verbosity: 40.0, decay: 0.3 };
const ANALYSIS: StageBehavior =
    StageBehavior { base_error: 0.02, sensitivity: 0.35, tolerance: 0.15, verbosity: 110.0, decay: 0.5 };
const SUMMARY: StageBehavior =
    StageBehavior { base_error: 0.0, sensitivity: 1.5, tolerance: 0.05, verbosity: 25.0, decay: 0.2 };

const FILLER: &[&str] = &[
    " Let me check that again.",
    " Wait, consider the other options once more.",
    " Hmm, that might not be right.",
    " Going over the numbers again.",
];

const CONTENT_CONFIDENCE: f64 = 0.97;
const MIN_CONFIDENCE: f64 = 0.2;
const EOS_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct DeskModel {
    config: DeskConfig,
    /// Damage contributed by each sub-layer when skipped, by ordinal.
    weights: Vec<f64>,
}

impl DeskModel {
    pub fn new(config: DeskConfig) -> Result<Self> {
        if config.n_blocks == 0 {
            return Err(Error::InvalidConfig("desk model needs at least one block".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD35C);
        let weights = SubLayerRef::all(config.n_blocks)
            .map(|l| {
                let u: f64 = rng.random();
                match l.kind {
                    SubLayerKind::Mhsa => 0.002 + 0.03 * u * u,
                    SubLayerKind::Ffn => 0.004 + 0.06 * u * u,
                }
            })
            .collect();
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> DeskConfig {
        self.config
    }

    pub fn damage_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn damage(&self, skip: &SkipSet) -> f64 {
        skip.iter().map(|l| self.weights[l.ordinal()]).sum()
    }

    fn script(&self, prompt: &Prompt, damage: f64) -> Vec<(u32, f64)> {
        let Some(stage) = prompt.stage else {
            return text_script("I can only follow staged prompts.", 0.0, CONTENT_CONFIDENCE);
        };
        let behavior = match stage {
            1 => RECALL,
            2 => ANALYSIS,
            _ => SUMMARY,
        };
        let p_err = (behavior.base_error + behavior.sensitivity * (damage - behavior.tolerance).max(0.0))
            .clamp(0.0, 1.0);
        let corrupt = |item: usize| unit_hash(self.config.seed, &prompt.key(), stage, item) < p_err;
        let content = match stage {
            1 => recall_text(prompt, &corrupt),
            2 => analysis_text(prompt, &corrupt),
            _ => summary_text(prompt, &corrupt),
        };
        let filler_len = (behavior.verbosity * damage) as usize;
        let mut script = text_script(&content, behavior.decay * damage, CONTENT_CONFIDENCE);
        let filler_conf = (0.4 - 0.3 * damage).clamp(0.1, 0.4);
        let filler: String = FILLER.iter().cycle().flat_map(|s| s.chars()).take(filler_len).collect();
        script.extend(filler.bytes().map(|b| (b as u32, filler_conf)));
        script.push((tokenizer::EOS, EOS_CONFIDENCE));
        script
    }

    fn logits_for(&self, (token, confidence): (u32, f64)) -> Vec<f64> {
        let v = tokenizer::VOCAB_SIZE;
        let mut logits = vec![0.0; v];
        // softmax(target) = c when the other V-1 logits are 0.
        logits[token as usize] = (confidence * (v - 1) as f64 / (1.0 - confidence)).ln();
        logits
    }
}

/// Confidence falls linearly from `start` by `drop` across the text.
fn text_script(text: &str, drop: f64, start: f64) -> Vec<(u32, f64)> {
    let n = text.len().max(1) as f64;
    text.bytes()
        .enumerate()
        .map(|(t, b)| (b as u32, (start - drop * t as f64 / n).max(MIN_CONFIDENCE)))
        .collect()
}

fn recall_text(p: &Prompt, corrupt: &dyn Fn(usize) -> bool) -> String {
    let items: Vec<String> = p
        .options
        .iter()
        .enumerate()
        .map(|(i, (label, v))| format!("{label}={}", if corrupt(i) { flip(*v) } else { *v }))
        .collect();
    format!("The options are {}.", items.join(", "))
}

fn analysis_text(p: &Prompt, corrupt: &dyn Fn(usize) -> bool) -> String {
    p.options
        .iter()
        .enumerate()
        .map(|(i, (label, v))| {
            let seen = p.recalled(*label).unwrap_or(*v);
            let v = if corrupt(i) { flip(seen) } else { seen };
            format!("Option {label} is {v}.")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn summary_text(p: &Prompt, corrupt: &dyn Fn(usize) -> bool) -> String {
    let mut ranked: Vec<(char, i64)> = p
        .options
        .iter()
        .map(|(label, v)| (*label, p.analysed(*label).or(p.recalled(*label)).unwrap_or(*v)))
        .collect();
    ranked.sort_by_key(|(label, v)| (if p.largest { -v } else { *v }, *label));
    let pick = if corrupt(0) && ranked.len() > 1 { ranked[1].0 } else { ranked[0].0 };
    format!("Comparing the options, the answer is ({pick}).")
}

fn flip(v: i64) -> i64 {
    99 - v
}

/// FNV-1a over the inputs, finished with a splitmix64 round, mapped to [0, 1).
fn unit_hash(seed: u64, text: &str, stage: usize, item: usize) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in text.bytes().chain(stage.to_le_bytes()).chain(item.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// What the desk model understands of a stage prompt.
#[derive(Debug, Clone, PartialEq)]
struct Prompt {
    stage: Option<usize>,
    question: String,
    largest: bool,
    options: Vec<(char, i64)>,
    recall: Vec<(char, i64)>,
    analysis: Vec<(char, i64)>,
}

impl Prompt {
    fn parse(text: &str) -> Self {
        let question =
            text.lines().find_map(|l| l.strip_prefix("Question: ")).unwrap_or_default().to_string();
        let options = text
            .lines()
            .filter_map(|l| {
                let rest = l.strip_prefix('(')?;
                let label = rest.chars().next()?;
                let value = rest.get(2..)?.trim().parse().ok()?;
                Some((label, value))
            })
            .collect();
        let recall = text
            .lines()
            .find_map(|l| l.strip_prefix("Recall: "))
            .map(|r| {
                r.split([',', ' ', '.'])
                    .filter_map(|item| {
                        let (label, value) = item.split_once('=')?;
                        Some((label.chars().next()?, value.parse().ok()?))
                    })
                    .collect()
            })
            .unwrap_or_default();
        let analysis = text
            .lines()
            .find_map(|l| l.strip_prefix("Analysis: "))
            .map(|a| {
                a.split("Option ")
                    .filter_map(|s| {
                        let (label, rest) = s.split_once(" is ")?;
                        let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
                        Some((label.chars().next()?, digits.parse().ok()?))
                    })
                    .collect()
            })
            .unwrap_or_default();
        let stage = text.rmatch_indices("Stage ").find_map(|(i, _)| {
            let rest = &text[i + 6..];
            let digits: String = rest.chars().take_while(char::is_ascii_digit).collect();
            rest[digits.len()..].starts_with(" (").then(|| digits.parse().ok()).flatten()
        });
        Self { stage, largest: !question.contains("smallest"), question, options, recall, analysis }
    }

    /// Identifies the question across stages.
    fn key(&self) -> String {
        let opts: Vec<String> = self.options.iter().map(|(l, v)| format!("{l}{v}")).collect();
        format!("{}|{}", self.question, opts.join(","))
    }

    fn recalled(&self, label: char) -> Option<i64> {
        self.recall.iter().find(|(l, _)| *l == label).map(|(_, v)| *v)
    }

    fn analysed(&self, label: char) -> Option<i64> {
        self.analysis.iter().find(|(l, _)| *l == label).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct DeskState {
    prompt: Prompt,
    emitted: usize,
    script: Option<(SkipSet, Vec<(u32, f64)>)>,
}

impl LanguageModel for DeskModel {
    type State = DeskState;

    fn dims(&self) -> ModelDims {
        ModelDims {
            n_blocks: self.config.n_blocks,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq_len: 4096,
            eos_token: tokenizer::EOS,
        }
    }

    fn prefill(&self, tokens: &[u32], mode: TraceMode) -> Result<Prefill<DeskState>> {
        let max = self.dims().max_seq_len;
        if tokens.len() > max {
            return Err(Error::ContextOverflow { len: tokens.len(), max });
        }
        let prompt = Prompt::parse(&tokenizer::decode(tokens));
        let full = self.script(&prompt, 0.0);
        let logits = self.logits_for(full[0]);
        let trace = (mode != TraceMode::Off).then(|| {
            let mut t = ResidualTrace::new(self.weights.len(), TraceMode::Cosine);
            for (g, w) in self.weights.iter().enumerate() {
                t.cosines[g] = (0..tokens.len())
                    .map(|pos| 1.0 - w * (0.8 + 0.4 * unit_hash(self.config.seed, "trace", g, pos)))
                    .collect();
            }
            t
        });
        let state = DeskState { prompt, emitted: 0, script: Some((SkipSet::new(), full)) };
        Ok(Prefill { state, logits, trace })
    }

    fn decode_step(&self, state: &mut DeskState, _token: u32, skip: &SkipSet) -> Result<Vec<f64>> {
        skip.validate(self.config.n_blocks)?;
        state.emitted += 1;
        let stale = state.script.as_ref().is_none_or(|(s, _)| s != skip);
        if stale {
            let script = self.script(&state.prompt, self.damage(skip));
            state.script = Some((skip.clone(), script));
        }
        let script = &state.script.as_ref().expect("set above").1;
        let next = script.get(state.emitted).copied().unwrap_or((tokenizer::EOS, EOS_CONFIDENCE));
        Ok(self.logits_for(next))
    }
}

/// Generates `n` questions with 4 or 5 two-digit options.
pub fn desk_benchmark(split: &str, n: usize, seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let n_opts = rng.random_range(4..=5usize);
            let mut values: Vec<i64> = Vec::with_capacity(n_opts);
            while values.len() < n_opts {
                let v = rng.random_range(10..100i64);
                if !values.contains(&v) {
                    values.push(v);
                }
            }
            let largest = rng.random_bool(0.5);
            let options: Vec<AnswerOption> = values
                .iter()
                .zip('A'..)
                .map(|(v, label)| AnswerOption { label, text: v.to_string() })
                .collect();
            let best = if largest { values.iter().max() } else { values.iter().min() };
            let gold = options[values.iter().position(|v| Some(v) == best).expect("non-empty")].label;
            let which = if largest { "largest" } else { "smallest" };
            DatasetRecord {
                id: format!("desk-{split}-{i:04}"),
                question: format!("Which option shows the {which} number?"),
                options,
                gold,
            }
        })
        .collect()
}

/// Seeds of the bundled `data/desk_{val,test}.jsonl` files.
pub const VALIDATION_SEED: u64 = 2024;
pub const TEST_SEED: u64 = 7;

pub fn validation_set() -> Vec<DatasetRecord> {
    desk_benchmark("val", 60, VALIDATION_SEED)
}

pub fn test_set() -> Vec<DatasetRecord> {
    desk_benchmark("test", 200, TEST_SEED)
}
