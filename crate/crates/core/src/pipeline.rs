//! Multi-stage reasoning: each stage renders a prompt from the question and the
//! earlier stages' outputs, prefills it at full depth, then decodes with that
//! stage's skip set.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::early_exit::{self, ConfidenceCache, EarlyExitConfig, ExitDecision};
use crate::error::{Error, Result};
use crate::importance::{ImportanceTable, Ranking};
use crate::io::{AnswerOption, DatasetRecord};
use crate::latency::{self, LatencyModel};
use crate::model::{LanguageModel, ResidualTrace, SkipSet, TraceMode};
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Text with `{question}`, `{options}` and `{stage_<i>_output}` placeholders
    /// (1-based `i`). `{{` and `}}` produce literal braces.
    pub template: String,
    pub max_new_tokens: usize,
    /// Extra stop tokens; the model's EOS always stops generation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn new(stages: Vec<StageSpec>) -> Result<Self> {
        let plan = Self { stages };
        plan.validate()?;
        Ok(plan)
    }

    /// Recall / Analysis / Summary, the three-stage plan used by the desk benchmark.
    pub fn recall_analysis_summary() -> Self {
        let header = "Question: {question}\nOptions:\n{options}\n";
        Self {
            stages: vec![
                StageSpec {
                    name: "Recall".into(),
                    template: format!(
                        "{header}Stage 1 (Recall): Recall the facts needed for this question.\n"
                    ),
                    max_new_tokens: 96,
                    stop_tokens: vec![],
                },
                StageSpec {
                    name: "Analysis".into(),
                    template: format!(
                        "{header}Recall: {{stage_1_output}}\nStage 2 (Analysis): Analyze each option.\n"
                    ),
                    max_new_tokens: 192,
                    stop_tokens: vec![],
                },
                StageSpec {
                    name: "Summary".into(),
                    template: format!(
                        "{header}Recall: {{stage_1_output}}\nAnalysis: {{stage_2_output}}\nStage 3 (Summary): State the final answer.\n"
                    ),
                    max_new_tokens: 64,
                    stop_tokens: vec![],
                },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidArgument("stage plan has no stages".into()));
        }
        for (i, spec) in self.stages.iter().enumerate() {
            if spec.max_new_tokens == 0 {
                log::warn!("stage `{}` has max_new_tokens = 0", spec.name);
            }
            for p in placeholders(spec)? {
                check_placeholder(spec, &p, i)?;
            }
        }
        Ok(())
    }
}

enum Piece<'a> {
    Text(&'a str),
    Brace(char),
    Slot(&'a str),
}

fn parse_template(spec: &StageSpec) -> Result<Vec<Piece<'_>>> {
    let t = spec.template.as_str();
    let err = |msg: String| Error::Template { stage: spec.name.clone(), msg };
    let mut pieces = Vec::new();
    let mut rest = t;
    while let Some(pos) = rest.find(['{', '}']) {
        pieces.push(Piece::Text(&rest[..pos]));
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            pieces.push(Piece::Brace('{'));
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            pieces.push(Piece::Brace('}'));
            rest = after;
        } else if tail.starts_with('}') {
            return Err(err("unmatched `}`".into()));
        } else {
            let end = tail.find('}').ok_or_else(|| err("unclosed `{`".into()))?;
            pieces.push(Piece::Slot(&tail[1..end]));
            rest = &tail[end + 1..];
        }
    }
    pieces.push(Piece::Text(rest));
    Ok(pieces)
}

fn placeholders(spec: &StageSpec) -> Result<Vec<String>> {
    Ok(parse_template(spec)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(s) => Some(s.to_string()),
            _ => None,
        })
        .collect())
}

/// Returns the 0-based stage a `stage_<i>_output` placeholder refers to.
fn stage_reference(name: &str) -> Option<usize> {
    let i: usize = name.strip_prefix("stage_")?.strip_suffix("_output")?.parse().ok()?;
    i.checked_sub(1)
}

fn check_placeholder(spec: &StageSpec, name: &str, stage: usize) -> Result<()> {
    let err = |msg: String| Error::Template { stage: spec.name.clone(), msg };
    match name {
        "question" | "options" => Ok(()),
        other => match stage_reference(other) {
            Some(i) if i < stage => Ok(()),
            Some(_) => Err(err(format!(
                "`{{{other}}}` refers to a stage that has not run before stage {}",
                stage + 1
            ))),
            None => Err(err(format!("unknown placeholder `{{{other}}}`"))),
        },
    }
}

pub fn render_options(options: &[AnswerOption]) -> String {
    options.iter().map(|o| format!("({}) {}", o.label, o.text)).collect::<Vec<_>>().join("\n")
}

/// Substitutes the template of the stage that follows `prior_outputs`.
pub fn render_prompt(
    spec: &StageSpec,
    question: &str,
    options: &[AnswerOption],
    prior_outputs: &[String],
) -> Result<String> {
    let stage = prior_outputs.len();
    let mut out = String::with_capacity(spec.template.len() + question.len());
    for piece in parse_template(spec)? {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Brace(c) => out.push(c),
            Piece::Slot("question") => out.push_str(question),
            Piece::Slot("options") => out.push_str(&render_options(options)),
            Piece::Slot(name) => {
                check_placeholder(spec, name, stage)?;
                let i = stage_reference(name).expect("checked above");
                out.push_str(&prior_outputs[i]);
            }
        }
    }
    Ok(out)
}

/// Per-stage skip sets; the layer budget of a stage is the size of its set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipConfig {
    pub per_stage: Vec<SkipSet>,
}

impl SkipConfig {
    pub fn empty(stages: usize) -> Self {
        Self { per_stage: vec![SkipSet::new(); stages] }
    }

    pub fn from_budgets(table: &ImportanceTable, budgets: &[usize]) -> Result<Self> {
        let per_stage = budgets.iter().map(|&k| table.skip_set_for_budget(k)).collect::<Result<_>>()?;
        Ok(Self { per_stage })
    }

    /// Same as [`SkipConfig::from_budgets`] for a [`Ranking`]: one shared table
    /// or one table per stage.
    pub fn from_ranking(ranking: &Ranking, budgets: &[usize]) -> Result<Self> {
        let tables = match ranking {
            Ranking::Shared(table) => return Self::from_budgets(table, budgets),
            Ranking::PerStage(tables) => tables,
        };
        if tables.len() != budgets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} importance tables for {} stages",
                tables.len(),
                budgets.len()
            )));
        }
        let per_stage =
            tables.iter().zip(budgets).map(|(t, &k)| t.skip_set_for_budget(k)).collect::<Result<_>>()?;
        Ok(Self { per_stage })
    }

    pub fn budgets(&self) -> Vec<usize> {
        self.per_stage.iter().map(SkipSet::len).collect()
    }

    pub fn is_full_depth(&self) -> bool {
        self.per_stage.iter().all(SkipSet::is_empty)
    }

    /// Mean skipped sub-layers per stage.
    pub fn mean_budget(&self) -> f64 {
        if self.per_stage.is_empty() {
            return 0.0;
        }
        self.budgets().iter().sum::<usize>() as f64 / self.per_stage.len() as f64
    }

    pub fn validate(&self, stages: usize, n_blocks: usize) -> Result<()> {
        if self.per_stage.len() != stages {
            return Err(Error::InvalidArgument(format!(
                "skip config has {} stages, plan has {stages}",
                self.per_stage.len()
            )));
        }
        self.per_stage.iter().try_for_each(|s| s.validate(n_blocks))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self::greedy()
    }
}

impl SamplingPolicy {
    pub fn greedy() -> Self {
        Self { mode: SamplingMode::Greedy, temperature: 1.0, seed: 0 }
    }

    pub fn temperature(temperature: f64, seed: u64) -> Self {
        Self { mode: SamplingMode::Temperature, temperature, seed }
    }

    /// The same policy reseeded for self-consistency iteration `i`.
    pub fn iteration(&self, i: usize) -> Self {
        Self { seed: self.seed.wrapping_add(i as u64), ..*self }
    }
}

/// Draws tokens for one pipeline run; the RNG stream continues across stages.
pub struct Sampler {
    policy: SamplingPolicy,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(policy: SamplingPolicy) -> Self {
        Self { policy, rng: ChaCha8Rng::seed_from_u64(policy.seed) }
    }

    pub fn sample(&mut self, logits: &[f64]) -> u32 {
        match self.policy.mode {
            SamplingMode::Greedy => argmax(logits),
            SamplingMode::Temperature => {
                let t = self.policy.temperature.max(1e-6);
                let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
                let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = self.rng.random::<f64>() * total;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return i as u32;
                    }
                    u -= w;
                }
                argmax(logits)
            }
        }
    }
}

/// Index of the first maximum.
pub fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitReason {
    NaturalEos,
    ConfidenceExit,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTranscript {
    pub name: String,
    pub prompt: String,
    /// Emitted tokens, including a terminating stop token or forced EOS.
    pub generated: Vec<u32>,
    pub text: String,
    pub confidences: Vec<f64>,
    pub exit_reason: ExitReason,
    pub prefill_len: usize,
    pub decode_len: usize,
    pub skipped: usize,
    pub wallclock_secs: f64,
    pub decode_wallclock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub stages: Vec<StageTranscript>,
    pub wallclock_secs: f64,
    pub modeled_latency: f64,
}

impl Transcript {
    pub fn final_text(&self) -> &str {
        self.stages.last().map(|s| s.text.as_str()).unwrap_or("")
    }

    pub fn decode_tokens(&self) -> usize {
        self.stages.iter().map(|s| s.decode_len).sum()
    }

    /// Zeroes wall-clock fields so transcripts can be compared exactly.
    pub fn without_timing(mut self) -> Self {
        self.wallclock_secs = 0.0;
        for s in &mut self.stages {
            s.wallclock_secs = 0.0;
            s.decode_wallclock_secs = 0.0;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// `None` disables generation early exit.
    pub early_exit: Option<EarlyExitConfig>,
    pub sampling: SamplingPolicy,
    pub latency_model: LatencyModel,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            early_exit: Some(EarlyExitConfig::default()),
            sampling: SamplingPolicy::greedy(),
            latency_model: LatencyModel::default(),
        }
    }
}

impl PipelineOptions {
    pub fn without_early_exit(&self) -> Self {
        Self { early_exit: None, ..self.clone() }
    }
}

/// Prefills `prompt` at full depth and decodes with `skip` until a stop token,
/// a confidence exit, or `max_new_tokens`.
pub fn run_stage<M: LanguageModel>(
    model: &M,
    spec: &StageSpec,
    prompt: &str,
    skip: &SkipSet,
    sampler: &mut Sampler,
    early_exit: Option<&EarlyExitConfig>,
    trace: TraceMode,
) -> Result<(StageTranscript, Option<ResidualTrace>)> {
    let dims = model.dims();
    skip.validate(dims.n_blocks)?;
    let tokens = tokenizer::encode(prompt);
    let needed = tokens.len() + spec.max_new_tokens;
    if needed > dims.max_seq_len {
        return Err(Error::ContextOverflow { len: needed, max: dims.max_seq_len });
    }
    let stops: BTreeSet<u32> = spec.stop_tokens.iter().copied().chain([dims.eos_token]).collect();
    let mut cache = early_exit.map(ConfidenceCache::from_config);
    let mode = early_exit.map(|e| e.mode).unwrap_or_default();

    let start = Instant::now();
    let prefill = model.prefill(&tokens, trace)?;
    let mut state = prefill.state;
    let mut logits = prefill.logits;
    let decode_start = Instant::now();

    let mut generated = Vec::new();
    let mut confidences = Vec::new();
    let mut exit_reason = ExitReason::MaxTokens;
    for step in 1..=spec.max_new_tokens {
        let conf = early_exit::confidence(&logits, mode)?;
        confidences.push(conf);
        let token = sampler.sample(&logits);
        if let Some(c) = cache.as_mut() {
            if c.observe(conf) == ExitDecision::Exit {
                generated.push(dims.eos_token);
                exit_reason = ExitReason::ConfidenceExit;
                break;
            }
        }
        generated.push(token);
        if stops.contains(&token) {
            exit_reason = ExitReason::NaturalEos;
            break;
        }
        if step == spec.max_new_tokens {
            break;
        }
        logits = model.decode_step(&mut state, token, skip)?;
    }
    let decode_wallclock_secs = decode_start.elapsed().as_secs_f64();
    let wallclock_secs = start.elapsed().as_secs_f64();

    let text_tokens: Vec<u32> = generated.iter().copied().filter(|t| !stops.contains(t)).collect();
    let transcript = StageTranscript {
        name: spec.name.clone(),
        prompt: prompt.to_string(),
        text: tokenizer::decode(&text_tokens),
        decode_len: generated.len(),
        generated,
        confidences,
        exit_reason,
        prefill_len: tokens.len(),
        skipped: skip.len(),
        wallclock_secs,
        decode_wallclock_secs,
    };
    Ok((transcript, prefill.trace))
}

pub struct TracedTranscript {
    pub transcript: Transcript,
    /// One prefill trace per stage.
    pub traces: Vec<ResidualTrace>,
}

pub fn run_pipeline<M: LanguageModel>(
    model: &M,
    plan: &StagePlan,
    record: &DatasetRecord,
    skip_config: &SkipConfig,
    options: &PipelineOptions,
) -> Result<Transcript> {
    Ok(run_inner(model, plan, record, skip_config, options, TraceMode::Off)?.transcript)
}

/// [`run_pipeline`] that also records every stage's prefill residual trace.
pub fn run_pipeline_traced<M: LanguageModel>(
    model: &M,
    plan: &StagePlan,
    record: &DatasetRecord,
    skip_config: &SkipConfig,
    options: &PipelineOptions,
    trace: TraceMode,
) -> Result<TracedTranscript> {
    let mode = if trace == TraceMode::Off { TraceMode::Cosine } else { trace };
    run_inner(model, plan, record, skip_config, options, mode)
}

fn run_inner<M: LanguageModel>(
    model: &M,
    plan: &StagePlan,
    record: &DatasetRecord,
    skip_config: &SkipConfig,
    options: &PipelineOptions,
    trace: TraceMode,
) -> Result<TracedTranscript> {
    let dims = model.dims();
    skip_config.validate(plan.len(), dims.n_blocks)?;
    if let Some(ee) = &options.early_exit {
        ee.validate()?;
    }
    let mut sampler = Sampler::new(options.sampling);
    let mut outputs: Vec<String> = Vec::with_capacity(plan.len());
    let mut stages = Vec::with_capacity(plan.len());
    let mut traces = Vec::new();
    let start = Instant::now();
    for (spec, skip) in plan.stages.iter().zip(&skip_config.per_stage) {
        let prompt = render_prompt(spec, &record.question, &record.options, &outputs)?;
        let (stage, t) =
            run_stage(model, spec, &prompt, skip, &mut sampler, options.early_exit.as_ref(), trace)?;
        outputs.push(stage.text.clone());
        stages.push(stage);
        traces.extend(t);
    }
    let wallclock_secs = start.elapsed().as_secs_f64();
    let modeled_latency = latency::modeled_latency(
        stages.iter().map(latency::StageCost::from),
        &options.latency_model,
        dims.n_blocks,
    );
    Ok(TracedTranscript { transcript: Transcript { stages, wallclock_secs, modeled_latency }, traces })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(template: &str) -> StageSpec {
        StageSpec { name: "s".into(), template: template.into(), max_new_tokens: 4, stop_tokens: vec![] }
    }

    fn opts() -> Vec<AnswerOption> {
        vec![AnswerOption { label: 'A', text: "cat".into() }, AnswerOption { label: 'B', text: "dog".into() }]
    }

    #[test]
    fn substitutes_question() {
        let out = render_prompt(&spec("Q: {question}"), "Why?", &opts(), &[]).unwrap();
        assert_eq!(out, "Q: Why?");
    }

    #[test]
    fn renders_options_as_lines() {
        let out = render_prompt(&spec("{options}"), "", &opts(), &[]).unwrap();
        assert_eq!(out, "(A) cat\n(B) dog");
    }

    #[test]
    fn includes_prior_output() {
        let prior = vec!["Recall text".to_string()];
        let out = render_prompt(&spec("R: {stage_1_output}."), "", &opts(), &prior).unwrap();
        assert!(out.contains("Recall text"));
    }

    #[test]
    fn forward_reference_is_an_error() {
        let prior = vec!["one".to_string()];
        let err = render_prompt(&spec("{stage_3_output}"), "", &opts(), &prior).unwrap_err();
        assert!(matches!(err, Error::Template { .. }));
        let err = render_prompt(&spec("{stage_2_output}"), "", &opts(), &prior).unwrap_err();
        assert!(matches!(err, Error::Template { .. }));
    }

    #[test]
    fn unknown_placeholder_and_escapes() {
        assert!(render_prompt(&spec("{nope}"), "", &opts(), &[]).is_err());
        assert!(render_prompt(&spec("{question"), "", &opts(), &[]).is_err());
        let out = render_prompt(&spec("{{x}} {question}"), "q", &opts(), &[]).unwrap();
        assert_eq!(out, "{x} q");
    }

    #[test]
    fn plan_validation_catches_self_reference() {
        let mut plan = StagePlan::recall_analysis_summary();
        assert!(plan.validate().is_ok());
        plan.stages[1].template.push_str("{stage_2_output}");
        assert!(plan.validate().is_err());
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
    }

    #[test]
    fn temperature_sampling_is_seeded() {
        let logits: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let draw = |seed| {
            let mut s = Sampler::new(SamplingPolicy::temperature(1.0, seed));
            (0..50).map(|_| s.sample(&logits)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn mean_budget_matches_table_reading() {
        let table = ImportanceTable::from_scores((0..44).map(|g| g as f64 / 44.0).collect(), 1, 1).unwrap();
        let cfg = SkipConfig::from_budgets(&table, &[2, 4, 5]).unwrap();
        assert_eq!(cfg.budgets(), vec![2, 4, 5]);
        assert!((cfg.mean_budget() - 11.0 / 3.0).abs() < 1e-12);
    }
}
