use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    KvCache, LanguageModel, ModelDims, Prefill, ResidualTrace, RotaryEmbedding, SkipSet, SubLayerRef,
    TraceMode,
};
use crate::error::{Error, Result};
use crate::tokenizer;

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
    /// Reuse the embedding matrix as the output head.
    #[serde(default)]
    pub tied_head: bool,
}

impl ModelConfig {
    /// A small byte-level model used by tests, examples and the CLI.
    pub fn toy(n_blocks: usize, rng_seed: u64) -> Self {
        Self {
            n_blocks,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq_len: 1024,
            rng_seed,
            tied_head: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_sublayers(&self) -> usize {
        2 * self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.vocab_size <= tokenizer::EOS as usize {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} cannot hold the byte tokenizer ({} ids)",
                self.vocab_size,
                tokenizer::VOCAB_SIZE
            )));
        }
        Ok(())
    }
}

/// Row-major `f32` weights of one decoder block. Projections are `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Vec<f32>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Vec<f32>,
    /// `None` when the head is tied to `embed`.
    pub head: Option<Vec<f32>>,
}

impl Weights {
    /// Canonical tensor names and shapes for `config`, in container order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for i in 0..config.n_blocks {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.attn_norm"), vec![d]));
            out.push((format!("{p}.attn.wq"), vec![d, d]));
            out.push((format!("{p}.attn.wk"), vec![d, d]));
            out.push((format!("{p}.attn.wv"), vec![d, d]));
            out.push((format!("{p}.attn.wo"), vec![d, d]));
            out.push((format!("{p}.ffn_norm"), vec![d]));
            out.push((format!("{p}.ffn.w_gate"), vec![f, d]));
            out.push((format!("{p}.ffn.w_up"), vec![f, d]));
            out.push((format!("{p}.ffn.w_down"), vec![d, f]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        if !config.tied_head {
            out.push(("head".to_string(), vec![v, d]));
        }
        out
    }

    /// Tensors in [`Weights::layout`] order.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.embed];
        for b in &self.blocks {
            out.extend([
                &b.attn_norm[..],
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.ffn_norm,
                &b.w_gate,
                &b.w_up,
                &b.w_down,
            ]);
        }
        out.push(&self.final_norm);
        if let Some(head) = &self.head {
            out.push(head);
        }
        out
    }

    /// Builds weights from tensors given in [`Weights::layout`] order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let layout = Self::layout(config);
        if tensors.len() != layout.len() {
            return Err(Error::Weights(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            let n: usize = shape.iter().product();
            if t.len() != n {
                return Err(Error::Weights(format!("tensor {name} has {} values, expected {n}", t.len())));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked above");
        let embed = next();
        let blocks = (0..config.n_blocks)
            .map(|_| BlockWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let head = (!config.tied_head).then(&mut next);
        Ok(Self { embed, blocks, final_norm, head })
    }
}

/// Pre-norm decoder-only transformer with RMSNorm, rotary attention and a SwiGLU FFN.
///
/// Weights are stored as `f32`; all activations are computed in `f64`.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    weights: Weights,
    rope: RotaryEmbedding,
}

impl Transformer {
    /// Draws every matrix from `N(0, 1/d_model)` with a ChaCha8 stream seeded by
    /// `config.rng_seed`; norm gains are 1.
    pub fn synthesize(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let normal = Normal::new(0.0f32, 1.0 / (config.d_model as f32).sqrt())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let tensors = Weights::layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                if name.ends_with("norm") {
                    vec![1.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            })
            .collect();
        let weights = Weights::from_tensors(&config, tensors)?;
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        // Re-checks shapes for hand-built weights.
        let weights =
            Weights::from_tensors(&config, weights.tensors().into_iter().map(<[f32]>::to_vec).collect())?;
        let rope = RotaryEmbedding::new(config.head_dim(), RotaryEmbedding::DEFAULT_THETA);
        Ok(Self { config, weights, rope })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn embedding(&self, token: u32) -> Vec<f64> {
        let d = self.config.d_model;
        let t = token as usize;
        self.weights.embed[t * d..(t + 1) * d].iter().map(|&w| w as f64).collect()
    }

    /// Final norm followed by the output head.
    pub fn output_logits(&self, hidden: &[f64]) -> Vec<f64> {
        let normed = rms_norm(hidden, &self.weights.final_norm);
        let head = self.weights.head.as_deref().unwrap_or(&self.weights.embed);
        matvec(head, self.config.vocab_size, self.config.d_model, &normed)
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs one token through the stack and returns the final hidden state.
    fn forward_token(
        &self,
        cache: &mut KvCache,
        token: u32,
        skip: &SkipSet,
        mut trace: Option<&mut ResidualTrace>,
    ) -> Vec<f64> {
        let position = cache.position;
        let mut x = self.embedding(token);
        for (i, block) in self.weights.blocks.iter().enumerate() {
            let attn = SubLayerRef::mhsa(i);
            if !skip.contains(attn) {
                let normed = rms_norm(&x, &block.attn_norm);
                let branch = self.attention(block, &mut cache.blocks[i], &normed, position);
                let out: Vec<f64> = x.iter().zip(&branch).map(|(a, b)| a + b).collect();
                if let Some(t) = trace.as_deref_mut() {
                    t.record(attn, &x, &out);
                }
                x = out;
                cache.executed_sublayers += 1;
            }
            let ffn = SubLayerRef::ffn(i);
            if !skip.contains(ffn) {
                let normed = rms_norm(&x, &block.ffn_norm);
                let branch = self.feed_forward(block, &normed);
                let out: Vec<f64> = x.iter().zip(&branch).map(|(a, b)| a + b).collect();
                if let Some(t) = trace.as_deref_mut() {
                    t.record(ffn, &x, &out);
                }
                x = out;
                cache.executed_sublayers += 1;
            }
        }
        cache.position += 1;
        x
    }

    fn attention(
        &self,
        w: &BlockWeights,
        cache: &mut super::BlockCache,
        x: &[f64],
        position: usize,
    ) -> Vec<f64> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let mut q = matvec(&w.wq, d, d, x);
        let mut k = matvec(&w.wk, d, d, x);
        let v = matvec(&w.wv, d, d, x);
        self.rope.apply(&mut q, position);
        self.rope.apply(&mut k, position);
        cache.keys.push(k);
        cache.values.push(v);

        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed = vec![0.0; d];
        for h in 0..self.config.n_heads {
            let span = h * hd..(h + 1) * hd;
            let qh = &q[span.clone()];
            let scores: Vec<f64> = cache
                .keys
                .iter()
                .map(|k| qh.iter().zip(&k[span.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let probs = softmax(&scores);
            for (p, v) in probs.iter().zip(&cache.values) {
                for (m, vv) in mixed[span.clone()].iter_mut().zip(&v[span.clone()]) {
                    *m += p * vv;
                }
            }
        }
        matvec(&w.wo, d, d, &mixed)
    }

    fn feed_forward(&self, w: &BlockWeights, x: &[f64]) -> Vec<f64> {
        let (d, f) = (self.config.d_model, self.config.d_ff);
        let gate = matvec(&w.w_gate, f, d, x);
        let up = matvec(&w.w_up, f, d, x);
        let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        matvec(&w.w_down, d, f, &hidden)
    }

    /// Full-depth logits for every position of `tokens`, without reusing any cache.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        self.check_len(tokens.len())?;
        let mut cache = KvCache::new(self.config.n_blocks);
        let empty = SkipSet::new();
        tokens
            .iter()
            .map(|&t| {
                self.check_token(t)?;
                let h = self.forward_token(&mut cache, t, &empty, None);
                Ok(self.output_logits(&h))
            })
            .collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::ContextOverflow { len, max: self.config.max_seq_len });
        }
        Ok(())
    }
}

impl LanguageModel for Transformer {
    type State = KvCache;

    fn dims(&self) -> ModelDims {
        ModelDims {
            n_blocks: self.config.n_blocks,
            vocab_size: self.config.vocab_size,
            max_seq_len: self.config.max_seq_len,
            eos_token: tokenizer::EOS,
        }
    }

    fn prefill(&self, tokens: &[u32], mode: TraceMode) -> Result<Prefill<KvCache>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("prefill needs at least one token".into()));
        }
        self.check_len(tokens.len())?;
        let mut cache = KvCache::new(self.config.n_blocks);
        let mut trace = (mode != TraceMode::Off).then(|| ResidualTrace::new(self.config.n_sublayers(), mode));
        let empty = SkipSet::new();
        let mut hidden = Vec::new();
        for &t in tokens {
            self.check_token(t)?;
            hidden = self.forward_token(&mut cache, t, &empty, trace.as_mut());
        }
        Ok(Prefill { state: cache, logits: self.output_logits(&hidden), trace })
    }

    fn decode_step(&self, cache: &mut KvCache, token: u32, skip: &SkipSet) -> Result<Vec<f64>> {
        self.check_token(token)?;
        skip.validate(self.config.n_blocks)?;
        if cache.blocks.len() != self.config.n_blocks {
            return Err(Error::InvalidArgument(format!(
                "cache has {} blocks, model has {}",
                cache.blocks.len(),
                self.config.n_blocks
            )));
        }
        self.check_len(cache.position + 1)?;
        let h = self.forward_token(cache, token, skip, None);
        Ok(self.output_logits(&h))
    }
}

pub(crate) fn matvec(w: &[f32], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    w.chunks_exact(cols).map(|row| row.iter().zip(x).map(|(&a, b)| a as f64 * b).sum()).collect()
}

pub(crate) fn rms_norm(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, &g)| v * inv * g as f64).collect()
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}
