//! Decoder-only models whose sub-layers can be bypassed during decoding.

mod kv_cache;
mod rope;
mod transformer;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kv_cache::{BlockCache, KvCache};
pub use rope::RotaryEmbedding;
pub use transformer::{BlockWeights, ModelConfig, Transformer, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubLayerKind {
    Mhsa,
    Ffn,
}

impl fmt::Display for SubLayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubLayerKind::Mhsa => f.write_str("MHSA"),
            SubLayerKind::Ffn => f.write_str("FFN"),
        }
    }
}

/// One attention or feed-forward sub-layer of one decoder block.
///
/// The derived ordering matches the global ordinal `2 * block + kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubLayerRef {
    pub block: usize,
    pub kind: SubLayerKind,
}

impl SubLayerRef {
    pub fn mhsa(block: usize) -> Self {
        Self { block, kind: SubLayerKind::Mhsa }
    }

    pub fn ffn(block: usize) -> Self {
        Self { block, kind: SubLayerKind::Ffn }
    }

    pub fn ordinal(&self) -> usize {
        2 * self.block
            + match self.kind {
                SubLayerKind::Mhsa => 0,
                SubLayerKind::Ffn => 1,
            }
    }

    pub fn from_ordinal(ordinal: usize) -> Self {
        let kind = if ordinal.is_multiple_of(2) { SubLayerKind::Mhsa } else { SubLayerKind::Ffn };
        Self { block: ordinal / 2, kind }
    }

    /// All sub-layers of an `n_blocks` model in ordinal order.
    pub fn all(n_blocks: usize) -> impl Iterator<Item = SubLayerRef> {
        (0..2 * n_blocks).map(Self::from_ordinal)
    }
}

impl fmt::Display for SubLayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind)
    }
}

/// Sub-layers bypassed at every decode step of one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkipSet(BTreeSet<SubLayerRef>);

impl SkipSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn all(n_blocks: usize) -> Self {
        SubLayerRef::all(n_blocks).collect()
    }

    pub fn insert(&mut self, layer: SubLayerRef) -> bool {
        self.0.insert(layer)
    }

    pub fn contains(&self, layer: SubLayerRef) -> bool {
        self.0.contains(&layer)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SubLayerRef> {
        self.0.iter()
    }

    pub fn is_subset(&self, other: &SkipSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        match self.0.iter().find(|l| l.block >= n_blocks) {
            Some(l) => Err(Error::InvalidSkipSet(format!("{l} does not exist in a {n_blocks}-block model"))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for SkipSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{l}")?;
        }
        f.write_str("}")
    }
}

impl FromIterator<SubLayerRef> for SkipSet {
    fn from_iter<I: IntoIterator<Item = SubLayerRef>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Shape facts the pipeline needs from any model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_blocks: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub eos_token: u32,
}

impl ModelDims {
    pub fn n_sublayers(&self) -> usize {
        2 * self.n_blocks
    }
}

/// How much of the residual stream to record during prefill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TraceMode {
    #[default]
    Off,
    /// Cosine similarity between sub-layer input and output per position.
    Cosine,
    /// Cosines plus the raw input/output vectors.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPair {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

/// Residual-stream record of one prefill, indexed by sub-layer ordinal then position.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub cosines: Vec<Vec<f64>>,
    /// Empty unless recorded with [`TraceMode::Full`].
    pub pairs: Vec<Vec<ResidualPair>>,
}

impl ResidualTrace {
    pub(crate) fn new(n_sublayers: usize, mode: TraceMode) -> Self {
        let pairs = if mode == TraceMode::Full { vec![Vec::new(); n_sublayers] } else { Vec::new() };
        Self { cosines: vec![Vec::new(); n_sublayers], pairs }
    }

    pub(crate) fn record(&mut self, layer: SubLayerRef, input: &[f64], output: &[f64]) {
        let g = layer.ordinal();
        self.cosines[g].push(cosine_similarity(input, output));
        if !self.pairs.is_empty() {
            self.pairs[g].push(ResidualPair { input: input.to_vec(), output: output.to_vec() });
        }
    }

    /// Mean cosine over positions for each sub-layer.
    pub fn position_means(&self) -> Vec<f64> {
        self.cosines
            .iter()
            .map(|c| {
                if c.is_empty() {
                    0.0
                } else {
                    crate::importance::KahanSum::sum(c.iter().copied()) / c.len() as f64
                }
            })
            .collect()
    }
}

pub struct Prefill<S> {
    pub state: S,
    /// Next-token logits after the last prompt position.
    pub logits: Vec<f64>,
    pub trace: Option<ResidualTrace>,
}

/// A causal language model that supports per-step sub-layer skipping.
///
/// Prefill always runs every sub-layer. Each sequence owns its `State`; the
/// model itself is immutable and shared across threads.
pub trait LanguageModel: Sync {
    type State: Send;

    fn dims(&self) -> ModelDims;

    fn prefill(&self, tokens: &[u32], trace: TraceMode) -> Result<Prefill<Self::State>>;

    /// Feeds `token` and returns logits for the following position.
    fn decode_step(&self, state: &mut Self::State, token: u32, skip: &SkipSet) -> Result<Vec<f64>>;
}

/// Cosine similarity clamped to `[-1, 1]`. Two zero vectors count as identical.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    // sqrt(x * x) == x exactly in IEEE arithmetic, so identical vectors give 1.0.
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}
