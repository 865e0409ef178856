//! Deterministic latency accounting.
//!
//! A stage costs `prefill_len * n_sublayers * c_prefill` to prefill plus, for
//! every emitted token, `c_base + active * c_sub` where `active` is the number
//! of sub-layers not skipped. Longer earlier stages therefore raise the
//! prefill cost of later ones, and longer generations can outweigh the
//! per-step savings of skipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::StageTranscript;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Cost per prompt token per sub-layer.
    pub c_prefill: f64,
    /// Fixed cost per decode step.
    pub c_base: f64,
    /// Cost per executed sub-layer per decode step.
    pub c_sub: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { c_prefill: 1.0, c_base: 4.0, c_sub: 1.0 }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if [self.c_prefill, self.c_base, self.c_sub].iter().all(|c| *c > 0.0 && c.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("latency coefficients must be positive, got {self:?}")))
        }
    }

    pub fn step_cost(&self, n_blocks: usize, skipped: usize) -> f64 {
        let active = (2 * n_blocks).saturating_sub(skipped);
        self.c_base + active as f64 * self.c_sub
    }

    pub fn prefill_cost(&self, n_blocks: usize, prefill_len: usize) -> f64 {
        prefill_len as f64 * (2 * n_blocks) as f64 * self.c_prefill
    }

    pub fn decode_cost(&self, n_blocks: usize, skipped: usize, decode_len: usize) -> f64 {
        decode_len as f64 * self.step_cost(n_blocks, skipped)
    }

    pub fn stage_cost(&self, n_blocks: usize, stage: &StageCost) -> f64 {
        self.prefill_cost(n_blocks, stage.prefill_len)
            + self.decode_cost(n_blocks, stage.skipped, stage.decode_len)
    }
}

/// The parts of a stage run that the cost model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub prefill_len: usize,
    pub decode_len: usize,
    pub skipped: usize,
}

impl From<&StageTranscript> for StageCost {
    fn from(s: &StageTranscript) -> Self {
        Self { prefill_len: s.prefill_len, decode_len: s.decode_len, skipped: s.skipped }
    }
}

pub fn modeled_latency(
    stages: impl IntoIterator<Item = StageCost>,
    model: &LatencyModel,
    n_blocks: usize,
) -> f64 {
    stages.into_iter().map(|s| model.stage_cost(n_blocks, &s)).sum()
}

/// Where search and evaluation read latency from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencySource {
    #[default]
    Model,
    Wallclock,
}

impl LatencySource {
    pub fn unit(&self) -> &'static str {
        match self {
            LatencySource::Model => "cost-units",
            LatencySource::Wallclock => "seconds",
        }
    }
}

impl std::str::FromStr for LatencySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Self::Model),
            "wallclock" => Ok(Self::Wallclock),
            other => Err(Error::InvalidArgument(format!("unknown latency source `{other}`"))),
        }
    }
}
