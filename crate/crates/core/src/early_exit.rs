//! Confidence-based generation early exit.
//!
//! Each decode step pushes the emitted token's confidence into a ring of the
//! last `window` values. Once the ring is full, a mean below `threshold`
//! ends the stage and the current token is replaced by EOS.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    /// Maximum softmax probability.
    #[default]
    Probability,
    /// Raw maximum logit, unnormalized.
    MaxLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyExitConfig {
    pub window: usize,
    pub threshold: f64,
    #[serde(default)]
    pub mode: ConfidenceMode,
}

impl Default for EarlyExitConfig {
    fn default() -> Self {
        Self { window: 5, threshold: 0.5, mode: ConfidenceMode::Probability }
    }
}

impl EarlyExitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("early-exit window must be positive".into()));
        }
        if self.mode == ConfidenceMode::Probability && !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "early-exit threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Maximum softmax probability of `logits`.
pub fn token_confidence(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    // The max term contributes exp(0) = 1 to the normaliser.
    Ok(1.0 / total)
}

pub fn confidence(logits: &[f64], mode: ConfidenceMode) -> Result<f64> {
    match mode {
        ConfidenceMode::Probability => token_confidence(logits),
        ConfidenceMode::MaxLogit => {
            if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFiniteLogits);
            }
            Ok(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitDecision {
    Continue,
    Exit,
}

#[derive(Debug, Clone)]
pub struct ConfidenceCache {
    window: usize,
    threshold: f64,
    ring: VecDeque<f64>,
    steps_seen: usize,
}

impl ConfidenceCache {
    pub fn new(window: usize, threshold: f64) -> Self {
        assert!(window > 0, "confidence window must be positive");
        Self { window, threshold, ring: VecDeque::with_capacity(window), steps_seen: 0 }
    }

    pub fn from_config(config: &EarlyExitConfig) -> Self {
        Self::new(config.window, config.threshold)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn steps_seen(&self) -> usize {
        self.steps_seen
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.ring.is_empty()).then(|| self.ring.iter().sum::<f64>() / self.ring.len() as f64)
    }

    pub fn observe(&mut self, confidence: f64) -> ExitDecision {
        if self.ring.len() == self.window {
            self.ring.pop_front();
        }
        self.ring.push_back(confidence);
        self.steps_seen += 1;
        match self.mean() {
            Some(mean) if self.steps_seen >= self.window && mean < self.threshold => ExitDecision::Exit,
            _ => ExitDecision::Continue,
        }
    }

    pub fn reset(&mut self) {
        self.ring.clear();
        self.steps_seen = 0;
    }
}
