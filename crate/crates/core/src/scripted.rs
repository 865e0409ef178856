//! Scripted multi-stage evaluator for exercising the budget search without a model.
//!
//! Each stage carries a table, indexed by budget, of how many validation
//! answers it breaks and how many tokens it decodes. Latency follows the
//! deterministic cost model, so earlier stages' lengths feed later prefills.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::latency::{self, LatencyModel, StageCost};
use crate::pipeline::SkipConfig;
use crate::search::{BudgetEvaluator, Measurement};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedStage {
    pub prompt_len: usize,
    /// Tokens decoded at each budget `0..=n_sublayers`.
    pub decode_len: Vec<usize>,
    /// Validation answers lost at each budget; `lost[0] == 0`.
    pub lost: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedStages {
    pub n_blocks: usize,
    pub samples: usize,
    pub baseline_correct: usize,
    pub latency_model: LatencyModel,
    pub stages: Vec<ScriptedStage>,
}

impl ScriptedStages {
    pub fn n_sublayers(&self) -> usize {
        2 * self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.n_sublayers() + 1;
        if self.baseline_correct > self.samples || self.samples == 0 {
            return Err(Error::InvalidArgument("baseline exceeds sample count".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.decode_len.len() != width || s.lost.len() != width || s.lost[0] != 0 {
                return Err(Error::InvalidArgument(format!(
                    "scripted stage {i} needs {width} entries and lost[0] = 0"
                )));
            }
        }
        Ok(())
    }

    pub fn correct(&self, budgets: &[usize]) -> usize {
        let lost: usize = self.stages.iter().zip(budgets).map(|(s, &k)| s.lost[k]).sum();
        self.baseline_correct.saturating_sub(lost)
    }

    /// Each stage's prompt grows by everything decoded before it.
    pub fn stage_costs(&self, budgets: &[usize]) -> Vec<StageCost> {
        let mut carried = 0;
        self.stages
            .iter()
            .zip(budgets)
            .map(|(s, &k)| {
                let cost = StageCost {
                    prefill_len: s.prompt_len + carried,
                    decode_len: s.decode_len[k],
                    skipped: k,
                };
                carried += cost.decode_len;
                cost
            })
            .collect()
    }

    /// Random script: accuracy loss grows with budget at a per-stage rate and
    /// decode length may inflate, sometimes enough to outweigh the skipping.
    pub fn random<R: Rng>(rng: &mut R, n_blocks: usize, n_stages: usize, samples: usize) -> Self {
        let n_sub = 2 * n_blocks;
        let baseline_correct = rng.random_range(samples / 2..=samples);
        let stages = (0..n_stages)
            .map(|_| {
                let base = rng.random_range(8..80usize);
                let inflation = rng.random_range(0.0..3.0f64);
                let power = rng.random_range(1.0..3.0f64);
                let sensitivity = rng.random_range(0.0..1.0f64).powi(2);
                let decode_len = (0..=n_sub)
                    .map(|k| {
                        let frac = k as f64 / n_sub as f64;
                        let jitter = if k > 0 { rng.random_range(0..3usize) } else { 0 };
                        base + (base as f64 * inflation * frac.powf(power)) as usize + jitter
                    })
                    .collect();
                let mut lost = vec![0usize];
                for k in 1..=n_sub {
                    let frac = k as f64 / n_sub as f64;
                    let p = (sensitivity * 2.0 * frac).min(1.0);
                    let step = (0..3).filter(|_| rng.random_bool(p)).count();
                    lost.push(lost[k - 1] + step);
                }
                ScriptedStage { prompt_len: rng.random_range(20..120), decode_len, lost }
            })
            .collect();
        Self { n_blocks, samples, baseline_correct, latency_model: LatencyModel::default(), stages }
    }
}

impl BudgetEvaluator for ScriptedStages {
    fn stage_count(&self) -> usize {
        self.stages.len()
    }

    fn sublayer_count(&self) -> usize {
        self.n_sublayers()
    }

    fn evaluate(&self, budgets: &[usize]) -> Result<Measurement> {
        if budgets.len() != self.stages.len() {
            return Err(Error::InvalidArgument("one budget per stage required".into()));
        }
        if let Some(&k) = budgets.iter().find(|&&k| k > self.n_sublayers()) {
            return Err(Error::BudgetOutOfRange { budget: k, max: self.n_sublayers() });
        }
        let costs = self.stage_costs(budgets);
        let lm = &self.latency_model;
        Ok(Measurement {
            accuracy: self.correct(budgets) as f64 / self.samples as f64,
            mean_latency: latency::modeled_latency(costs.iter().copied(), lm, self.n_blocks),
            mean_decode_tokens: costs.iter().map(|c| c.decode_len as f64).collect(),
            stage_decode_latency: costs
                .iter()
                .map(|c| lm.decode_cost(self.n_blocks, c.skipped, c.decode_len))
                .collect(),
        })
    }

    fn skip_config(&self, budgets: &[usize]) -> Result<SkipConfig> {
        // Later sub-layers are treated as more redundant.
        let n = self.n_sublayers();
        let scores = (0..n).map(|g| g as f64 / n as f64).collect();
        let table = ImportanceTable::from_scores(scores, self.samples, self.stages.len())?;
        SkipConfig::from_budgets(&table, budgets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_scripts_are_valid_and_monotone_in_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = ScriptedStages::random(&mut rng, 6, 3, 100);
            s.validate().unwrap();
            for st in &s.stages {
                assert!(st.lost.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn earlier_output_feeds_later_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ScriptedStages::random(&mut rng, 2, 3, 10);
        let c = s.stage_costs(&[0, 0, 0]);
        assert_eq!(c[2].prefill_len, s.stages[2].prompt_len + c[0].decode_len + c[1].decode_len);
    }
}
