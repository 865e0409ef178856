//! Greedy per-stage layer-budget search.
//!
//! Stages are visited from the slowest to the fastest (measured at full depth).
//! For each stage an accuracy-latency profile is built over a budget grid
//! while earlier-searched stages keep their chosen budgets, and the fastest
//! budget whose accuracy stays above a fixed target is kept. The target is
//! the full-depth accuracy minus `epsilon`, computed once.
//!
//! Choosing by measured end-to-end latency rather than by budget size means a
//! budget that makes generations long enough to cost more than it saves is
//! never picked, whatever the accuracy target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalSettings};
use crate::importance::Ranking;
use crate::io::DatasetRecord;
use crate::latency::LatencySource;
use crate::model::LanguageModel;
use crate::pipeline::{SkipConfig, StagePlan};

/// Slack when comparing accuracy against the target, to absorb the rounding
/// of `baseline - epsilon / 100`.
pub const ACCURACY_TOLERANCE: f64 = 1e-12;

/// Aggregate outcome of one validation pass under fixed per-stage budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub accuracy: f64,
    pub mean_latency: f64,
    /// Per stage.
    pub mean_decode_tokens: Vec<f64>,
    /// Per stage, in the same unit as `mean_latency`.
    pub stage_decode_latency: Vec<f64>,
}

/// Something that can score a per-stage budget assignment on validation data.
pub trait BudgetEvaluator {
    fn stage_count(&self) -> usize;

    fn sublayer_count(&self) -> usize;

    fn evaluate(&self, budgets: &[usize]) -> Result<Measurement>;

    fn skip_config(&self, budgets: &[usize]) -> Result<SkipConfig>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    /// Allowed accuracy loss in percentage points.
    pub epsilon: f64,
    pub grid_step: usize,
    /// Largest budget on the grid; defaults to `n_sublayers - grid_step`.
    pub max_budget: Option<usize>,
    pub profile_with_early_exit: bool,
    /// Re-rank the remaining stages after each iteration instead of once up front.
    pub rerank_stages: bool,
    pub latency_source: LatencySource,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            grid_step: 2,
            max_budget: None,
            profile_with_early_exit: true,
            rerank_stages: false,
            latency_source: LatencySource::Model,
        }
    }
}

impl SearchSettings {
    /// `{0, step, 2 * step, ..., max_budget}`.
    pub fn grid(&self, n_sublayers: usize) -> Result<Vec<usize>> {
        if self.grid_step == 0 {
            return Err(Error::InvalidArgument("grid step must be positive".into()));
        }
        let max = self.max_budget.unwrap_or(n_sublayers.saturating_sub(self.grid_step));
        if max > n_sublayers {
            return Err(Error::BudgetOutOfRange { budget: max, max: n_sublayers });
        }
        Ok((0..=max).step_by(self.grid_step).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub budget: usize,
    pub accuracy: f64,
    pub mean_latency: f64,
    /// Mean decode tokens of the profiled stage.
    pub mean_decode_tokens: f64,
    /// Mean decode tokens summed over all stages.
    pub mean_total_decode_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage: usize,
    /// Budgets of every stage while this one was profiled (its own entry is 0).
    pub fixed_budgets: Vec<usize>,
    pub rows: Vec<ProfileRow>,
}

impl StageProfile {
    pub fn row(&self, budget: usize) -> Option<&ProfileRow> {
        self.rows.iter().find(|r| r.budget == budget)
    }
}

/// Fastest row meeting `target_accuracy`; equal latencies prefer the larger budget.
pub fn select_budget(profile: &StageProfile, target_accuracy: f64) -> Result<usize> {
    profile
        .rows
        .iter()
        .filter(|r| r.accuracy >= target_accuracy - ACCURACY_TOLERANCE)
        .min_by(|a, b| a.mean_latency.total_cmp(&b.mean_latency).then(b.budget.cmp(&a.budget)))
        .map(|r| r.budget)
        .ok_or(Error::Infeasible { target: target_accuracy })
}

/// Orders stages by descending decode latency; ties keep stage order.
pub fn order_by_decode_latency(stage_decode_latency: &[f64], stages: &[usize]) -> Vec<usize> {
    let mut order = stages.to_vec();
    order.sort_by(|&a, &b| stage_decode_latency[b].total_cmp(&stage_decode_latency[a]));
    order
}

/// Stages from slowest to fastest decode at full depth.
pub fn rank_stages_by_decode_time<E: BudgetEvaluator + ?Sized>(evaluator: &E) -> Result<Vec<usize>> {
    let n = evaluator.stage_count();
    let m = evaluator.evaluate(&vec![0; n])?;
    Ok(order_by_decode_latency(&m.stage_decode_latency, &(0..n).collect::<Vec<_>>()))
}

/// Evaluates every grid budget for `stage` on top of `fixed_budgets`.
pub fn profile_stage<E: BudgetEvaluator + ?Sized>(
    evaluator: &E,
    stage: usize,
    grid: &[usize],
    fixed_budgets: &[usize],
) -> Result<StageProfile> {
    if stage >= evaluator.stage_count() || fixed_budgets.len() != evaluator.stage_count() {
        return Err(Error::InvalidArgument(format!(
            "cannot profile stage {stage} with {} fixed budgets over {} stages",
            fixed_budgets.len(),
            evaluator.stage_count()
        )));
    }
    let mut budgets = fixed_budgets.to_vec();
    budgets[stage] = 0;
    let fixed = budgets.clone();
    let rows = grid
        .iter()
        .map(|&k| {
            budgets[stage] = k;
            let m = evaluator.evaluate(&budgets)?;
            log::debug!(
                "stage {} budget {k}: acc {:.4} latency {:.4}",
                stage + 1,
                m.accuracy,
                m.mean_latency
            );
            Ok(ProfileRow {
                budget: k,
                accuracy: m.accuracy,
                mean_latency: m.mean_latency,
                mean_decode_tokens: m.mean_decode_tokens[stage],
                mean_total_decode_tokens: m.mean_decode_tokens.iter().sum(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(StageProfile { stage, fixed_budgets: fixed, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchIteration {
    pub stage: usize,
    pub profile: StageProfile,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub settings: SearchSettings,
    pub grid: Vec<usize>,
    pub stage_order: Vec<usize>,
    pub baseline_accuracy: f64,
    pub baseline_latency: f64,
    pub target_accuracy: f64,
    pub iterations: Vec<SearchIteration>,
    pub budgets: Vec<usize>,
    pub skip_config: SkipConfig,
    pub final_accuracy: f64,
    pub final_latency: f64,
}

impl SearchResult {
    /// Mean skipped sub-layers per stage.
    pub fn mean_budget(&self) -> f64 {
        self.budgets.iter().sum::<usize>() as f64 / self.budgets.len().max(1) as f64
    }
}

pub fn greedy_search<E: BudgetEvaluator + ?Sized>(
    evaluator: &E,
    settings: &SearchSettings,
) -> Result<SearchResult> {
    let n = evaluator.stage_count();
    let grid = settings.grid(evaluator.sublayer_count())?;
    let mut budgets = vec![0; n];

    let baseline = evaluator.evaluate(&budgets)?;
    let target_accuracy = baseline.accuracy - settings.epsilon / 100.0;
    let all: Vec<usize> = (0..n).collect();
    let mut order = order_by_decode_latency(&baseline.stage_decode_latency, &all);
    log::info!(
        "baseline accuracy {:.4}, target {:.4}, stage order {:?}",
        baseline.accuracy,
        target_accuracy,
        order.iter().map(|s| s + 1).collect::<Vec<_>>()
    );

    let mut iterations = Vec::with_capacity(n);
    let mut visited = Vec::with_capacity(n);
    while visited.len() < n {
        let stage = order[visited.len()];
        let profile = profile_stage(evaluator, stage, &grid, &budgets)?;
        let chosen = select_budget(&profile, target_accuracy)?;
        log::info!("stage {}: budget {chosen}", stage + 1);
        budgets[stage] = chosen;
        visited.push(stage);
        iterations.push(SearchIteration { stage, profile, chosen });

        if settings.rerank_stages && visited.len() < n {
            let m = evaluator.evaluate(&budgets)?;
            let remaining: Vec<usize> = all.iter().copied().filter(|s| !visited.contains(s)).collect();
            order.truncate(visited.len());
            order.extend(order_by_decode_latency(&m.stage_decode_latency, &remaining));
        }
    }

    let last = &iterations.last().expect("at least one stage").profile;
    let final_row = last.row(budgets[last.stage]).expect("chosen budget is on the grid");
    Ok(SearchResult {
        settings: settings.clone(),
        grid,
        stage_order: visited,
        baseline_accuracy: baseline.accuracy,
        baseline_latency: baseline.mean_latency,
        target_accuracy,
        skip_config: evaluator.skip_config(&budgets)?,
        budgets,
        final_accuracy: final_row.accuracy,
        final_latency: final_row.mean_latency,
        iterations,
    })
}

/// Evaluates budgets by running the real pipeline over a validation set.
pub struct PipelineEvaluator<'a, M> {
    pub model: &'a M,
    pub plan: &'a StagePlan,
    pub validation: &'a [DatasetRecord],
    pub ranking: &'a Ranking,
    pub settings: EvalSettings,
}

impl<'a, M: LanguageModel> PipelineEvaluator<'a, M> {
    /// Uses `settings` for sampling and latency, toggling early exit per `search`.
    pub fn new(
        model: &'a M,
        plan: &'a StagePlan,
        validation: &'a [DatasetRecord],
        ranking: &'a Ranking,
        settings: &EvalSettings,
        search: &SearchSettings,
    ) -> Self {
        let mut settings = settings.clone();
        settings.latency_source = search.latency_source;
        if !search.profile_with_early_exit {
            settings.pipeline.early_exit = None;
        } else if settings.pipeline.early_exit.is_none() {
            settings.pipeline.early_exit = Some(Default::default());
        }
        Self { model, plan, validation, ranking, settings }
    }
}

impl<M: LanguageModel> BudgetEvaluator for PipelineEvaluator<'_, M> {
    fn stage_count(&self) -> usize {
        self.plan.len()
    }

    fn sublayer_count(&self) -> usize {
        self.ranking.n_sublayers()
    }

    fn evaluate(&self, budgets: &[usize]) -> Result<Measurement> {
        let config = self.skip_config(budgets)?;
        let r = eval::evaluate(self.model, self.validation, self.plan, &config, &self.settings, None)?;
        Ok(Measurement {
            accuracy: r.accuracy,
            mean_latency: r.mean_latency,
            mean_decode_tokens: r.mean_decode_tokens,
            stage_decode_latency: r.mean_stage_decode_latency,
        })
    }

    fn skip_config(&self, budgets: &[usize]) -> Result<SkipConfig> {
        SkipConfig::from_ranking(self.ranking, budgets)
    }
}
