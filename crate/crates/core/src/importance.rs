//! Sub-layer importance from residual cosine similarity.
//!
//! A sub-layer whose output `x + f(x)` stays close in direction to its input
//! `x` changes the residual stream little and is the first candidate to skip.
//! Scores are averaged over prompt positions, then validation samples, then
//! stages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DatasetRecord;
use crate::model::{LanguageModel, SkipSet, SubLayerKind, SubLayerRef, TraceMode};
use crate::pipeline::{self, PipelineOptions, StagePlan};

/// Kahan-Babuska compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.compensation);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
        let mut acc = KahanSum::default();
        values.into_iter().for_each(|v| acc.add(v));
        acc.value()
    }
}

/// Mean residual cosine similarity per sub-layer, indexed by global ordinal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TableFile", into = "TableFile")]
pub struct ImportanceTable {
    scores: Vec<f64>,
    sample_count: usize,
    stage_count: usize,
}

impl ImportanceTable {
    pub fn from_scores(scores: Vec<f64>, sample_count: usize, stage_count: usize) -> Result<Self> {
        if scores.is_empty() || !scores.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "importance table needs an even, non-zero number of scores, got {}",
                scores.len()
            )));
        }
        if sample_count == 0 || stage_count == 0 {
            return Err(Error::InvalidArgument(
                "importance table needs at least one sample and one stage".into(),
            ));
        }
        if let Some((g, s)) = scores.iter().enumerate().find(|(_, s)| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {s} of sub-layer {g} is outside [-1, 1]")));
        }
        Ok(Self { scores, sample_count, stage_count })
    }

    pub fn n_sublayers(&self) -> usize {
        self.scores.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.scores.len() / 2
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn stage_count(&self) -> usize {
        self.stage_count
    }

    pub fn score(&self, layer: SubLayerRef) -> f64 {
        self.scores[layer.ordinal()]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Sub-layers from most to least redundant; equal scores keep ordinal order.
    pub fn ranking(&self) -> Vec<SubLayerRef> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order.into_iter().map(SubLayerRef::from_ordinal).collect()
    }

    /// The `budget` most redundant sub-layers. Sets are nested in `budget`.
    pub fn skip_set_for_budget(&self, budget: usize) -> Result<SkipSet> {
        if budget > self.scores.len() {
            return Err(Error::BudgetOutOfRange { budget, max: self.scores.len() });
        }
        Ok(self.ranking().into_iter().take(budget).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    sample_count: usize,
    stage_count: usize,
    entries: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    ordinal: usize,
    block: usize,
    kind: SubLayerKind,
    score: f64,
}

impl From<ImportanceTable> for TableFile {
    fn from(t: ImportanceTable) -> Self {
        let entries = t
            .scores
            .iter()
            .enumerate()
            .map(|(g, &score)| {
                let l = SubLayerRef::from_ordinal(g);
                TableEntry { ordinal: g, block: l.block, kind: l.kind, score }
            })
            .collect();
        Self { sample_count: t.sample_count, stage_count: t.stage_count, entries }
    }
}

impl TryFrom<TableFile> for ImportanceTable {
    type Error = Error;

    fn try_from(f: TableFile) -> Result<Self> {
        let mut scores = vec![f64::NAN; f.entries.len()];
        for e in &f.entries {
            let l = SubLayerRef::from_ordinal(e.ordinal);
            if e.ordinal >= scores.len() || l.block != e.block || l.kind != e.kind {
                return Err(Error::InvalidArgument(format!(
                    "importance entry {} ({} {}) is inconsistent",
                    e.ordinal, e.block, e.kind
                )));
            }
            if !scores[e.ordinal].is_nan() {
                return Err(Error::InvalidArgument(format!("importance entry {} appears twice", e.ordinal)));
            }
            scores[e.ordinal] = e.score;
        }
        ImportanceTable::from_scores(scores, f.sample_count, f.stage_count)
    }
}

/// The importance tables that turn budgets into skip sets: one table shared
/// by every stage, or one table per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ranking {
    Shared(ImportanceTable),
    PerStage(Vec<ImportanceTable>),
}

impl Ranking {
    pub fn tables(&self) -> &[ImportanceTable] {
        match self {
            Ranking::Shared(t) => std::slice::from_ref(t),
            Ranking::PerStage(ts) => ts,
        }
    }

    pub fn n_sublayers(&self) -> usize {
        self.tables().first().map_or(0, ImportanceTable::n_sublayers)
    }

    /// Checks the tables against a model depth and a stage count.
    pub fn validate(&self, n_stages: usize, n_blocks: usize) -> Result<()> {
        if let Ranking::PerStage(ts) = self {
            if ts.len() != n_stages {
                return Err(Error::InvalidArgument(format!(
                    "{} importance tables for {n_stages} stages",
                    ts.len()
                )));
            }
        }
        match self.tables().iter().find(|t| t.n_blocks() != n_blocks) {
            Some(t) => Err(Error::InvalidArgument(format!(
                "importance table covers {} blocks, model has {n_blocks}",
                t.n_blocks()
            ))),
            None => Ok(()),
        }
    }
}

impl From<ImportanceTable> for Ranking {
    fn from(table: ImportanceTable) -> Self {
        Ranking::Shared(table)
    }
}

/// Per-sample, per-stage position-mean cosines, `[stage][ordinal]`.
fn sample_cosines<M: LanguageModel>(
    model: &M,
    record: &DatasetRecord,
    plan: &StagePlan,
    options: &PipelineOptions,
) -> Result<Vec<Vec<f64>>> {
    // Later stages read what the full model generated earlier.
    let full = pipeline::SkipConfig::empty(plan.len());
    let traced = pipeline::run_pipeline_traced(model, plan, record, &full, options, TraceMode::Cosine)?;
    Ok(traced.traces.iter().map(|t| t.position_means()).collect())
}

/// Accumulates per-stage sums over samples in dataset order.
fn accumulate<M: LanguageModel>(
    model: &M,
    validation: &[DatasetRecord],
    plan: &StagePlan,
    options: &PipelineOptions,
) -> Result<Vec<Vec<KahanSum>>> {
    if validation.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_sub = model.dims().n_sublayers();
    let per_sample: Vec<Vec<Vec<f64>>> =
        validation.par_iter().map(|r| sample_cosines(model, r, plan, options)).collect::<Result<_>>()?;
    let mut sums = vec![vec![KahanSum::default(); n_sub]; plan.len()];
    for sample in &per_sample {
        for (stage, means) in sample.iter().enumerate() {
            for (acc, &m) in sums[stage].iter_mut().zip(means) {
                acc.add(m);
            }
        }
    }
    Ok(sums)
}

/// One table shared by all stages.
///
/// Each stage prompt is prefilled at full depth; later stages see the outputs
/// the full model generated for earlier ones. Early exit is not applied.
pub fn estimate_importance<M: LanguageModel>(
    model: &M,
    validation: &[DatasetRecord],
    plan: &StagePlan,
    options: &PipelineOptions,
) -> Result<ImportanceTable> {
    let options = PipelineOptions { early_exit: None, ..options.clone() };
    let sums = accumulate(model, validation, plan, &options)?;
    let n = validation.len() as f64;
    let stages = sums.len() as f64;
    let scores = (0..model.dims().n_sublayers())
        .map(|g| KahanSum::sum(sums.iter().map(|s| s[g].value() / n)) / stages)
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    ImportanceTable::from_scores(scores, validation.len(), plan.len())
}

/// One table per stage, for ablations that rank sub-layers stage by stage.
pub fn estimate_importance_per_stage<M: LanguageModel>(
    model: &M,
    validation: &[DatasetRecord],
    plan: &StagePlan,
    options: &PipelineOptions,
) -> Result<Vec<ImportanceTable>> {
    let options = PipelineOptions { early_exit: None, ..options.clone() };
    let sums = accumulate(model, validation, plan, &options)?;
    let n = validation.len() as f64;
    sums.into_iter()
        .map(|stage| {
            let scores = stage.iter().map(|s| (s.value() / n).clamp(-1.0, 1.0)).collect();
            ImportanceTable::from_scores(scores, validation.len(), 1)
        })
        .collect()
}
