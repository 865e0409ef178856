//! Accuracy and latency evaluation over a labelled dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DatasetRecord;
use crate::latency::{LatencySource, StageCost};
use crate::model::LanguageModel;
use crate::pipeline::{self, PipelineOptions, SkipConfig, StagePlan};

/// Finds the chosen option label in a final-stage answer.
///
/// The last `answer is (X)` wins (case-insensitive); otherwise the last
/// standalone `(X)`. Only labels in `labels` are accepted.
pub fn extract_answer(text: &str, labels: &[char]) -> Option<char> {
    let lower = text.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let label_at = |i: usize| -> Option<char> {
        if i + 2 < bytes.len() && bytes[i] == b'(' && bytes[i + 2] == b')' {
            let c = (bytes[i + 1] as char).to_ascii_uppercase();
            labels.contains(&c).then_some(c)
        } else {
            None
        }
    };

    const KEY: &str = "answer is ";
    let primary = lower.match_indices(KEY).filter_map(|(i, _)| label_at(i + KEY.len())).last();
    primary.or_else(|| (0..bytes.len()).rev().find_map(label_at))
}

/// Majority vote ignoring `None`; ties go to the label that appeared first.
pub fn self_consistency_vote(answers: &[Option<char>]) -> Option<char> {
    let mut counts: Vec<(char, usize, usize)> = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        let Some(a) = a else { continue };
        match counts.iter_mut().find(|(c, _, _)| c == a) {
            Some(entry) => entry.1 += 1,
            None => counts.push((*a, 1, i)),
        }
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).map(|(c, _, _)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub pipeline: PipelineOptions,
    /// Sampled runs per question; 1 disables voting.
    pub self_consistency: usize,
    pub latency_source: LatencySource,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            pipeline: PipelineOptions::default(),
            self_consistency: 1,
            latency_source: LatencySource::Model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub gold: char,
    pub predicted: Option<char>,
    pub correct: bool,
    pub modeled_latency: f64,
    pub wallclock_secs: f64,
    /// Per stage, averaged over self-consistency runs.
    pub decode_tokens: Vec<f64>,
    pub stage_decode_modeled: Vec<f64>,
    pub stage_decode_wallclock: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub label: String,
    pub budgets: Vec<usize>,
    pub early_exit: bool,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub latency_source: LatencySource,
    pub latency_unit: String,
    /// Mean end-to-end latency in `latency_source` units.
    pub mean_latency: f64,
    pub mean_modeled_latency: f64,
    pub mean_wallclock_secs: f64,
    /// Full-depth latency divided by `mean_latency`; absent without a reference run.
    pub speedup: Option<f64>,
    pub mean_decode_tokens: Vec<f64>,
    /// Mean decode latency per stage in `latency_source` units.
    pub mean_stage_decode_latency: Vec<f64>,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn mean_total_decode_tokens(&self) -> f64 {
        self.mean_decode_tokens.iter().sum()
    }

    pub fn total_decode_tokens(&self) -> f64 {
        self.samples.iter().map(|s| s.decode_tokens.iter().sum::<f64>()).sum()
    }

    /// Sets `speedup` from a full-depth reference measured with the same source.
    pub fn attach_reference(&mut self, reference: &EvalReport) -> Result<()> {
        if reference.latency_source != self.latency_source {
            return Err(Error::InvalidArgument(format!(
                "reference latency source {:?} differs from {:?}",
                reference.latency_source, self.latency_source
            )));
        }
        self.speedup = Some(reference.mean_latency / self.mean_latency);
        Ok(())
    }

    pub const CSV_HEADER: &'static str =
        "label,budgets,mean_budget,early_exit,accuracy,correct,total,mean_latency,latency_unit,speedup,mean_decode_tokens";

    pub fn csv_row(&self) -> String {
        let budgets = self.budgets.iter().map(usize::to_string).collect::<Vec<_>>().join("/");
        let mean_budget = if self.budgets.is_empty() {
            0.0
        } else {
            self.budgets.iter().sum::<usize>() as f64 / self.budgets.len() as f64
        };
        format!(
            "{},{},{:.1},{},{:.4},{},{},{:.4},{},{},{:.2}",
            self.label,
            budgets,
            mean_budget,
            self.early_exit,
            self.accuracy,
            self.correct,
            self.total,
            self.mean_latency,
            self.latency_unit,
            self.speedup.map(|s| format!("{s:.2}")).unwrap_or_default(),
            self.mean_total_decode_tokens(),
        )
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn column_means(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    (0..width).map(|j| mean(rows.iter().map(|r| r[j]))).collect()
}

fn evaluate_sample<M: LanguageModel>(
    model: &M,
    record: &DatasetRecord,
    plan: &StagePlan,
    skip_config: &SkipConfig,
    settings: &EvalSettings,
) -> Result<SampleRecord> {
    let runs = settings.self_consistency.max(1);
    let labels: Vec<char> = record.options.iter().map(|o| o.label).collect();
    let n_blocks = model.dims().n_blocks;
    let lm = &settings.pipeline.latency_model;
    let mut answers = Vec::with_capacity(runs);
    let (mut modeled, mut wall) = (Vec::new(), Vec::new());
    let (mut tokens, mut dec_model, mut dec_wall) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..runs {
        let mut options = settings.pipeline.clone();
        if runs > 1 {
            options.sampling = options.sampling.iteration(i);
        }
        let t = pipeline::run_pipeline(model, plan, record, skip_config, &options)?;
        answers.push(extract_answer(t.final_text(), &labels));
        modeled.push(t.modeled_latency);
        wall.push(t.wallclock_secs);
        tokens.push(t.stages.iter().map(|s| s.decode_len as f64).collect::<Vec<_>>());
        dec_model.push(
            t.stages
                .iter()
                .map(|s| {
                    let c = StageCost::from(s);
                    lm.decode_cost(n_blocks, c.skipped, c.decode_len)
                })
                .collect::<Vec<_>>(),
        );
        dec_wall.push(t.stages.iter().map(|s| s.decode_wallclock_secs).collect::<Vec<_>>());
    }
    let predicted = self_consistency_vote(&answers);
    Ok(SampleRecord {
        id: record.id.clone(),
        gold: record.gold,
        predicted,
        correct: predicted == Some(record.gold),
        modeled_latency: mean(modeled),
        wallclock_secs: mean(wall),
        decode_tokens: column_means(&tokens, plan.len()),
        stage_decode_modeled: column_means(&dec_model, plan.len()),
        stage_decode_wallclock: column_means(&dec_wall, plan.len()),
    })
}

/// Runs the pipeline on every record and aggregates accuracy and latency.
///
/// `speedup` is set only when `reference` is given.
pub fn evaluate<M: LanguageModel>(
    model: &M,
    dataset: &[DatasetRecord],
    plan: &StagePlan,
    skip_config: &SkipConfig,
    settings: &EvalSettings,
    reference: Option<&EvalReport>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    settings.pipeline.latency_model.validate()?;
    let samples: Vec<SampleRecord> = dataset
        .par_iter()
        .map(|r| evaluate_sample(model, r, plan, skip_config, settings))
        .collect::<Result<_>>()?;
    let mut report = aggregate(samples, plan.len(), settings.latency_source);
    report.budgets = skip_config.budgets();
    report.early_exit = settings.pipeline.early_exit.is_some();
    if let Some(r) = reference {
        report.attach_reference(r)?;
    }
    Ok(report)
}

/// Builds a report from per-sample records; accuracy and means do not depend on order.
pub fn aggregate(samples: Vec<SampleRecord>, stages: usize, source: LatencySource) -> EvalReport {
    let correct = samples.iter().filter(|s| s.correct).count();
    let total = samples.len();
    let mean_modeled_latency = mean(samples.iter().map(|s| s.modeled_latency));
    let mean_wallclock_secs = mean(samples.iter().map(|s| s.wallclock_secs));
    let mean_latency = match source {
        LatencySource::Model => mean_modeled_latency,
        LatencySource::Wallclock => mean_wallclock_secs,
    };
    let stage_rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| match source {
            LatencySource::Model => s.stage_decode_modeled.clone(),
            LatencySource::Wallclock => s.stage_decode_wallclock.clone(),
        })
        .collect();
    let token_rows: Vec<Vec<f64>> = samples.iter().map(|s| s.decode_tokens.clone()).collect();
    EvalReport {
        label: String::new(),
        budgets: vec![0; stages],
        early_exit: false,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        latency_source: source,
        latency_unit: source.unit().to_string(),
        mean_latency,
        mean_modeled_latency,
        mean_wallclock_secs,
        speedup: None,
        mean_decode_tokens: column_means(&token_rows, stages),
        mean_stage_decode_latency: column_means(&stage_rows, stages),
        samples,
    }
}

/// [`evaluate`] plus a full-depth, early-exit-off reference run for `speedup`.
///
/// When the configuration already is the reference, the run normalises
/// against itself and reports exactly 1.0.
pub fn evaluate_with_reference<M: LanguageModel>(
    model: &M,
    dataset: &[DatasetRecord],
    plan: &StagePlan,
    skip_config: &SkipConfig,
    settings: &EvalSettings,
) -> Result<(EvalReport, EvalReport)> {
    let is_reference = skip_config.is_full_depth() && settings.pipeline.early_exit.is_none();
    if is_reference {
        let mut report = evaluate(model, dataset, plan, skip_config, settings, None)?;
        let reference = report.clone();
        report.attach_reference(&reference)?;
        return Ok((report, reference));
    }
    let ref_settings = EvalSettings { pipeline: settings.pipeline.without_early_exit(), ..settings.clone() };
    let reference = evaluate(model, dataset, plan, &SkipConfig::empty(plan.len()), &ref_settings, None)?;
    let report = evaluate(model, dataset, plan, skip_config, settings, Some(&reference))?;
    Ok((report, reference))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ABCD: [char; 4] = ['A', 'B', 'C', 'D'];

    #[test]
    fn primary_pattern() {
        assert_eq!(extract_answer("So the answer is (B).", &ABCD), Some('B'));
    }

    #[test]
    fn primary_pattern_beats_earlier_labels() {
        assert_eq!(extract_answer("(A) is wrong... the answer is (C)", &ABCD), Some('C'));
    }

    #[test]
    fn case_insensitive_and_fallback() {
        assert_eq!(extract_answer("THE ANSWER IS (d)", &ABCD), Some('D'));
        assert_eq!(extract_answer("maybe (A) or rather (B) then", &ABCD), Some('B'));
        assert_eq!(extract_answer("no label here", &ABCD), None);
        assert_eq!(extract_answer("the answer is (E)", &ABCD), None);
        assert_eq!(extract_answer("(", &ABCD), None);
    }

    #[test]
    fn voting() {
        let v = |xs: &[Option<char>]| self_consistency_vote(xs);
        assert_eq!(v(&[Some('A'), Some('A'), Some('A'), Some('B')]), Some('A'));
        assert_eq!(v(&[Some('A'), Some('B'), Some('A'), Some('B')]), Some('A'));
        assert_eq!(v(&[Some('B'), Some('A'), Some('A'), Some('B')]), Some('B'));
        assert_eq!(v(&[None, Some('C'), None]), Some('C'));
        assert_eq!(v(&[None, None]), None);
    }

    fn sample(id: &str, correct: bool, latency: f64, tokens: f64) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            gold: 'A',
            predicted: Some(if correct { 'A' } else { 'B' }),
            correct,
            modeled_latency: latency,
            wallclock_secs: 0.0,
            decode_tokens: vec![tokens],
            stage_decode_modeled: vec![latency / 2.0],
            stage_decode_wallclock: vec![0.0],
        }
    }

    #[test]
    fn aggregate_is_order_independent() {
        let a =
            vec![sample("1", true, 10.0, 3.0), sample("2", false, 20.0, 5.0), sample("3", true, 30.0, 4.0)];
        let mut b = a.clone();
        b.reverse();
        let (ra, rb) = (aggregate(a, 1, LatencySource::Model), aggregate(b, 1, LatencySource::Model));
        assert_eq!(ra.accuracy, rb.accuracy);
        assert_eq!(ra.mean_latency, rb.mean_latency);
        assert_eq!(ra.correct, 2);
        assert_eq!(ra.mean_latency, 20.0);
        assert_eq!(ra.mean_decode_tokens, vec![4.0]);
    }
}
