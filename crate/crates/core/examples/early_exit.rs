// Confidence-based early exit.
//
// The cache keeps the last five token confidences; once it is full and their
// mean drops below 0.5 the current token is replaced by EOS and the stage ends.

use litestage::desk::{self, DeskModel};
use litestage::early_exit::{ConfidenceCache, EarlyExitConfig, ExitDecision};
use litestage::eval::{evaluate, EvalSettings};
use litestage::importance::estimate_importance;
use litestage::pipeline::{PipelineOptions, SkipConfig, StagePlan};

pub fn run() -> litestage::Result<()> {
    let mut cache = ConfidenceCache::from_config(&EarlyExitConfig::default());
    for (t, c) in [0.9, 0.6, 0.4, 0.3, 0.2, 0.1].into_iter().enumerate() {
        let d = cache.observe(c);
        println!("step {} conf {c:.1} mean {:.2} -> {d:?}", t + 1, cache.mean().unwrap_or(0.0));
        if d == ExitDecision::Exit {
            break;
        }
    }

    // With heavy skipping the desk model rambles at low confidence; exiting
    // trims that filler without touching the answer.
    let model = DeskModel::new(Default::default())?;
    let plan = StagePlan::recall_analysis_summary();
    let validation = desk::validation_set();
    let test = &desk::test_set()[..80];
    let table = estimate_importance(&model, &validation, &plan, &PipelineOptions::default())?;
    let skip = SkipConfig::from_budgets(&table, &[28, 28, 28])?;

    let on = EvalSettings::default();
    let off = EvalSettings { pipeline: on.pipeline.without_early_exit(), ..on.clone() };
    let with = evaluate(&model, test, &plan, &skip, &on, None)?;
    let without = evaluate(&model, test, &plan, &skip, &off, None)?;
    let (a, b) = (without.mean_total_decode_tokens(), with.mean_total_decode_tokens());
    println!("decode tokens per question: {a:.1} -> {b:.1} ({:+.1}%)", 100.0 * (b - a) / a);
    println!("accuracy: {:.3} -> {:.3}", without.accuracy, with.accuracy);
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
