// Accuracy and speedup reports, written as JSON, CSV and an SVG scatter.

use litestage::cli::{report_csv, scatter_svg};
use litestage::desk::{self, DeskModel};
use litestage::eval::{evaluate, evaluate_with_reference, EvalSettings};
use litestage::importance::estimate_importance;
use litestage::io;
use litestage::pipeline::{SkipConfig, StagePlan};

pub fn run() -> litestage::Result<()> {
    let model = DeskModel::new(Default::default())?;
    let plan = StagePlan::recall_analysis_summary();
    let test = &desk::test_set()[..60];
    let on = EvalSettings::default();
    let off = EvalSettings { pipeline: on.pipeline.without_early_exit(), ..on.clone() };
    let table = estimate_importance(&model, &desk::validation_set(), &plan, &on.pipeline)?;

    // The full-depth, early-exit-off run is its own reference: exactly 1.00x.
    let (mut full, reference) = evaluate_with_reference(&model, test, &plan, &SkipConfig::empty(3), &off)?;
    full.label = "full".into();
    assert_eq!(full.speedup, Some(1.0));

    let mut reports = vec![full];
    for (label, budgets) in [("light", [8, 8, 4]), ("searched", [18, 18, 14]), ("heavy", [28, 28, 28])] {
        let skip = SkipConfig::from_budgets(&table, &budgets)?;
        let mut r = evaluate(&model, test, &plan, &skip, &on, Some(&reference))?;
        r.label = label.into();
        reports.push(r);
    }
    print!("{}", report_csv(&reports));

    let dir = tempfile::tempdir()?;
    for r in &reports {
        io::save_json(dir.path().join(format!("{}.json", r.label)), r)?;
    }
    let svg = scatter_svg(&reports);
    io::write_atomic(dir.path().join("scatter.svg"), svg.as_bytes())?;
    println!("wrote {} reports and scatter.svg ({} bytes)", reports.len(), svg.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
