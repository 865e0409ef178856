// Per-stage budget search on the desk benchmark.
//
// Stages are visited from slowest to fastest decode. Each one is profiled on
// the grid with earlier choices fixed, and the fastest budget whose accuracy
// stays within epsilon of the unskipped baseline is kept.

use litestage::desk::{self, DeskModel};
use litestage::eval::{evaluate_with_reference, EvalSettings};
use litestage::importance::estimate_importance;
use litestage::pipeline::StagePlan;
use litestage::search::{greedy_search, PipelineEvaluator, SearchSettings};

pub fn run() -> litestage::Result<()> {
    let model = DeskModel::new(Default::default())?;
    let plan = StagePlan::recall_analysis_summary();
    let validation = desk::validation_set();
    let eval = EvalSettings::default();
    let ranking = estimate_importance(&model, &validation, &plan, &eval.pipeline)?.into();

    let settings = SearchSettings { epsilon: 2.0, grid_step: 4, ..Default::default() };
    let evaluator = PipelineEvaluator::new(&model, &plan, &validation, &ranking, &eval, &settings);
    let result = greedy_search(&evaluator, &settings)?;

    println!("baseline {:.3}, target {:.3}", result.baseline_accuracy, result.target_accuracy);
    for it in &result.iterations {
        let row = it.profile.row(it.chosen).expect("chosen budget was profiled");
        println!(
            "stage {} ({}): budget {:>2}  acc {:.3}  latency {:.0}",
            it.stage + 1,
            plan.stages[it.stage].name,
            it.chosen,
            row.accuracy,
            row.mean_latency
        );
    }
    println!("budgets {:?}, mean skip {:.1}", result.budgets, result.mean_budget());

    let test = &desk::test_set()[..100];
    let (report, reference) = evaluate_with_reference(&model, test, &plan, &result.skip_config, &eval)?;
    println!(
        "held-out: accuracy {:.3} (full depth {:.3}), speedup {:.3}x",
        report.accuracy,
        reference.accuracy,
        report.speedup.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
