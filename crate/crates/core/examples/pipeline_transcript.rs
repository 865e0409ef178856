// One question through Recall, Analysis and Summary, printing each stage.

use litestage::desk::{self, DeskModel};
use litestage::eval::extract_answer;
use litestage::importance::estimate_importance;
use litestage::pipeline::{run_pipeline, PipelineOptions, SkipConfig, StagePlan};

pub fn run() -> litestage::Result<()> {
    let model = DeskModel::new(Default::default())?;
    let plan = StagePlan::recall_analysis_summary();
    let record = &desk::test_set()[0];
    let options = PipelineOptions::default();
    let table = estimate_importance(&model, &desk::validation_set(), &plan, &options)?;

    for budgets in [[0, 0, 0], [10, 16, 6]] {
        let skip = SkipConfig::from_budgets(&table, &budgets)?;
        let t = run_pipeline(&model, &plan, record, &skip, &options)?;
        println!("== budgets {budgets:?}, modeled latency {:.0}", t.modeled_latency);
        for s in &t.stages {
            println!(
                "[{}] prompt {} tok, decoded {} tok ({:?})\n  {}",
                s.name, s.prefill_len, s.decode_len, s.exit_reason, s.text
            );
        }
        let labels: Vec<char> = record.options.iter().map(|o| o.label).collect();
        println!("answer {:?}, gold {}", extract_answer(t.final_text(), &labels), record.gold);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
