// Rank sub-layers by how little they change the residual stream.
//
// Runs the validation questions through every stage at full depth, records
// `cos(x + f(x), x)` for each sub-layer during prefill, and averages. The top
// of the ranking is what a budget of `k` skips first.

use litestage::desk::{self, DeskModel};
use litestage::importance::{estimate_importance, ImportanceTable};
use litestage::model::{ModelConfig, Transformer};
use litestage::pipeline::{PipelineOptions, StagePlan};

fn show(name: &str, table: &ImportanceTable, top: usize) {
    println!(
        "{name}: {} sub-layers, {} samples x {} stages",
        table.n_sublayers(),
        table.sample_count(),
        table.stage_count()
    );
    for (rank, layer) in table.ranking().iter().take(top).enumerate() {
        println!("  #{:<2} {layer:<12} {:.6}", rank + 1, table.score(*layer));
    }
}

pub fn run() -> litestage::Result<()> {
    let plan = StagePlan::recall_analysis_summary();
    let options = PipelineOptions::default();
    let validation = desk::validation_set();

    let desk_model = DeskModel::new(Default::default())?;
    let table = estimate_importance(&desk_model, &validation, &plan, &options)?;
    show("desk model", &table, 6);
    println!("  budget 4 skips {}", table.skip_set_for_budget(4)?);

    // The same estimator on a real (random-weight) transformer, fewer samples.
    let toy = Transformer::synthesize(ModelConfig::toy(3, 1))?;
    let short = StagePlan::new(
        plan.stages
            .iter()
            .cloned()
            .map(|mut s| {
                s.max_new_tokens = 4;
                s
            })
            .collect(),
    )?;
    let table = estimate_importance(&toy, &validation[..3], &short, &options)?;
    show("toy transformer", &table, 6);

    let json = serde_json::to_string(&table)?;
    let back: ImportanceTable = serde_json::from_str(&json)?;
    assert_eq!(back, table);
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
