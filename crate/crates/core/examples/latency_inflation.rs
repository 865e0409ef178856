// Skipping more can be slower: if a stage starts rambling, the extra decode
// steps and the longer prompts they create downstream outweigh the cheaper
// steps. The search profiles latency directly, so it never picks those budgets.

use litestage::latency::LatencyModel;
use litestage::scripted::{ScriptedStage, ScriptedStages};
use litestage::search::{greedy_search, BudgetEvaluator, SearchSettings};

pub fn run() -> litestage::Result<()> {
    let n_blocks = 6;
    let n_sub = 2 * n_blocks;
    // Stage 2 decodes 60 tokens up to budget 4, then doubles in length.
    let stage = |len: &dyn Fn(usize) -> usize| ScriptedStage {
        prompt_len: 40,
        decode_len: (0..=n_sub).map(len).collect(),
        lost: vec![0; n_sub + 1],
    };
    let stages = ScriptedStages {
        n_blocks,
        samples: 50,
        baseline_correct: 40,
        latency_model: LatencyModel::default(),
        stages: vec![stage(&|_| 30), stage(&|k| if k <= 4 { 60 } else { 60 + 12 * (k - 4) }), stage(&|_| 20)],
    };
    for k in (0..=n_sub).step_by(2) {
        let m = stages.evaluate(&[0, k, 0])?;
        println!(
            "stage 2 budget {k:>2}: decode {:>3} tok, latency {:.0}",
            m.mean_decode_tokens[1], m.mean_latency
        );
    }
    // Accuracy never drops here, so only latency can stop the search.
    let settings = SearchSettings { epsilon: 100.0, max_budget: Some(n_sub), ..Default::default() };
    let result = greedy_search(&stages, &settings)?;
    println!("chosen budgets {:?}", result.budgets);
    assert_eq!(result.budgets[1], 4);
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
