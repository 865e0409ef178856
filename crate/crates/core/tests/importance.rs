mod common;

use litestage::desk;
use litestage::importance::{estimate_importance, estimate_importance_per_stage, ImportanceTable};
use litestage::model::{LanguageModel, ModelConfig, SubLayerRef, TraceMode, Transformer};
use litestage::pipeline::{run_pipeline, PipelineOptions, SkipConfig, StagePlan};
use litestage::{io::DatasetRecord, tokenizer};

fn short_plan() -> StagePlan {
    let mut plan = StagePlan::recall_analysis_summary();
    for (s, n) in plan.stages.iter_mut().zip([6, 10, 4]) {
        s.max_new_tokens = n;
    }
    plan
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Re-derives every score from raw residual pairs: mean over positions, then
/// samples, then stages, with plain summation.
fn trace_replay(model: &Transformer, data: &[DatasetRecord], plan: &StagePlan) -> Vec<f64> {
    let n_sub = model.config().n_sublayers();
    let options = PipelineOptions::default().without_early_exit();
    let mut per_stage = vec![vec![0.0; n_sub]; plan.len()];
    for record in data {
        let t = run_pipeline(model, plan, record, &SkipConfig::empty(plan.len()), &options).unwrap();
        for (stage, st) in t.stages.iter().enumerate() {
            let trace =
                model.prefill(&tokenizer::encode(&st.prompt), TraceMode::Full).unwrap().trace.unwrap();
            for (acc, pairs) in per_stage[stage].iter_mut().zip(&trace.pairs) {
                let mean = pairs.iter().map(|p| cos(&p.output, &p.input)).sum::<f64>() / pairs.len() as f64;
                *acc += mean / data.len() as f64;
            }
        }
    }
    (0..n_sub).map(|g| per_stage.iter().map(|s| s[g]).sum::<f64>() / plan.len() as f64).collect()
}

#[test]
fn one_block_three_samples_match_trace_replay() {
    let model = Transformer::synthesize(ModelConfig::toy(1, 5)).unwrap();
    let data = &desk::validation_set()[..3];
    let plan = short_plan();
    let table = estimate_importance(&model, data, &plan, &PipelineOptions::default()).unwrap();
    let oracle = trace_replay(&model, data, &plan);
    for (g, (a, b)) in table.scores().iter().zip(&oracle).enumerate() {
        assert!((a - b).abs() < 1e-6, "sub-layer {g}: {a} vs {b}");
    }
    assert_eq!((table.sample_count(), table.stage_count()), (3, 3));
}

#[test]
fn zero_branch_scores_exactly_one_and_ranks_first() {
    let base = Transformer::synthesize(ModelConfig::toy(2, 9)).unwrap();
    let mut weights = base.weights().clone();
    weights.blocks[1].wo.iter_mut().for_each(|w| *w = 0.0);
    let model = Transformer::from_weights(base.config().clone(), weights).unwrap();
    let table = estimate_importance(&model, &desk::validation_set()[..2], &short_plan(), &Default::default())
        .unwrap();
    assert_eq!(table.score(SubLayerRef::mhsa(1)), 1.0);
    assert_eq!(table.ranking()[0], SubLayerRef::mhsa(1));
}

#[test]
fn per_stage_tables_average_to_shared_table() {
    let model = Transformer::synthesize(ModelConfig::toy(2, 1)).unwrap();
    let data = &desk::validation_set()[..2];
    let plan = short_plan();
    let shared = estimate_importance(&model, data, &plan, &Default::default()).unwrap();
    let per = estimate_importance_per_stage(&model, data, &plan, &Default::default()).unwrap();
    for g in 0..4 {
        let mean = per.iter().map(|t| t.scores()[g]).sum::<f64>() / 3.0;
        assert!((mean - shared.scores()[g]).abs() < 1e-12);
    }
}

#[test]
fn budget_examples() {
    let t = ImportanceTable::from_scores(vec![0.99, 0.95, 0.90, 0.5], 1, 1).unwrap();
    assert!(t.skip_set_for_budget(0).unwrap().is_empty());
    let two: Vec<usize> = t.skip_set_for_budget(2).unwrap().iter().map(SubLayerRef::ordinal).collect();
    assert_eq!(two, [0, 1]);
    let tie = ImportanceTable::from_scores(vec![0.5, 0.9, 0.9, 0.1], 1, 1).unwrap();
    let one: Vec<usize> = tie.skip_set_for_budget(1).unwrap().iter().map(SubLayerRef::ordinal).collect();
    assert_eq!(one, [1]);
    assert!(t.skip_set_for_budget(5).is_err());
}

#[test]
fn empty_dataset_is_rejected() {
    let model = Transformer::synthesize(ModelConfig::toy(1, 0)).unwrap();
    assert!(estimate_importance(&model, &[], &short_plan(), &Default::default()).is_err());
}
