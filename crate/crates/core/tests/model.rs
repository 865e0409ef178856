mod common;

use common::{dense_logits, hand_model, max_rel_err, ordinals};
use litestage::model::{LanguageModel, ModelConfig, SkipSet, SubLayerRef, TraceMode, Transformer};
use litestage::pipeline::argmax;
use litestage::tokenizer;

#[test]
fn one_block_two_tokens_match_dense_reference() {
    let model = hand_model(1, 8, 2, 12);
    let tokens = [tokenizer::BOS, b'h' as u32];
    let p = model.prefill(&tokens, TraceMode::Off).unwrap();
    let oracle = dense_logits(&model, &tokens, usize::MAX, &[]);
    assert!(max_rel_err(&p.logits, &oracle[1]) < 1e-6);
}

#[test]
fn every_position_matches_dense_reference() {
    let model = Transformer::synthesize(ModelConfig::toy(3, 11)).unwrap();
    let tokens = tokenizer::encode("positions");
    let all = model.forward(&tokens).unwrap();
    let oracle = dense_logits(&model, &tokens, usize::MAX, &[]);
    for (a, b) in all.iter().zip(&oracle) {
        assert!(max_rel_err(a, b) < 1e-9);
    }
}

fn decode_logits(model: &Transformer, prompt: &[u32], steps: &[u32], skip: &SkipSet) -> Vec<Vec<f64>> {
    let p = model.prefill(prompt, TraceMode::Off).unwrap();
    let mut cache = p.state;
    let mut out = vec![p.logits];
    for &t in steps {
        out.push(model.decode_step(&mut cache, t, skip).unwrap());
    }
    out
}

#[test]
fn skipping_last_ffn_equals_zeroed_branch() {
    let model = hand_model(2, 8, 2, 16);
    let prompt = tokenizer::encode("ab");
    let steps = [b'c' as u32, b'd' as u32, b'e' as u32];
    let skip: SkipSet = [SubLayerRef::ffn(1)].into_iter().collect();
    let got = decode_logits(&model, &prompt, &steps, &skip);

    // Block 1's FFN feeds nothing but the head, so zeroing its output
    // projection everywhere matches skipping it at decode positions.
    let mut weights = model.weights().clone();
    weights.blocks[1].w_down.iter_mut().for_each(|w| *w = 0.0);
    let ablated = Transformer::from_weights(model.config().clone(), weights).unwrap();
    let mut seq = prompt.clone();
    seq.extend_from_slice(&steps);
    let reference = ablated.forward(&seq).unwrap();
    let dense = dense_logits(&model, &seq, prompt.len(), &ordinals(&skip));
    for (i, logits) in got.iter().enumerate().skip(1) {
        let pos = prompt.len() - 1 + i;
        assert!(max_rel_err(logits, &reference[pos]) < 1e-9, "step {i}");
        assert!(max_rel_err(logits, &dense[pos]) < 1e-9, "step {i}");
    }
}

#[test]
fn skipped_attention_matches_dense_reference() {
    let model = Transformer::synthesize(ModelConfig::toy(3, 4)).unwrap();
    let prompt = tokenizer::encode("skip me");
    let steps: Vec<u32> = b"later".iter().map(|&b| b as u32).collect();
    let skip: SkipSet =
        [SubLayerRef::mhsa(0), SubLayerRef::ffn(1), SubLayerRef::mhsa(2)].into_iter().collect();
    let got = decode_logits(&model, &prompt, &steps, &skip);
    let mut seq = prompt.clone();
    seq.extend_from_slice(&steps);
    let dense = dense_logits(&model, &seq, prompt.len(), &ordinals(&skip));
    for (i, logits) in got.iter().enumerate().skip(1) {
        assert!(max_rel_err(logits, &dense[prompt.len() - 1 + i]) < 1e-9);
    }
}

#[test]
fn different_seeds_differ() {
    let tokens = tokenizer::encode("seed");
    let a = Transformer::synthesize(ModelConfig::toy(2, 7)).unwrap().forward(&tokens).unwrap();
    let b = Transformer::synthesize(ModelConfig::toy(2, 8)).unwrap().forward(&tokens).unwrap();
    assert_ne!(a, b);
}

#[test]
fn executed_work_and_frozen_cache() {
    let model = Transformer::synthesize(ModelConfig::toy(4, 3)).unwrap();
    let prompt = tokenizer::encode("frozen");
    let skip: SkipSet =
        [SubLayerRef::mhsa(2), SubLayerRef::ffn(0), SubLayerRef::ffn(3)].into_iter().collect();
    let p = model.prefill(&prompt, TraceMode::Off).unwrap();
    let mut cache = p.state;
    let before = cache.executed_sublayers;
    let mut t = argmax(&p.logits);
    for step in 1..=6u64 {
        t = argmax(&model.decode_step(&mut cache, t, &skip).unwrap());
        assert_eq!(cache.executed_sublayers - before, step * (8 - 3));
    }
    assert_eq!(cache.cached_len(2), prompt.len());
    for b in [0, 1, 3] {
        assert_eq!(cache.cached_len(b), prompt.len() + 6);
    }
}

#[test]
fn tied_head_uses_embedding() {
    let mut config = ModelConfig::toy(1, 2);
    config.tied_head = true;
    let model = Transformer::synthesize(config).unwrap();
    assert!(model.weights().head.is_none());
    let tokens = tokenizer::encode("tied");
    let oracle = dense_logits(&model, &tokens, usize::MAX, &[]);
    let got = model.prefill(&tokens, TraceMode::Off).unwrap().logits;
    assert!(max_rel_err(&got, oracle.last().unwrap()) < 1e-9);
}
