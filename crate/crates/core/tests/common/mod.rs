//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the engine's kernels: the dense reference walks the
//! network layer by layer over the whole sequence (the engine goes token by
//! token with a cache), and every primitive is written out again.

#![allow(dead_code)]

use litestage::model::{
    LanguageModel, ModelConfig, ModelDims, Prefill, SkipSet, SubLayerRef, TraceMode, Transformer, Weights,
};
use litestage::tokenizer::{EOS, VOCAB_SIZE};
use litestage::Result;

/// Deterministic, non-random weights: smooth patterns with mixed signs.
pub fn hand_weights(config: &ModelConfig) -> Weights {
    let tensors = Weights::layout(config)
        .into_iter()
        .enumerate()
        .map(|(t, (name, shape))| {
            let n: usize = shape.iter().product();
            (0..n)
                .map(|i| {
                    let v = ((i * 7 + t * 13) as f32 * 0.61).sin() * 0.35;
                    if name.ends_with("norm") {
                        1.0 + 0.5 * v
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Weights::from_tensors(config, tensors).expect("layout matches config")
}

pub fn hand_model(n_blocks: usize, d_model: usize, n_heads: usize, d_ff: usize) -> Transformer {
    let config = ModelConfig {
        n_blocks,
        d_model,
        n_heads,
        d_ff,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 64,
        rng_seed: 0,
        tied_head: false,
    };
    let weights = hand_weights(&config);
    Transformer::from_weights(config, weights).unwrap()
}

fn f64s(w: &[f32]) -> Vec<f64> {
    w.iter().map(|&v| f64::from(v)).collect()
}

/// `W x` for a row-major `(rows, cols)` matrix.
fn mul(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len()).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
}

fn rotate(v: &mut [f64], head_dim: usize, pos: usize) {
    for head in v.chunks_mut(head_dim) {
        for pair in 0..head_dim / 2 {
            let theta = pos as f64 / 10000f64.powf(2.0 * pair as f64 / head_dim as f64);
            let (re, im) = (head[2 * pair], head[2 * pair + 1]);
            head[2 * pair] = re * theta.cos() - im * theta.sin();
            head[2 * pair + 1] = re * theta.sin() + im * theta.cos();
        }
    }
}

/// Logits at every position of `tokens`. Positions `>= decode_from` bypass the
/// sub-layers whose ordinals are in `skip`; earlier positions run at full depth.
pub fn dense_logits(
    model: &Transformer,
    tokens: &[u32],
    decode_from: usize,
    skip: &[usize],
) -> Vec<Vec<f64>> {
    let c = model.config();
    let w = model.weights();
    let (d, hd) = (c.d_model, c.d_model / c.n_heads);
    let embed = f64s(&w.embed);
    let mut xs: Vec<Vec<f64>> =
        tokens.iter().map(|&t| embed[t as usize * d..(t as usize + 1) * d].to_vec()).collect();
    let skipped = |ordinal: usize, pos: usize| pos >= decode_from && skip.contains(&ordinal);

    for (b, bw) in w.blocks.iter().enumerate() {
        let (gain, wq, wk, wv, wo) =
            (f64s(&bw.attn_norm), f64s(&bw.wq), f64s(&bw.wk), f64s(&bw.wv), f64s(&bw.wo));
        // Keys/values exist only for positions where this attention ran.
        let mut keys: Vec<Option<(Vec<f64>, Vec<f64>)>> = Vec::new();
        let mut queries = Vec::new();
        for (p, x) in xs.iter().enumerate() {
            if skipped(2 * b, p) {
                keys.push(None);
                queries.push(None);
                continue;
            }
            let h = rmsnorm(x, &gain);
            let (mut q, mut k) = (mul(&wq, &h), mul(&wk, &h));
            rotate(&mut q, hd, p);
            rotate(&mut k, hd, p);
            keys.push(Some((k, mul(&wv, &h))));
            queries.push(Some(q));
        }
        for p in 0..xs.len() {
            let Some(q) = &queries[p] else { continue };
            let mut mixed = vec![0.0; d];
            for head in 0..c.n_heads {
                let r = head * hd..(head + 1) * hd;
                let visible: Vec<&(Vec<f64>, Vec<f64>)> = keys[..=p].iter().flatten().collect();
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|(k, _)| {
                        q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for (weight, (_, v)) in e.iter().zip(&visible) {
                    for (m, vv) in mixed[r.clone()].iter_mut().zip(&v[r.clone()]) {
                        *m += weight / z * vv;
                    }
                }
            }
            let out = mul(&wo, &mixed);
            xs[p].iter_mut().zip(out).for_each(|(a, o)| *a += o);
        }

        let (gain, wg, wu, wdn) = (f64s(&bw.ffn_norm), f64s(&bw.w_gate), f64s(&bw.w_up), f64s(&bw.w_down));
        for (p, x) in xs.iter_mut().enumerate() {
            if skipped(2 * b + 1, p) {
                continue;
            }
            let h = rmsnorm(x, &gain);
            let act: Vec<f64> =
                mul(&wg, &h).iter().zip(mul(&wu, &h)).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
            x.iter_mut().zip(mul(&wdn, &act)).for_each(|(a, o)| *a += o);
        }
    }
    let head = f64s(w.head.as_deref().unwrap_or(&w.embed));
    let gain = f64s(&w.final_norm);
    xs.iter().map(|x| mul(&head, &rmsnorm(x, &gain))).collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / scale).fold(0.0, f64::max)
}

pub fn ordinals(skip: &SkipSet) -> Vec<usize> {
    skip.iter().map(SubLayerRef::ordinal).collect()
}

/// A model that ignores its input and emits `b'x'` with a scripted probability
/// at each step. Later steps repeat the last confidence.
pub struct ConfidenceStub {
    pub confidences: Vec<f64>,
}

impl ConfidenceStub {
    pub const TOKEN: u32 = b'x' as u32;

    fn logits(&self, step: usize) -> Vec<f64> {
        let c = self.confidences[step.min(self.confidences.len() - 1)];
        let mut l = vec![0.0; VOCAB_SIZE];
        l[Self::TOKEN as usize] = (c * (VOCAB_SIZE - 1) as f64 / (1.0 - c)).ln();
        l
    }
}

impl LanguageModel for ConfidenceStub {
    type State = usize;

    fn dims(&self) -> ModelDims {
        ModelDims { n_blocks: 2, vocab_size: VOCAB_SIZE, max_seq_len: 4096, eos_token: EOS }
    }

    fn prefill(&self, _tokens: &[u32], _trace: TraceMode) -> Result<Prefill<usize>> {
        Ok(Prefill { state: 0, logits: self.logits(0), trace: None })
    }

    fn decode_step(&self, state: &mut usize, _token: u32, _skip: &SkipSet) -> Result<Vec<f64>> {
        *state += 1;
        Ok(self.logits(*state))
    }
}
