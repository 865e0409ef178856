// Decode from a seeded toy transformer at full depth and with sub-layers skipped.
//
// Skipping changes only the decode steps; the prompt is always prefilled at
// full depth, and a skipped attention sub-layer leaves its KV cache untouched.

use litestage::model::{LanguageModel, ModelConfig, SkipSet, SubLayerRef, TraceMode, Transformer};
use litestage::pipeline::argmax;
use litestage::tokenizer;

pub fn run() -> litestage::Result<()> {
    let model = Transformer::synthesize(ModelConfig::toy(4, 42))?;
    let prompt = tokenizer::encode("The quick brown fox");

    let decode = |skip: &SkipSet| -> litestage::Result<(Vec<u32>, Vec<usize>, u64)> {
        let p = model.prefill(&prompt, TraceMode::Off)?;
        let (mut cache, mut logits) = (p.state, p.logits);
        let mut out = Vec::new();
        for _ in 0..8 {
            let t = argmax(&logits);
            out.push(t);
            logits = model.decode_step(&mut cache, t, skip)?;
        }
        let lens = cache.blocks.iter().map(|b| b.cached_len()).collect();
        Ok((out, lens, cache.executed_sublayers))
    };

    let (full, lens, work) = decode(&SkipSet::new())?;
    println!("full depth   tokens {full:?}");
    println!("             cache lengths {lens:?}, sub-layers executed {work}");

    let skip: SkipSet = [SubLayerRef::mhsa(1), SubLayerRef::ffn(3)].into_iter().collect();
    let (skipped, lens, work) = decode(&skip)?;
    println!("skip {skip}  tokens {skipped:?}");
    println!("             cache lengths {lens:?}, sub-layers executed {work}");

    // The identical path: no skips must reproduce a plain full forward pass.
    let mut seq = prompt.clone();
    for &t in &full[..full.len() - 1] {
        seq.push(t);
    }
    let last = model.forward(&seq)?.pop().expect("non-empty sequence");
    assert_eq!(argmax(&last), full[full.len() - 1]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
