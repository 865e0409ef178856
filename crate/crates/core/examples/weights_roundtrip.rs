// Save a transformer to the weight container and load it back bit-for-bit.

use litestage::io::{load_weights, save_weights, WeightManifest};
use litestage::model::{LanguageModel, ModelConfig, TraceMode, Transformer};
use litestage::tokenizer;

pub fn run() -> litestage::Result<()> {
    let model = Transformer::synthesize(ModelConfig::toy(2, 5))?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.lswt");
    save_weights(&path, &model)?;

    let manifest = WeightManifest::read(&path)?;
    println!("{} tensors, {} bytes", manifest.tensors.len(), std::fs::metadata(&path)?.len());
    for t in manifest.tensors.iter().take(4) {
        println!("  {:<22} {:?} @ {}", t.name, t.shape, t.offset);
    }

    let loaded = load_weights(&path, &manifest.config)?;
    let tokens = tokenizer::encode("round trip");
    let a = model.prefill(&tokens, TraceMode::Off)?.logits;
    let b = loaded.prefill(&tokens, TraceMode::Off)?.logits;
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("logits identical after reload");
    Ok(())
}

#[allow(dead_code)]
fn main() -> litestage::Result<()> {
    run()
}
