//! Weight container: an 8-byte magic, a little-endian `u64` manifest length,
//! a JSON manifest, then raw little-endian `f32` tensor payloads.
//!
//! Manifest offsets are in bytes from the start of the payload. Every tensor
//! named by [`Weights::layout`] must be present exactly once and the payload
//! must be covered without gaps, overlaps or trailing bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer, Weights};

pub const MAGIC: &[u8; 8] = b"LSWT0001";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

impl WeightManifest {
    /// Reads only the manifest, e.g. to recover the stored config.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        Ok(split(&bytes)?.0)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File { path: path.to_path_buf(), source })
}

fn split(bytes: &[u8]) -> Result<(WeightManifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Weights("missing magic header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Weights("manifest extends past end of file".into()))?;
    let manifest: WeightManifest = serde_json::from_slice(&bytes[16..end])?;
    Ok((manifest, &bytes[end..]))
}

pub fn write_weights(model: &Transformer) -> Result<Vec<u8>> {
    let config = model.config().clone();
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for ((name, shape), data) in Weights::layout(&config).into_iter().zip(model.weights().tensors()) {
        tensors.push(TensorEntry { name, shape, dtype: "f32".into(), offset: payload.len() });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&WeightManifest { config, tensors })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn read_weights(bytes: &[u8], config: &ModelConfig) -> Result<Transformer> {
    config.validate()?;
    let (manifest, payload) = split(bytes)?;
    let layout = Weights::layout(config);
    if manifest.tensors.len() != layout.len() {
        let known: Vec<&str> = layout.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(extra) = manifest.tensors.iter().find(|t| !known.contains(&t.name.as_str())) {
            return Err(Error::Weights(format!("unexpected tensor {}", extra.name)));
        }
    }
    let mut spans = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let mut matches = manifest.tensors.iter().filter(|t| &t.name == name);
        let entry = matches.next().ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if matches.next().is_some() {
            return Err(Error::Weights(format!("tensor {name} listed twice")));
        }
        if &entry.shape != shape {
            return Err(Error::Weights(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                entry.shape, shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Weights(format!("tensor {name} has dtype {}", entry.dtype)));
        }
        let end = entry.offset + entry.byte_len();
        let data = payload.get(entry.offset..end).ok_or_else(|| {
            Error::Weights(format!(
                "tensor {name} spans bytes {}..{end} of a {}-byte payload",
                entry.offset,
                payload.len()
            ))
        })?;
        spans.push((entry.offset, end, name.as_str()));
        tensors
            .push(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
    }
    spans.sort();
    let mut cursor = 0;
    for (start, end, name) in spans {
        if start < cursor {
            return Err(Error::Weights(format!("tensor {name} overlaps its predecessor")));
        }
        if start > cursor {
            return Err(Error::Weights(format!("gap before tensor {name}")));
        }
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(Error::Weights(format!("{} trailing payload bytes", payload.len() - cursor)));
    }
    Transformer::from_weights(config.clone(), Weights::from_tensors(config, tensors)?)
}

pub fn save_weights(path: impl AsRef<Path>, model: &Transformer) -> Result<()> {
    write_atomic(path, &write_weights(model)?)
}

pub fn load_weights(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Transformer> {
    read_weights(&read_file(path.as_ref())?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LanguageModel, TraceMode};
    use crate::tokenizer;

    fn small(d_model: usize) -> Transformer {
        let mut cfg = ModelConfig::toy(2, 11);
        cfg.d_model = d_model;
        cfg.n_heads = 2;
        cfg.d_ff = 12;
        Transformer::synthesize(cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = small(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lswt");
        save_weights(&path, &m).unwrap();
        let back = load_weights(&path, m.config()).unwrap();
        assert_eq!(back.weights(), m.weights());
        let toks = tokenizer::encode("round trip");
        let a = m.prefill(&toks, TraceMode::Off).unwrap().logits;
        let b = back.prefill(&toks, TraceMode::Off).unwrap().logits;
        assert_eq!(a, b);
        assert_eq!(WeightManifest::read(&path).unwrap().config, *m.config());
    }

    #[test]
    fn shape_mismatch() {
        let bytes = write_weights(&small(8)).unwrap();
        let mut cfg = small(8).config().clone();
        cfg.d_model = 16;
        let err = read_weights(&bytes, &cfg).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let m = small(8);
        let mut bytes = write_weights(&m).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_weights(&bytes, m.config()).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn trailing_payload() {
        let m = small(8);
        let mut bytes = write_weights(&m).unwrap();
        bytes.extend_from_slice(&[0; 4]);
        assert!(read_weights(&bytes, m.config()).unwrap_err().to_string().contains("trailing"));
    }

    fn rewrite(m: &Transformer, edit: impl FnOnce(&mut WeightManifest)) -> Vec<u8> {
        let bytes = write_weights(m).unwrap();
        let (mut manifest, payload) = split(&bytes).unwrap();
        edit(&mut manifest);
        let header = serde_json::to_vec(&manifest).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn missing_tensor() {
        let m = small(8);
        let bytes = rewrite(&m, |man| {
            man.tensors.retain(|t| t.name != "final_norm");
        });
        assert!(read_weights(&bytes, m.config()).unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn overlapping_tensors() {
        let m = small(8);
        let bytes = rewrite(&m, |man| {
            let first = man.tensors[1].offset;
            man.tensors[2].offset = first;
        });
        assert!(read_weights(&bytes, m.config()).is_err());
    }
}
