//! Byte-level tokenizer shared by the toy models.
//!
//! Ids `0..256` are raw bytes, followed by two special tokens.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

/// Encodes `text` as `[BOS, bytes...]`.
pub fn encode(text: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids
}

/// Decodes byte tokens, dropping specials and anything outside the byte range.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
