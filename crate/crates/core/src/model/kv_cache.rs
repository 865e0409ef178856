/// Keys and values of one decoder block, one row of `d_model` values per cached token.
///
/// A row is the concatenation of all heads, so `(heads, cached_len, head_dim)` is a
/// view over these rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockCache {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl BlockCache {
    pub fn cached_len(&self) -> usize {
        self.keys.len()
    }
}

/// Per-sequence decoding state of a [`super::Transformer`].
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub blocks: Vec<BlockCache>,
    /// Number of tokens consumed so far; the rotary position of the next token.
    pub position: usize,
    /// Sub-layer evaluations performed since the cache was created.
    pub executed_sublayers: u64,
}

impl KvCache {
    pub fn new(n_blocks: usize) -> Self {
        Self { blocks: vec![BlockCache::default(); n_blocks], position: 0, executed_sublayers: 0 }
    }

    pub fn cached_len(&self, block: usize) -> usize {
        self.blocks[block].cached_len()
    }
}
