//! Stage-wise layer skipping for multi-stage LLM reasoning.
//!
//! * [`model`]: decoder-only transformer with per-step sub-layer skipping.
//! * [`importance`]: residual cosine-similarity ranking of sub-layers.
//! * [`search`]: greedy per-stage budget search under an accuracy target.
//! * [`early_exit`]: confidence-window generation early exit.
//! * [`pipeline`], [`eval`], [`latency`]: running, scoring and costing stage plans.
//! * [`desk`]: a bundled offline benchmark with a scripted model.

pub mod cli;
pub mod desk;
pub mod early_exit;
pub mod error;
pub mod eval;
pub mod importance;
pub mod io;
pub mod latency;
pub mod model;
pub mod pipeline;
pub mod scripted;
pub mod search;
pub mod tokenizer;

pub use error::{Error, Result};
