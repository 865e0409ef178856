//! Datasets, weight containers, configuration and persisted artifacts.

mod artifacts;
mod dataset;
mod weights;

pub use artifacts::{
    load_json, load_toml, save_json, write_atomic, EarlyExitSection, ModelSource, RunConfig,
};
pub use dataset::{load_dataset, parse_dataset, save_dataset, AnswerOption, DatasetRecord};
pub use weights::{load_weights, read_weights, save_weights, write_weights, TensorEntry, WeightManifest};
