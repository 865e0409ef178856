use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::desk::DeskConfig;
use crate::early_exit::{ConfidenceMode, EarlyExitConfig};
use crate::error::{Error, Result};
use crate::latency::{LatencyModel, LatencySource};
use crate::model::ModelConfig;
use crate::pipeline::SamplingPolicy;

/// Writes to a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_err = |source| Error::File { path: path.to_path_buf(), source };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(file_err)?;
    tmp.write_all(bytes).map_err(file_err)?;
    tmp.as_file().sync_all().map_err(file_err)?;
    tmp.persist(path).map_err(|e| file_err(e.error))?;
    Ok(())
}

pub fn save_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    Ok(toml::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSource {
    /// The scripted desk-benchmark model.
    Desk(DeskConfig),
    /// A transformer with seeded random weights.
    Synthetic(ModelConfig),
    /// A transformer read from a weight container.
    Weights { path: PathBuf },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Desk(DeskConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyExitSection {
    pub enabled: bool,
    pub window: usize,
    pub threshold: f64,
    pub mode: ConfidenceMode,
}

impl Default for EarlyExitSection {
    fn default() -> Self {
        let d = EarlyExitConfig::default();
        Self { enabled: true, window: d.window, threshold: d.threshold, mode: d.mode }
    }
}

impl EarlyExitSection {
    pub fn config(&self) -> Option<EarlyExitConfig> {
        self.enabled.then_some(EarlyExitConfig {
            window: self.window,
            threshold: self.threshold,
            mode: self.mode,
        })
    }
}

/// Everything a CLI run needs, loadable from TOML. Flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSource,
    pub stage_plan: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub skip_config: Option<PathBuf>,
    pub budgets: Option<Vec<usize>>,
    pub early_exit: EarlyExitSection,
    pub sampling: SamplingPolicy,
    pub latency_source: LatencySource,
    pub latency_model: LatencyModel,
    pub self_consistency: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            stage_plan: None,
            dataset: None,
            skip_config: None,
            budgets: None,
            early_exit: EarlyExitSection::default(),
            sampling: SamplingPolicy::greedy(),
            latency_source: LatencySource::Model,
            latency_model: LatencyModel::default(),
            self_consistency: 1,
        }
    }
}

impl RunConfig {
    /// Checks the parts that do not need a loaded model.
    pub fn validate(&self, n_sublayers: Option<usize>) -> Result<()> {
        if self.skip_config.is_some() && self.budgets.is_some() {
            return Err(Error::InvalidArgument(
                "give either a skip-config file or inline budgets, not both".into(),
            ));
        }
        if let (Some(budgets), Some(max)) = (&self.budgets, n_sublayers) {
            if let Some(&k) = budgets.iter().find(|&&k| k > max) {
                return Err(Error::BudgetOutOfRange { budget: k, max });
            }
        }
        if self.self_consistency == 0 {
            return Err(Error::InvalidArgument("self_consistency must be at least 1".into()));
        }
        if let Some(ee) = self.early_exit.config() {
            ee.validate()?;
        }
        self.latency_model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_toml_roundtrip() {
        let cfg = RunConfig {
            model: ModelSource::Synthetic(ModelConfig::toy(4, 9)),
            budgets: Some(vec![11, 6, 4]),
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg: RunConfig =
            toml::from_str("self_consistency = 10\n[early_exit]\nenabled = false\n").unwrap();
        assert_eq!(cfg.self_consistency, 10);
        assert!(cfg.early_exit.config().is_none());
        assert_eq!(cfg.model, ModelSource::default());
    }

    #[test]
    fn budgets_checked_against_model() {
        let cfg = RunConfig { budgets: Some(vec![3, 50]), ..Default::default() };
        assert!(matches!(cfg.validate(Some(44)), Err(Error::BudgetOutOfRange { budget: 50, .. })));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        save_json(&p, &vec![1, 2]).unwrap();
        save_json(&p, &vec![3]).unwrap();
        assert_eq!(load_json::<Vec<i32>>(&p).unwrap(), vec![3]);
    }
}
