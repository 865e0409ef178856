use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: char,
    pub text: String,
}

/// One multiple-choice question; stored one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub gold: char,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::InvalidRecord { id: self.id.clone(), msg };
        if self.options.len() < 2 {
            return Err(err(format!("needs at least 2 options, has {}", self.options.len())));
        }
        let mut seen = HashSet::new();
        for o in &self.options {
            if !('A'..='E').contains(&o.label) {
                return Err(err(format!("option label `{}` is not in A..E", o.label)));
            }
            if !seen.insert(o.label) {
                return Err(err(format!("option label `{}` is repeated", o.label)));
            }
        }
        if !seen.contains(&self.gold) {
            return Err(err(format!("gold label `{}` is not one of the options", self.gold)));
        }
        Ok(())
    }
}

/// Parses line-delimited records; blank lines are ignored.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut ids = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::DatasetLine {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        record.validate()?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::InvalidRecord { id: record.id, msg: "duplicate id".into() });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    parse_dataset(&text, path)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
