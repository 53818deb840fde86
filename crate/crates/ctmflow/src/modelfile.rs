//! Versioned model documents and training logs.

use std::path::{Path, PathBuf};

use ctmflow_core::{DctmModel, TrainingLog};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{read_json, write_json, write_records};

pub const FORMAT_VERSION: u32 = 1;

/// A fitted model with the name of the outcome column it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub outcome: String,
    pub model: DctmModel,
}

impl ModelFile {
    pub fn new(outcome: impl Into<String>, model: DctmModel) -> Self {
        Self { format_version: FORMAT_VERSION, outcome: outcome.into(), model }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw: serde_json::Value = read_json(path)?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        if version != Some(FORMAT_VERSION as u64) {
            return Err(CliError::parse(
                path,
                format!("unsupported model format_version {version:?}, expected {FORMAT_VERSION}"),
            ));
        }
        serde_json::from_value(raw).map_err(|e| CliError::parse(path, e))
    }
}

/// `model.json` gets its log at `model.log.csv`.
pub fn log_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("log.csv")
}

/// Per-epoch losses; `val_loss` is empty when no validation split was used.
pub fn write_training_log(path: impl AsRef<Path>, log: &TrainingLog) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .epochs
        .iter()
        .map(|e| vec![e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.map_or(String::new(), |v| v.to_string())])
        .collect();
    write_records(path, &["epoch", "train_loss", "val_loss"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_path_sits_next_to_model() {
        assert_eq!(log_path(Path::new("out/m.json")), PathBuf::from("out/m.log.csv"));
        assert_eq!(log_path(Path::new("m")), PathBuf::from("m.log.csv"));
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"format_version": 2, "outcome": "y", "model": {}}"#).unwrap();
        let err = ModelFile::load(&p).unwrap_err();
        assert!(err.to_string().contains("format_version"));
        assert_eq!(err.exit_code(), 2);
    }
}
