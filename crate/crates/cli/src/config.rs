//! JSON run configuration for `pretrain`.

use std::fs;
use std::path::{Path, PathBuf};

use mwmae::mae::MaeConfig;
use mwmae::train::TrainConfig;
use mwmae::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

/// Model, optimisation and I/O settings; every field may be omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: MaeConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

fn qualify(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, detail } => Error::Config {
            field: format!("{section}.{field}"),
            detail,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| qualify("model", e))?;
        self.train.validate().map_err(|e| qualify("train", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"depth": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn field_names_are_qualified() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"mask_ratio": 1.0}}"#).unwrap();
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.mask_ratio"),
            other => panic!("unexpected {other:?}"),
        }
        let c: RunConfig = serde_json::from_str(r#"{"train": {"batch_size": 0}}"#).unwrap();
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.batch_size"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
