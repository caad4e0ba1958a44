use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vs30_core::encoders::ModelSpec;
use vs30_core::trainer::{config_hash, TrainConfig};

use crate::UsageError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus directory or its `manifest.csv`.
    pub manifest: Option<PathBuf>,
    /// Fold assignment written by `vs30 split`.
    pub folds: Option<PathBuf>,
    /// Pretraining checkpoint for `transfer-train`.
    pub pretrained: Option<PathBuf>,
}

/// Everything a training command needs, as read from a TOML file with
/// `[data]`, `[model]` and `[train]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("`{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`, reading the value as TOML and falling back to a bare
/// string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override `{s}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_owned()));
    Ok((k.trim().to_owned(), value))
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order and resolves
    /// relative data paths against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut table, &k, v)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("config: {}", e.message())))?;
        if let Some(base) = path.and_then(Path::parent) {
            for p in [&mut cfg.data.manifest, &mut cfg.data.folds, &mut cfg.data.pretrained]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.model.dropout_rate = cfg.train.dropout_rate;
        cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
        cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
        if cfg.train.epochs == 0 {
            bail!(UsageError("train.epochs must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        config_hash(&self.model, &self.train)
    }

    pub fn manifest(&self) -> Result<&Path> {
        self.data
            .manifest
            .as_deref()
            .ok_or_else(|| UsageError("no manifest: set data.manifest or pass --manifest".into()).into())
    }

    pub fn folds(&self) -> Result<&Path> {
        self.data
            .folds
            .as_deref()
            .ok_or_else(|| UsageError("no fold file: set data.folds or pass --folds".into()).into())
    }

    /// TOML text of the resolved configuration, headed by its hash.
    pub fn to_toml(&self) -> Result<String> {
        Ok(format!("# config_hash = {}\n{}", self.hash(), toml::to_string(self)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(None, &["train.epochs=3".into(), "model.encoder_kind=tcn".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.encoder_kind, vs30_core::encoders::EncoderKind::Tcn);
        let err = RunConfig::load(None, &["train.epochz=3".into()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn resolved_config_reloads() {
        let cfg = RunConfig::load(None, &["train.base_lr=0.001".into(), "model.duration_s=30".into()]).unwrap();
        let text = cfg.to_toml().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, &text).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), cfg);
    }
}
