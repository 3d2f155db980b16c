//! Run configuration: a TOML tree layered as
//! defaults < config file < `--preset` < `--set key=value`.

use std::path::{Path, PathBuf};

use cbl_core::eval::EvalConfig;
use cbl_core::synthscene::GenConfig;
use cbl_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "CBL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Dataset snapshot; defaults to `<output_dir>/dataset.jsonl`.
    pub dataset: Option<PathBuf>,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            dataset: None,
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.gen.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Output directory with [`OUTPUT_ROOT_ENV`] applied to relative paths.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.output_dir().join("dataset.jsonl"))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn write_resolved(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml()?)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

/// Parses the right-hand side of `--set`: any TOML value, or a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Writes `value` at the dotted `key` path, creating tables on the way.
pub fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn apply_overrides(cfg: &RunConfig, sets: &[String]) -> Result<RunConfig, CliError> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut table = toml::Table::try_from(cfg)
        .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?;
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {s:?}")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("invalid --set override: {e}")))
}

/// Builds the effective configuration for one command.
pub fn load(
    path: Option<&Path>,
    preset: Option<&str>,
    sets: &[String],
) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(name) = preset {
        cfg.train.apply_preset(name)?;
    }
    let cfg = apply_overrides(&cfg, sets)?;
    cfg.validate()?;
    Ok(cfg)
}
