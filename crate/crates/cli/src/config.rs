//! TOML run configs with dotted `key=value` overrides.
//!
//! Overrides are applied to the parsed TOML table before it is turned into
//! typed configs, so an override naming an unknown key fails exactly like
//! the same key written in the file.

use std::path::Path;

use anyhow::{bail, Context, Result};
use minor_sft_core::trainer::{figure1_preset, RunSpec};
use minor_sft_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Invalid or unreadable configuration; maps to the config exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Reads `path` (or an empty table) and applies `overrides` in order.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(table)
}

/// Parses the right-hand side as a TOML value, falling back to a bare
/// string so that `train.objective=dpo` works without quotes.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Applies `a.b.c=value`. Numeric segments index into arrays.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(config_err(format!("override {assignment:?} is not key=value")));
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(config_err(format!("override key {key:?} has an empty segment")));
    }
    let value = parse_value(raw.trim());
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut root = Value::Table(std::mem::take(table));
    let result = set_path(&mut root, key, path, last, value);
    let Value::Table(t) = root else { unreachable!("root stays a table") };
    *table = t;
    result
}

fn set_path(root: &mut Value, key: &str, path: &[&str], last: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for seg in path {
        cur = match cur {
            Value::Table(t) => t.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new())),
            Value::Array(a) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| config_err(format!("override {key:?}: {seg:?} is not an array index")))?;
                let len = a.len();
                a.get_mut(i)
                    .ok_or_else(|| config_err(format!("override {key:?}: index {i} out of range ({len} items)")))?
            }
            _ => bail!(config_err(format!("override {key:?}: {seg:?} is not a table"))),
        };
    }
    match cur {
        Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        Value::Array(a) => {
            let i: usize = last
                .parse()
                .map_err(|_| config_err(format!("override {key:?}: {last:?} is not an array index")))?;
            let len = a.len();
            *a.get_mut(i)
                .ok_or_else(|| config_err(format!("override {key:?}: index {i} out of range ({len} items)")))? = value;
        }
        _ => bail!(config_err(format!("override {key:?}: parent is not a table"))),
    }
    Ok(())
}

fn deserialize<T: for<'de> Deserialize<'de>>(table: Table, what: &str) -> Result<T> {
    T::deserialize(Value::Table(table)).map_err(|e| config_err(format!("{what}: {e}")))
}

/// `[model]` plus `[train]`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainFile {
    pub fn from_table(table: Table) -> Result<Self> {
        let file: Self = deserialize(table, "train config")?;
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| config_err(e.to_string()))?;
        self.train.validate().map_err(|e| config_err(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// raw_sft at `base_lr`; sft_use_dpo and minor_sft at twice that, β 0.04.
    Figure1,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunEntry {
    name: String,
    #[serde(default)]
    config: Table,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareFileRaw {
    model: ModelConfig,
    master_seed: u64,
    preset: Option<Preset>,
    base_lr: Option<f64>,
    /// Train settings shared by every run; each run's own table wins.
    defaults: Table,
    runs: Vec<RunEntry>,
}

impl Default for CompareFileRaw {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            master_seed: 0,
            preset: None,
            base_lr: None,
            defaults: Table::new(),
            runs: Vec::new(),
        }
    }
}

/// A compare config with the preset expanded and defaults merged in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareFile {
    pub model: ModelConfig,
    pub master_seed: u64,
    pub runs: Vec<RunSpec>,
}

fn merged(defaults: &Table, own: &Table) -> Table {
    let mut t = defaults.clone();
    for (k, v) in own {
        match (t.get_mut(k), v) {
            (Some(Value::Table(base)), Value::Table(over)) => {
                let m = merged(base, over);
                *base = m;
            }
            _ => {
                t.insert(k.clone(), v.clone());
            }
        }
    }
    t
}

impl CompareFile {
    pub fn from_table(table: Table) -> Result<Self> {
        let raw: CompareFileRaw = deserialize(table, "compare config")?;
        raw.model.validate().map_err(|e| config_err(e.to_string()))?;
        let mut entries: Vec<(String, Table)> = Vec::new();
        match (raw.preset, raw.base_lr) {
            (Some(Preset::Figure1), Some(lr)) => {
                for run in figure1_preset(lr) {
                    let mut t = Table::new();
                    t.insert("objective".into(), Value::String(run.config.objective.name().into()));
                    t.insert("learning_rate".into(), Value::Float(run.config.learning_rate));
                    t.insert("beta".into(), Value::Float(run.config.beta.value()));
                    entries.push((run.name, t));
                }
            }
            (Some(_), None) => bail!(config_err("preset needs base_lr")),
            (None, Some(_)) => bail!(config_err("base_lr is only used with a preset")),
            (None, None) => {}
        }
        entries.extend(raw.runs.into_iter().map(|r| (r.name, r.config)));
        let runs = entries
            .into_iter()
            .map(|(name, own)| {
                let config: TrainConfig = deserialize(merged(&raw.defaults, &own), &format!("run {name:?}"))?;
                config.validate().map_err(|e| config_err(format!("run {name:?}: {e}")))?;
                Ok(RunSpec { name, config })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: raw.model,
            master_seed: raw.master_seed,
            runs,
        })
    }
}

/// Serialises an effective config for the output directory.
pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).context("serialising effective config")
}
