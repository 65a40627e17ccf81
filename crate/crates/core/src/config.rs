//! Run configuration: loading, environment overrides, validation and hashing.
//!
//! Configs are JSON. Unknown fields are rejected and every error names the
//! offending field path. `RUN_CONFIG_SCHEMA` is the published JSON schema of
//! the same structure.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{AugmentationConfig, DatasetSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub use serde_json::Value as JsonValue;

pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run_config.schema.json");

/// Environment variables starting with this prefix override config fields.
/// `BMB_TRAIN__BETA=3` sets `train.beta`.
pub const ENV_PREFIX: &str = "BMB_";

/// Explicit shot-group thresholds: many if `n_k > many_min`, few if
/// `n_k <= few_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    /// One run per seed; each overrides `train.seed`.
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    /// Directory holding `dataset.csv` (and optionally
    /// `unlabeled_truth.csv`). When absent the dataset is generated from
    /// `dataset`.
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub augment: AugmentationConfig,
    pub train: TrainConfig,
    /// Defaults to tertiles of the labeled class sizes.
    pub groups: Option<GroupThresholds>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seeds: vec![0],
            out_dir: None,
            data_dir: None,
            dataset: DatasetSpec::default(),
            augment: AugmentationConfig::default(),
            train: TrainConfig::default(),
            groups: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty file name"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if let Some(g) = self.groups {
            if g.many_min <= g.few_max {
                return Err(Error::config(
                    "groups.many_min",
                    "must exceed groups.few_max",
                ));
            }
        }
        self.dataset.validate()?;
        self.augment.validate()?;
        self.train.validate()
    }

    /// Copy with `train.seed` set for one run.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Hash identifying the data a run sees: the generator spec, or the
    /// dataset directory path when data is loaded from disk.
    pub fn dataset_hash(&self) -> String {
        let key = match &self.data_dir {
            Some(dir) => serde_json::json!({ "data_dir": dir }),
            None => serde_json::to_value(&self.dataset).expect("spec serializes"),
        };
        sha256_hex(key.to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Deserializes and validates a config value, reporting field paths.
pub fn from_value(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::config(
            if path == "." { String::new() } else { path },
            e.into_inner().to_string(),
        )
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets `value[path]`, creating intermediate objects.
pub fn set_path(value: &mut Value, path: &[&str], new: Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::config("", "empty override path"))?;
    let mut cur = value;
    for p in parents {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(path.join("."), "override path crosses a non-object"))?;
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::config(path.join("."), "override path crosses a non-object"))?
        .insert(last.to_string(), new);
    Ok(())
}

/// Applies `BMB_A__B=v` style overrides. Values parse as JSON when they can
/// and are taken as strings otherwise.
pub fn apply_env_overrides<I, K, V>(value: &mut Value, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut pairs: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.as_ref()
                .strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
        })
        .collect();
    pairs.sort();
    for (key, raw) in pairs {
        let path: Vec<&str> = key.split("__").collect();
        let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        set_path(value, &path, parsed)?;
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config("", format!("{}: {e}", path.display())))
}

/// Reads a config file, applies process environment overrides, validates.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut value = read_json(path)?;
    apply_env_overrides(&mut value, std::env::vars())?;
    from_value(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Beta,
    LambdaSampling,
    Alpha,
    MemoryContent,
    Mode,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::LambdaSampling => "lambda_sampling",
            Self::Alpha => "alpha",
            Self::MemoryContent => "memory_content",
            Self::Mode => "mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<Value>,
    pub base: RunConfig,
}

/// One sweep cell ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    /// The swept value as written in the aggregate CSV.
    pub label: String,
    pub config: RunConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("values", "must list at least one value"));
        }
        self.base.validate()
    }

    /// Expands into one validated config per value.
    pub fn cells(&self) -> Result<Vec<SweepCell>> {
        self.validate()?;
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut value = self.base.to_value();
                set_path(&mut value, &["train", self.parameter.name()], v.clone())?;
                let mut config = from_value(value).map_err(|e| match e {
                    Error::Config { message, .. } => Error::config(format!("values[{i}]"), message),
                    other => other,
                })?;
                let label = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                config.name = format!("{}_{}_{}", self.base.name, self.parameter.name(), label);
                Ok(SweepCell { label, config })
            })
            .collect()
    }
}

pub fn load_sweep(path: &Path) -> Result<SweepSpec> {
    let mut value = read_json(path)?;
    if let Some(base) = value.get_mut("base") {
        apply_env_overrides(base, std::env::vars())?;
    }
    let spec: SweepSpec = serde_path_to_error::deserialize(value)
        .map_err(|e| Error::config(e.path().to_string(), e.into_inner().to_string()))?;
    spec.validate()?;
    Ok(spec)
}
