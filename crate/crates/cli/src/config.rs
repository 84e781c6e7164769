//! Stage config files. Each is a JSON object whose keys mirror the structs
//! below; every key is optional and missing ones take the defaults. Files
//! are checked against the defaults before deserializing so that unknown
//! keys and type mismatches are all reported in one error.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vegecast_core::{GeneratorConfig, Target};
use vegecast_model::diffusion::ScheduleConfig;
use vegecast_model::trainer::{Stage, TrainConfig};
use vegecast_model::vae::VaeConfig;
use vegecast_model::vegenet::VegeNetConfig;
use vegecast_model::SampleOptions;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub generator: GeneratorConfig,
    pub split: SplitRatios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeStageConfig {
    pub model: VaeConfig,
    pub train: TrainConfig,
}

impl VaeStageConfig {
    pub fn defaults(stage: Stage) -> Self {
        VaeStageConfig {
            model: VaeConfig::default(),
            train: TrainConfig::for_stage(stage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserStageConfig {
    /// Geometry keys (latent size, horizon, meteo layout...) are filled in
    /// from the data and the VAE; setting them to other values is an error.
    pub model: VegeNetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
}

impl Default for DenoiserStageConfig {
    fn default() -> Self {
        DenoiserStageConfig {
            model: VegeNetConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::for_stage(Stage::Denoiser),
        }
    }
}

/// Keys of the denoiser model section that follow from data and VAE.
pub const GEOMETRY_KEYS: [&str; 9] = [
    "latent_channels",
    "latent_height",
    "latent_width",
    "context_len",
    "horizon",
    "meteo_vars",
    "meteo_cadence",
    "land_cover_classes",
    "env_downsample",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    pub sampling: SampleOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub sampling: SampleOptions,
    /// Cube `i` is sampled with a seed derived from this one and `i`.
    pub seed: u64,
    /// Members per forecast; more than one scores the ensemble mean.
    pub members: usize,
    pub split: SplitPart,
    pub curve_target: Target,
    /// Also score persistence and previous-year forecasts.
    pub baselines: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            sampling: SampleOptions::default(),
            seed: 0,
            members: 1,
            split: SplitPart::Test,
            curve_target: Target::Ndvi,
            baselines: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub denoiser: DenoiserStageConfig,
    pub seeds: Vec<u64>,
    pub sampling: SampleOptions,
    pub eval_seed: u64,
    pub split: SplitPart,
    pub masked: bool,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            denoiser: DenoiserStageConfig::default(),
            seeds: vec![0, 1, 2],
            sampling: SampleOptions::default(),
            eval_seed: 0,
            split: SplitPart::Test,
            masked: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfConfig {
    pub sampling: SampleOptions,
    pub seed: u64,
    pub split: SplitPart,
}

/// A config merged over its defaults, with the user's raw JSON kept so
/// callers can tell explicit settings from defaults.
#[derive(Debug, Clone)]
pub struct Resolved<T> {
    pub config: T,
    pub user: Value,
}

impl<T> Resolved<T> {
    /// The value the user wrote at `pointer` (e.g. `/model/horizon`).
    pub fn explicit(&self, pointer: &str) -> Option<&Value> {
        self.user.pointer(pointer)
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: Some(path.to_path_buf()),
        errors: vec![format!("not valid JSON: {e}")],
    })
}

/// Loads `path` (or nothing) over `defaults`.
pub fn load<T: Serialize + DeserializeOwned>(path: Option<&Path>, defaults: T) -> Result<Resolved<T>> {
    let user = match path {
        Some(p) => read_json(p)?,
        None => Value::Object(Map::new()),
    };
    resolve(&user, defaults).map_err(|errors| Error::Schema {
        path: path.map(Path::to_path_buf),
        errors,
    })
}

/// Merges `user` over `defaults`, collecting every schema violation.
pub fn resolve<T: Serialize + DeserializeOwned>(user: &Value, defaults: T) -> std::result::Result<Resolved<T>, Vec<String>> {
    let base = serde_json::to_value(&defaults).expect("configs serialize");
    if !user.is_object() {
        return Err(vec![format!("the config root must be an object, got {}", kind(user))]);
    }
    let mut errors = Vec::new();
    check("", &base, user, &mut errors);
    if !errors.is_empty() {
        return Err(errors);
    }
    let mut merged = base;
    merge(&mut merged, user);
    let config = serde_json::from_value(merged).map_err(|e| vec![e.to_string()])?;
    Ok(Resolved {
        config,
        user: user.clone(),
    })
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(n) if n.is_f64() => "a number",
        Value::Number(_) => "an integer",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn check(prefix: &str, base: &Value, user: &Value, errors: &mut Vec<String>) {
    let (Value::Object(b), Value::Object(u)) = (base, user) else {
        return;
    };
    for (key, uv) in u {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(bv) = b.get(key) else {
            let mut known: Vec<&str> = b.keys().map(String::as_str).collect();
            known.sort_unstable();
            errors.push(format!("unknown key `{path}` (expected one of: {})", known.join(", ")));
            continue;
        };
        let ok = match (bv, uv) {
            // optional settings: unset defaults accept any value and null
            // clears a set one; the typed pass reports what remains
            (Value::Null, _) | (_, Value::Null) => true,
            (Value::Number(bn), Value::Number(un)) => !(bn.is_u64() && !un.is_u64()),
            (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) | (Value::Array(_), Value::Array(_)) => true,
            (Value::Object(_), Value::Object(_)) => {
                check(&path, bv, uv, errors);
                true
            }
            _ => false,
        };
        if !ok {
            let expected = match bv {
                Value::Number(n) if n.is_u64() => "a non-negative integer",
                other => kind(other),
            };
            errors.push(format!("`{path}`: expected {expected}, got {}", kind(uv)));
        }
    }
}

fn merge(base: &mut Value, user: &Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    Some(slot) => *slot = v.clone(),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, u) => *b = u.clone(),
    }
}
