//! Checkpoint directories: `manifest.json` plus one raw f32 file per
//! parameter.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use vegecast_core::cube::ArrayEntry;
use vegecast_core::preprocess::NormStats;
use vegecast_core::rng::seeded;

use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::vae::{Vae, VaeConfig};
use crate::vegenet::{InitScheme, VegeNet, VegeNetConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Provenance of how a checkpoint was trained and selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub stage: String,
    pub optimizer: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub steps_run: usize,
    pub metric_name: String,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub best_step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Vae {
        config: VaeConfig,
    },
    Denoiser {
        config: VegeNetConfig,
        schedule: ScheduleConfig,
        /// Past-mean weight `w` of the noise initialization.
        noise_init_weight: f64,
        /// Multiplier applied to VAE mean latents before diffusion.
        latent_scale: f64,
        vae_hash: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub norm_stats: NormStats,
    pub training: Option<TrainingRecord>,
    pub param_hash: String,
    pub num_params: usize,
    pub arrays: BTreeMap<String, ArrayEntry>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|source| Error::Json { path, source })
}

fn write_checkpoint(dir: &Path, store: &ParamStore, model: ModelSpec, norm: &NormStats, training: Option<&TrainingRecord>) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arrays = store.save_arrays(dir)?;
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model,
        norm_stats: norm.clone(),
        training: training.cloned(),
        param_hash: store.hash()?,
        num_params: store.num_params(),
        arrays,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn load_params(dir: &Path, store: &ParamStore, manifest: &Manifest) -> Result<()> {
    store.load_arrays(dir, &manifest.arrays)?;
    let hash = store.hash()?;
    if hash != manifest.param_hash {
        return Err(Error::Corrupt {
            name: "<all parameters>".into(),
            detail: format!("hash {hash} does not match manifest {}", manifest.param_hash),
        });
    }
    Ok(())
}

#[derive(Clone)]
pub struct VaeCheckpoint {
    pub vae: Vae,
    pub store: ParamStore,
    pub norm: NormStats,
    pub training: Option<TrainingRecord>,
}

impl std::fmt::Debug for VaeCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VaeCheckpoint")
            .field("config", &self.vae.config)
            .field("num_params", &self.store.num_params())
            .field("training", &self.training)
            .finish_non_exhaustive()
    }
}

impl VaeCheckpoint {
    /// Fresh, seeded model whose decoder bounds follow `norm`.
    pub fn init(config: VaeConfig, norm: NormStats, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32);
        let vae = Vae::new(config, norm.frame_bounds(), &mut store, &mut seeded(seed))?;
        Ok(VaeCheckpoint {
            vae,
            store,
            norm,
            training: None,
        })
    }

    pub fn hash(&self) -> Result<String> {
        self.store.hash()
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let spec = ModelSpec::Vae {
            config: self.vae.config.clone(),
        };
        write_checkpoint(dir, &self.store, spec, &self.norm, self.training.as_ref())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let ModelSpec::Vae { config } = &manifest.model else {
            return Err(Error::Invalid(format!("{} is not a VAE checkpoint", dir.display())));
        };
        let ck = Self::init(config.clone(), manifest.norm_stats.clone(), 0)?;
        load_params(dir, &ck.store, &manifest)?;
        Ok(VaeCheckpoint {
            training: manifest.training,
            ..ck
        })
    }
}

#[derive(Clone)]
pub struct DenoiserCheckpoint {
    pub net: VegeNet,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub norm: NormStats,
    pub noise_init_weight: f64,
    pub latent_scale: f64,
    pub vae_hash: String,
    pub training: Option<TrainingRecord>,
}

impl std::fmt::Debug for DenoiserCheckpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserCheckpoint")
            .field("config", &self.net.config)
            .field("num_params", &self.store.num_params())
            .field("noise_init_weight", &self.noise_init_weight)
            .field("latent_scale", &self.latent_scale)
            .field("vae_hash", &self.vae_hash)
            .field("training", &self.training)
            .finish_non_exhaustive()
    }
}

impl DenoiserCheckpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        config: VegeNetConfig,
        schedule: ScheduleConfig,
        norm: NormStats,
        noise_init_weight: f64,
        latent_scale: f64,
        vae_hash: String,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_init_weight) {
            return Err(Error::Config(format!("noise_init_weight {noise_init_weight} outside [0, 1]")));
        }
        let mut store = ParamStore::new(DType::F32);
        let net = VegeNet::new(config, InitScheme::AdaLnZero, &mut store, &mut seeded(seed))?;
        Ok(DenoiserCheckpoint {
            net,
            store,
            schedule: NoiseSchedule::new(schedule)?,
            norm,
            noise_init_weight,
            latent_scale,
            vae_hash,
            training: None,
        })
    }

    pub fn hash(&self) -> Result<String> {
        self.store.hash()
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        let spec = ModelSpec::Denoiser {
            config: self.net.config.clone(),
            schedule: self.schedule.config.clone(),
            noise_init_weight: self.noise_init_weight,
            latent_scale: self.latent_scale,
            vae_hash: self.vae_hash.clone(),
        };
        write_checkpoint(dir, &self.store, spec, &self.norm, self.training.as_ref())
    }

    /// Loads a denoiser; with `expected`, any difference from the stored
    /// config is reported as drift.
    pub fn load(dir: &Path, expected: Option<&VegeNetConfig>) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let ModelSpec::Denoiser {
            config,
            schedule,
            noise_init_weight,
            latent_scale,
            vae_hash,
        } = &manifest.model
        else {
            return Err(Error::Invalid(format!("{} is not a denoiser checkpoint", dir.display())));
        };
        if let Some(want) = expected {
            check_drift(config, want)?;
        }
        let ck = Self::init(
            config.clone(),
            schedule.clone(),
            manifest.norm_stats.clone(),
            *noise_init_weight,
            *latent_scale,
            vae_hash.clone(),
            0,
        )?;
        load_params(dir, &ck.store, &manifest)?;
        Ok(DenoiserCheckpoint {
            training: manifest.training,
            ..ck
        })
    }
}

/// Field-by-field comparison through the serialized form, so new config
/// fields are covered automatically.
pub fn check_drift<T: Serialize>(stored: &T, expected: &T) -> Result<()> {
    let a = serde_json::to_value(stored).expect("config serializes");
    let b = serde_json::to_value(expected).expect("config serializes");
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, va) in a {
            let vb = b.get(k).cloned().unwrap_or(serde_json::Value::Null);
            if *va != vb {
                return Err(Error::ConfigDrift {
                    field: k.clone(),
                    stored: va.to_string(),
                    expected: vb.to_string(),
                });
            }
        }
    } else if a != b {
        return Err(Error::ConfigDrift {
            field: "<root>".into(),
            stored: a.to_string(),
            expected: b.to_string(),
        });
    }
    Ok(())
}
