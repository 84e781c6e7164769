//! Module and variable ablations trained under one seed/budget protocol.

use serde::{Deserialize, Serialize};
use vegecast_core::exec::Execution;
use vegecast_core::{Minicube, MetricsReport, Target};
use vegecast_model::checkpoint::TrainingRecord;
use vegecast_model::diffusion::ScheduleConfig;
use vegecast_model::trainer::{train_denoiser_on, DenoiserData, LogSink, TrainConfig};
use vegecast_model::vegenet::VegeNetConfig;
use vegecast_model::{SampleOptions, VaeCheckpoint};

use crate::error::{Error, Result};
use crate::scoring::{per_cube_rmse, score, truth_future, ForecastSet, ModelForecaster};
use crate::stats::mean_stderr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub temporal_attention: bool,
    pub adaln: bool,
    pub use_meteo: bool,
    pub use_env: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            temporal_attention: true,
            adaln: true,
            use_meteo: true,
            use_env: true,
        }
    }
}

impl AblationFlags {
    pub fn apply(&self, cfg: &VegeNetConfig) -> VegeNetConfig {
        VegeNetConfig {
            temporal_attention: self.temporal_attention,
            adaln: self.adaln,
            use_meteo: self.use_meteo,
            use_env: self.use_env,
            ..cfg.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub name: String,
    pub flags: AblationFlags,
}

pub const FULL: &str = "full";
pub const NO_VARIABLES: &str = "no_variables";

impl Ablation {
    fn named(name: &str, f: impl FnOnce(&mut AblationFlags)) -> Self {
        let mut flags = AblationFlags::default();
        f(&mut flags);
        Ablation {
            name: name.to_string(),
            flags,
        }
    }

    /// The module ablations followed by the variable ablations.
    pub fn standard() -> Vec<Ablation> {
        ["full", "no_temporal_attention", "no_adaln", "no_meteo", "no_env", "no_variables"]
            .iter()
            .map(|n| Self::by_name(n).unwrap())
            .collect()
    }

    pub fn by_name(name: &str) -> Result<Ablation> {
        Ok(match name {
            "full" => Self::named(name, |_| {}),
            "no_temporal_attention" => Self::named(name, |f| f.temporal_attention = false),
            "no_adaln" => Self::named(name, |f| f.adaln = false),
            "no_meteo" => Self::named(name, |f| f.use_meteo = false),
            "no_env" => Self::named(name, |f| f.use_env = false),
            "no_variables" => Self::named(name, |f| {
                f.use_meteo = false;
                f.use_env = false;
            }),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}`; expected full, no_temporal_attention, no_adaln, no_meteo, no_env or no_variables"
                )))
            }
        })
    }

    /// Parses a comma-separated list of names; the full model is always
    /// included (first) so every run has its reference.
    pub fn parse_list(spec: &str) -> Result<Vec<Ablation>> {
        let mut out = vec![Self::by_name(FULL)?];
        for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let a = Self::by_name(name)?;
            if !out.contains(&a) {
                out.push(a);
            }
        }
        Ok(out)
    }
}

/// Shared protocol for every configuration.
#[derive(Debug, Clone)]
pub struct AblationProtocol {
    pub base: VegeNetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    /// Training seeds; each configuration is trained once per seed.
    pub seeds: Vec<u64>,
    pub sampling: SampleOptions,
    /// Root of the per-cube sampling seeds, shared by all configurations.
    pub eval_seed: u64,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub flags: AblationFlags,
    pub seed: u64,
    pub num_params: usize,
    pub training: Option<TrainingRecord>,
    /// RGBN, NDVI and ARVI reports on the test cubes.
    pub reports: Vec<MetricsReport>,
    pub ndvi_rmse: f64,
    pub ndvi_rmse_per_cube: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub name: String,
    pub flags: AblationFlags,
    pub num_params: usize,
    /// NDVI RMSE averaged over seeds and its standard error.
    pub ndvi_rmse_mean: f64,
    pub ndvi_rmse_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub masked: bool,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.name == name)
    }
}

pub fn run_ablation(
    ablations: &[Ablation],
    data: &DenoiserData,
    vae: &VaeCheckpoint,
    test: &[Minicube],
    protocol: &AblationProtocol,
    log: &mut dyn LogSink,
) -> Result<AblationReport> {
    if ablations.is_empty() {
        return Err(Error::Config("at least one configuration is required".into()));
    }
    if protocol.seeds.is_empty() {
        return Err(Error::Config("at least one training seed is required".into()));
    }
    if test.is_empty() {
        return Err(Error::Invalid("ablation needs test cubes".into()));
    }
    let truths = test.iter().map(truth_future).collect::<Result<Vec<_>>>()?;
    let mut runs = Vec::new();
    for ab in ablations {
        let net = ab.flags.apply(&protocol.base);
        for &seed in &protocol.seeds {
            let cfg = TrainConfig {
                seed,
                ..protocol.train.clone()
            };
            let den = train_denoiser_on(data, vae, &net, &protocol.schedule, &cfg, log)?;
            let forecaster = ModelForecaster {
                name: ab.name.clone(),
                vae,
                denoiser: &den,
                options: protocol.sampling.clone(),
                root_seed: protocol.eval_seed,
                members: 1,
            };
            let set = ForecastSet::collect(&forecaster, test, Execution::default())?;
            let reports = score(&set, test, &truths, &Target::TABLE, protocol.masked)?
                .ok_or_else(|| Error::Invalid("model produced no forecasts".into()))?;
            let ndvi_rmse = reports
                .iter()
                .find(|r| r.target == Target::Ndvi)
                .map(|r| r.aggregate.rmse)
                .expect("NDVI is in the table targets");
            let k = den.net.config.horizon;
            let per_cube = per_cube_rmse(&set, test, &truths, Target::Ndvi, protocol.masked, 0..k)?
                .into_iter()
                .flatten()
                .collect();
            runs.push(AblationRun {
                name: ab.name.clone(),
                flags: ab.flags,
                seed,
                num_params: den.store.num_params(),
                training: den.training.clone(),
                reports,
                ndvi_rmse,
                ndvi_rmse_per_cube: per_cube,
            });
        }
    }
    let summary = ablations
        .iter()
        .map(|ab| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.name == ab.name).collect();
            let vals: Vec<f64> = mine.iter().map(|r| r.ndvi_rmse).collect();
            let (mean, se) = mean_stderr(&vals);
            AblationSummary {
                name: ab.name.clone(),
                flags: ab.flags,
                num_params: mine[0].num_params,
                ndvi_rmse_mean: mean,
                ndvi_rmse_stderr: se,
            }
        })
        .collect();
    Ok(AblationReport {
        masked: protocol.masked,
        seeds: protocol.seeds.clone(),
        runs,
        summary,
    })
}
