//! Scoring forecasts against gap-filled truth.

use ndarray::{s, Array4};
use serde::{Deserialize, Serialize};
use vegecast_core::exec::{try_map_range, Execution};
use vegecast_core::metrics::{build_report, cube_rmse, Scored};
use vegecast_core::preprocess::fill_frames;
use vegecast_core::rng::{derive_seed, seeded};
use vegecast_core::{Minicube, MetricsReport, Target};
use vegecast_model::{DenoiserCheckpoint, SampleOptions, VaeCheckpoint};

use crate::error::{Error, Result};
use crate::stats::mean_stderr;

/// Future frames `[K, 4, H, W]` with clouds filled from the whole series,
/// the reference every forecaster is scored against.
pub fn truth_future(cube: &Minicube) -> Result<Array4<f32>> {
    let filled = fill_frames(cube, cube.context_len)?;
    Ok(filled.slice(s![cube.context_len.., .., .., ..]).to_owned())
}

/// Something that forecasts the `i`-th cube of a set.
pub trait Forecaster: Sync {
    fn name(&self) -> &str;
    /// `Ok(None)` when the forecaster cannot serve this cube (e.g. a
    /// baseline whose auxiliary data is missing).
    fn forecast(&self, index: usize, cube: &Minicube) -> Result<Option<Array4<f32>>>;
}

/// The trained model; cube `i` is sampled with `derive_seed(root_seed, i)`.
pub struct ModelForecaster<'a> {
    pub name: String,
    pub vae: &'a VaeCheckpoint,
    pub denoiser: &'a DenoiserCheckpoint,
    pub options: SampleOptions,
    pub root_seed: u64,
    /// Average this many members (1 = a single sample).
    pub members: usize,
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forecast(&self, index: usize, cube: &Minicube) -> Result<Option<Array4<f32>>> {
        let seed = derive_seed(self.root_seed, index as u64);
        let f = if self.members <= 1 {
            vegecast_model::forecast(cube, self.vae, self.denoiser, &self.options, &mut seeded(seed))?
        } else {
            vegecast_model::ensemble_forecast(
                cube,
                self.vae,
                self.denoiser,
                self.members,
                &self.options,
                seed,
                Execution::Sequential,
            )?
            .mean
        };
        Ok(Some(f))
    }
}

pub struct Persistence;

impl Forecaster for Persistence {
    fn name(&self) -> &str {
        "persistence"
    }

    fn forecast(&self, _: usize, cube: &Minicube) -> Result<Option<Array4<f32>>> {
        crate::baselines::persistence_baseline(cube).map(Some)
    }
}

pub struct PreviousYear;

impl Forecaster for PreviousYear {
    fn name(&self) -> &str {
        "previous_year"
    }

    fn forecast(&self, _: usize, cube: &Minicube) -> Result<Option<Array4<f32>>> {
        crate::baselines::previous_year_baseline(cube)
    }
}

/// Forecasts of one forecaster over a cube set, paired with the truth.
pub struct ForecastSet {
    pub name: String,
    /// `None` where the forecaster was unavailable.
    pub forecasts: Vec<Option<Array4<f32>>>,
}

impl ForecastSet {
    pub fn collect(f: &dyn Forecaster, cubes: &[Minicube], exec: Execution) -> Result<Self> {
        let forecasts = try_map_range(cubes.len(), exec, |i| f.forecast(i, &cubes[i]))?;
        Ok(ForecastSet {
            name: f.name().to_string(),
            forecasts,
        })
    }

    pub fn available(&self) -> usize {
        self.forecasts.iter().filter(|f| f.is_some()).count()
    }
}

/// Reports for `targets`; `None` when the forecaster was unavailable on
/// every cube. Cubes it could not serve are skipped.
pub fn score(
    set: &ForecastSet,
    cubes: &[Minicube],
    truths: &[Array4<f32>],
    targets: &[Target],
    masked: bool,
) -> Result<Option<Vec<MetricsReport>>> {
    check_lengths(set, cubes, truths)?;
    let items: Vec<Scored<'_>> = set
        .forecasts
        .iter()
        .zip(cubes.iter().zip(truths))
        .filter_map(|(f, (c, t))| {
            f.as_ref().map(|f| Scored {
                pred: f.view(),
                truth: t.view(),
                veg_mask: c.veg_mask.view(),
            })
        })
        .collect();
    if items.is_empty() {
        return Ok(None);
    }
    let reports = targets
        .iter()
        .map(|&t| build_report(&items, t, masked).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(reports))
}

fn check_lengths(set: &ForecastSet, cubes: &[Minicube], truths: &[Array4<f32>]) -> Result<()> {
    if set.forecasts.len() != cubes.len() || truths.len() != cubes.len() {
        return Err(Error::Invalid(format!(
            "{} forecasts and {} truths for {} cubes",
            set.forecasts.len(),
            truths.len(),
            cubes.len()
        )));
    }
    Ok(())
}

/// Per-cube RMSE of `target` over the zero-based lead range `leads`;
/// `None` for cubes the forecaster did not serve.
pub fn per_cube_rmse(
    set: &ForecastSet,
    cubes: &[Minicube],
    truths: &[Array4<f32>],
    target: Target,
    masked: bool,
    leads: std::ops::Range<usize>,
) -> Result<Vec<Option<f64>>> {
    check_lengths(set, cubes, truths)?;
    set.forecasts
        .iter()
        .zip(cubes.iter().zip(truths))
        .map(|(f, (c, t))| {
            f.as_ref()
                .map(|f| {
                    cube_rmse(f.view(), t.view(), masked.then_some(c.veg_mask.view()), target, leads.clone())
                        .map_err(Error::from)
                })
                .transpose()
        })
        .collect()
}

/// RMSE per lead step `1..=K` pooled over cubes, with the standard error
/// of the per-cube RMSEs at that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadCurve {
    pub forecaster: String,
    pub target: Target,
    pub masked: bool,
    pub rmse: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub fn lead_time_curve(
    set: &ForecastSet,
    cubes: &[Minicube],
    truths: &[Array4<f32>],
    target: Target,
    masked: bool,
) -> Result<Option<LeadCurve>> {
    let Some(reports) = score(set, cubes, truths, &[target], masked)? else {
        return Ok(None);
    };
    let rmse: Vec<f64> = reports[0].per_lead_time.iter().map(|l| l.rmse).collect();
    let mut stderr = Vec::with_capacity(rmse.len());
    for lead in 0..rmse.len() {
        let per: Vec<f64> = per_cube_rmse(set, cubes, truths, target, masked, lead..lead + 1)?
            .into_iter()
            .flatten()
            .collect();
        stderr.push(mean_stderr(&per).1);
    }
    Ok(Some(LeadCurve {
        forecaster: set.name.clone(),
        target,
        masked,
        rmse,
        stderr,
    }))
}

/// One forecaster's results in an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterScores {
    pub name: String,
    /// Cubes the forecaster served.
    pub cubes_scored: usize,
    /// Empty when unavailable on every cube.
    pub reports: Vec<MetricsReport>,
    pub lead_curve: Option<LeadCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub num_cubes: usize,
    pub masked: bool,
    pub curve_target: Target,
    pub forecasters: Vec<ForecasterScores>,
}

/// Scores every forecaster on `cubes` for `targets`, plus a lead-time
/// curve of `curve_target`.
pub fn evaluate(
    forecasters: &[&dyn Forecaster],
    cubes: &[Minicube],
    targets: &[Target],
    curve_target: Target,
    masked: bool,
    exec: Execution,
) -> Result<(Evaluation, Vec<ForecastSet>)> {
    if cubes.is_empty() {
        return Err(Error::Invalid("no cubes to evaluate".into()));
    }
    let truths = cubes.iter().map(truth_future).collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::new();
    let mut sets = Vec::new();
    for f in forecasters {
        let set = ForecastSet::collect(*f, cubes, exec)?;
        let reports = score(&set, cubes, &truths, targets, masked)?.unwrap_or_default();
        let lead_curve = lead_time_curve(&set, cubes, &truths, curve_target, masked)?;
        scores.push(ForecasterScores {
            name: set.name.clone(),
            cubes_scored: set.available(),
            reports,
            lead_curve,
        });
        sets.push(set);
    }
    Ok((
        Evaluation {
            num_cubes: cubes.len(),
            masked,
            curve_target,
            forecasters: scores,
        },
        sets,
    ))
}
