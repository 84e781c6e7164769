//! Meteorological what-if runs: rescale one variable, forecast again with
//! the same random stream, and compare vegetation indices.

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use vegecast_core::cube::{meteo_index, METEO_NAMES};
use vegecast_core::indices::ndvi;
use vegecast_core::rng::{derive_seed, seeded};
use vegecast_core::Minicube;
use vegecast_model::{DenoiserCheckpoint, SampleOptions, VaeCheckpoint};

use crate::error::{Error, Result};
use crate::stats::{sign_test, SignTest};

/// Copy of `cube` with meteo variable `variable` multiplied by `scale` at
/// every time step (raw units, before any normalization).
pub fn scale_meteo(cube: &Minicube, variable: &str, scale: f64) -> Result<Minicube> {
    let idx = meteo_index(variable).ok_or_else(|| {
        Error::Config(format!("unknown meteo variable `{variable}`; expected one of {METEO_NAMES:?}"))
    })?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("scale must be positive and finite, got {scale}")));
    }
    let mut out = cube.clone();
    if scale != 1.0 {
        out.meteo.column_mut(idx).mapv_inplace(|v| (v as f64 * scale) as f32);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct WhatIf {
    pub variable: String,
    pub scale: f64,
    /// Forecast under the scaled meteorology `[K, 4, H, W]`.
    pub forecast: Array4<f32>,
    /// Forecast under the original meteorology, same seed.
    pub reference: Array4<f32>,
    /// NDVI(scaled) − NDVI(original) per lead `[K, H, W]`.
    pub ndvi_delta: Array3<f32>,
}

impl WhatIf {
    /// Mean delta over vegetated pixels at zero-based `lead`.
    pub fn mean_delta(&self, veg_mask: &ndarray::Array2<bool>, lead: usize) -> f64 {
        let d = self.ndvi_delta.index_axis(Axis(0), lead);
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (v, &m) in d.iter().zip(veg_mask.iter()) {
            if m {
                sum += *v as f64;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn max_abs_delta(&self) -> f32 {
        self.ndvi_delta.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

pub fn what_if_meteo(
    cube: &Minicube,
    vae: &VaeCheckpoint,
    den: &DenoiserCheckpoint,
    variable: &str,
    scale: f64,
    opts: &SampleOptions,
    seed: u64,
) -> Result<WhatIf> {
    let scaled = scale_meteo(cube, variable, scale)?;
    let reference = vegecast_model::forecast(cube, vae, den, opts, &mut seeded(seed))?;
    let forecast = vegecast_model::forecast(&scaled, vae, den, opts, &mut seeded(seed))?;
    let ndvi_delta = ndvi(forecast.view()) - ndvi(reference.view());
    Ok(WhatIf {
        variable: variable.to_string(),
        scale,
        forecast,
        reference,
        ndvi_delta,
    })
}

/// Outcome of one scale over a cube set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfSummary {
    pub variable: String,
    pub scale: f64,
    /// Mean vegetated-pixel NDVI delta per lead, averaged over cubes.
    pub mean_delta_per_lead: Vec<f64>,
    /// Per-cube mean delta at the final lead.
    pub final_lead_deltas: Vec<f64>,
    pub final_lead_mean: f64,
    pub sign: SignTest,
    pub max_abs_delta: f64,
}

/// Runs [`what_if_meteo`] for each scale on every cube; cube `i` uses
/// `derive_seed(root_seed, i)` for both its runs.
pub fn what_if_study(
    cubes: &[Minicube],
    vae: &VaeCheckpoint,
    den: &DenoiserCheckpoint,
    variable: &str,
    scales: &[f64],
    opts: &SampleOptions,
    root_seed: u64,
) -> Result<Vec<WhatIfSummary>> {
    if cubes.is_empty() {
        return Err(Error::Invalid("what-if study needs at least one cube".into()));
    }
    let k = den.net.config.horizon;
    let mut out = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut per_lead = vec![0.0; k];
        let mut finals = Vec::with_capacity(cubes.len());
        let mut max_abs = 0.0f64;
        for (i, c) in cubes.iter().enumerate() {
            let w = what_if_meteo(c, vae, den, variable, scale, opts, derive_seed(root_seed, i as u64))?;
            for (lead, acc) in per_lead.iter_mut().enumerate() {
                *acc += w.mean_delta(&c.veg_mask, lead) / cubes.len() as f64;
            }
            finals.push(w.mean_delta(&c.veg_mask, k - 1));
            max_abs = max_abs.max(w.max_abs_delta() as f64);
        }
        out.push(WhatIfSummary {
            variable: variable.to_string(),
            scale,
            mean_delta_per_lead: per_lead,
            final_lead_mean: finals.iter().sum::<f64>() / finals.len() as f64,
            sign: sign_test(&finals),
            final_lead_deltas: finals,
            max_abs_delta: max_abs,
        });
    }
    Ok(out)
}
