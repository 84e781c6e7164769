//! Forecasting: context preparation, the ancestral reverse chain, decoding
//! and ensembles.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};
use vegecast_core::exec::{try_map_range, Execution};
use vegecast_core::rng::{derive_seed, seeded, Rng};
use vegecast_core::cube::save_frames_only;
use vegecast_core::Minicube;

use crate::checkpoint::{DenoiserCheckpoint, VaeCheckpoint};
use crate::data::{context_frames, to_array4, to_tensor};
use crate::diffusion::{denoise_step, init_future_noise, Residual, ReverseMode, StepOptions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    /// Respace the chain to this many steps.
    pub num_steps: Option<usize>,
    /// Past-mean weight; defaults to the one recorded at training.
    pub w: Option<f64>,
    /// Accept a `w` different from the trained one.
    pub allow_w_override: bool,
    /// When false, σ_t is forced to zero.
    pub stochastic: bool,
    pub reverse_mode: ReverseMode,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            num_steps: None,
            w: None,
            allow_w_override: false,
            stochastic: true,
            reverse_mode: ReverseMode::Posterior,
        }
    }
}

impl SampleOptions {
    pub fn weight(&self, ck: &DenoiserCheckpoint) -> Result<f64> {
        match self.w {
            None => Ok(ck.noise_init_weight),
            Some(w) if w == ck.noise_init_weight || self.allow_w_override => Ok(w),
            Some(w) => Err(Error::Config(format!(
                "w={w} differs from the trained w={}; set allow_w_override to use it",
                ck.noise_init_weight
            ))),
        }
    }

    pub fn steps(&self, ck: &DenoiserCheckpoint) -> usize {
        self.num_steps.unwrap_or(ck.schedule.num_steps())
    }
}

/// Model inputs derived from a cube's context window.
#[derive(Clone)]
pub struct Conditioning {
    /// Scaled mean latents of the T context frames `[T, C, h, w]`.
    pub past: Tensor,
    pub meteo: Tensor,
    pub env: Tensor,
}

pub fn check_compatible(vae: &VaeCheckpoint, den: &DenoiserCheckpoint) -> Result<()> {
    let h = vae.hash()?;
    if h != den.vae_hash {
        return Err(Error::Invalid(format!(
            "denoiser was trained on VAE {}, got VAE {h}",
            den.vae_hash
        )));
    }
    Ok(())
}

/// Reads only `frames[0..T]` (and the matching cloud mask) of `cube`.
pub fn prepare_context(cube: &Minicube, vae: &VaeCheckpoint, den: &DenoiserCheckpoint) -> Result<Conditioning> {
    let c = &den.net.config;
    let f = vae.vae.config.factor();
    if cube.height() != c.latent_height * f || cube.width() != c.latent_width * f {
        return Err(Error::Shape(format!(
            "cube is {}x{}, model expects {}x{}",
            cube.height(),
            cube.width(),
            c.latent_height * f,
            c.latent_width * f
        )));
    }
    let ctx = context_frames(cube, c.context_len)?;
    let norm = den.norm.normalize_frames(ctx.view());
    let past = (vae.vae.encode_mean(&to_tensor(norm.view(), DType::F32)?)?.detach() * den.latent_scale)?;
    Ok(Conditioning {
        past,
        meteo: to_tensor(den.norm.normalize_meteo(cube.meteo.view()).view(), DType::F32)?,
        env: to_tensor(den.norm.normalize_env(cube.env.view()).view(), DType::F32)?,
    })
}

/// Runs the reverse chain from the `w`-mixture initialization at the
/// last step down to step 0. The chain itself runs on the residual
/// around the past mean (see [`Residual`]); the network always sees
/// latent-space inputs. Returns scaled future latents `[K, C, h, w]`.
pub fn sample_latents(
    ck: &DenoiserCheckpoint,
    past: &Tensor,
    meteo: &Tensor,
    env: &Tensor,
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Tensor> {
    let w = opts.weight(ck)?;
    let n = opts.steps(ck);
    let sched = if n == ck.schedule.num_steps() {
        ck.schedule.clone()
    } else {
        ck.schedule.respace(n)?
    };
    let k = ck.net.config.horizon;
    let res = Residual::new(past, k, w)?;
    let z_init = init_future_noise(past, k, w, rng)?;
    // at w = 1 the mixture is the bare anchor and the residual stays zero
    let mut u = if w < 1.0 { res.to_residual(&z_init)? } else { z_init.zeros_like()? };
    let past_b = past.unsqueeze(0)?;
    let meteo_b = meteo.unsqueeze(0)?;
    let env_b = env.unsqueeze(0)?;
    let step = StepOptions {
        mode: opts.reverse_mode,
        stochastic: opts.stochastic,
    };
    for i in (0..n).rev() {
        let z = res.from_residual(&u)?;
        let z_all = Tensor::cat(&[&past_b, &z.unsqueeze(0)?], 1)?;
        let eps = ck
            .net
            .predict_noise(&z_all, &meteo_b, &env_b, &[sched.timesteps[i]])?
            .squeeze(0)?;
        // detach so the chain does not accumulate an autograd graph
        u = denoise_step(&u, &eps.detach(), i, &sched, step, rng)?;
    }
    res.from_residual(&u)
}

/// Unscales, decodes and denormalizes latents; clamps to `[0, 1]`.
pub fn decode_latents(den: &DenoiserCheckpoint, vae: &VaeCheckpoint, z: &Tensor) -> Result<Array4<f32>> {
    let frames = vae.vae.decode(&(z / den.latent_scale)?)?;
    let mut out = den.norm.denormalize_frames(to_array4(&frames)?.view());
    out.mapv_inplace(|v| if v.is_nan() { v } else { v.clamp(0.0, 1.0) });
    Ok(out)
}

/// Forecast of the `K` future frames `[K, 4, H, W]` in reflectance units.
pub fn forecast(
    cube: &Minicube,
    vae: &VaeCheckpoint,
    den: &DenoiserCheckpoint,
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Array4<f32>> {
    check_compatible(vae, den)?;
    let cond = prepare_context(cube, vae, den)?;
    forecast_from(&cond, vae, den, opts, rng)
}

pub fn forecast_from(
    cond: &Conditioning,
    vae: &VaeCheckpoint,
    den: &DenoiserCheckpoint,
    opts: &SampleOptions,
    rng: &mut Rng,
) -> Result<Array4<f32>> {
    let z = sample_latents(den, &cond.past, &cond.meteo, &cond.env, opts, rng)?;
    decode_latents(den, vae, &z)
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Array4<f32>>,
    pub mean: Array4<f32>,
    /// Per-pixel population standard deviation across members.
    pub std: Array4<f32>,
    pub seeds: Vec<u64>,
}

/// `n` members, member `i` seeded with `derive_seed(root_seed, i)`.
pub fn ensemble_forecast(
    cube: &Minicube,
    vae: &VaeCheckpoint,
    den: &DenoiserCheckpoint,
    n: usize,
    opts: &SampleOptions,
    root_seed: u64,
    exec: Execution,
) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::Invalid(format!("an ensemble needs at least 2 members, got {n}")));
    }
    check_compatible(vae, den)?;
    let cond = prepare_context(cube, vae, den)?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(root_seed, i)).collect();
    let members = try_map_range(n, exec, |i| forecast_from(&cond, vae, den, opts, &mut seeded(seeds[i])))?;
    let (mean, std) = moments(&members);
    Ok(Ensemble {
        members,
        mean,
        std,
        seeds,
    })
}

fn moments(members: &[Array4<f32>]) -> (Array4<f32>, Array4<f32>) {
    let views: Vec<_> = members.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).expect("members share a shape");
    let mean = stacked.mean_axis(Axis(0)).expect("non-empty");
    let std = stacked.std_axis(Axis(0), 0.0);
    (mean, std)
}

/// What a forecast was produced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastProvenance {
    pub vae_hash: String,
    pub denoiser_hash: String,
    pub seeds: Vec<u64>,
    pub num_steps: usize,
    pub w: f64,
    pub stochastic: bool,
}

impl ForecastProvenance {
    pub fn new(vae: &VaeCheckpoint, den: &DenoiserCheckpoint, opts: &SampleOptions, seeds: Vec<u64>) -> Result<Self> {
        Ok(ForecastProvenance {
            vae_hash: vae.hash()?,
            denoiser_hash: den.hash()?,
            seeds,
            num_steps: opts.steps(den),
            w: opts.weight(den)?,
            stochastic: opts.stochastic,
        })
    }
}

/// Writes `frames` as a frames-only minicube directory with the
/// provenance next to it in `provenance.json`.
pub fn save_forecast(dir: &Path, frames: &Array4<f32>, prov: &ForecastProvenance) -> Result<()> {
    save_frames_only(frames, dir)?;
    let path = dir.join("provenance.json");
    let json = serde_json::to_string_pretty(prov).expect("provenance serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}
