//! Per-frame convolutional VAE for 4-channel reflectance frames.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use vegecast_core::rng::Rng;

use crate::error::{Error, Result};
use crate::nn::{silu, Conv2d};
use crate::params::{randn, ParamStore};

pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Spatial downsampling factor is `2^num_down`.
    pub num_down: usize,
    pub latent_channels: usize,
    /// β, the KL weight.
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            in_channels: 4,
            base_width: 16,
            num_down: 2,
            latent_channels: 4,
            kl_weight: 1e-3,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.in_channels == 0 {
            bad.push("in_channels must be >= 1".to_string());
        }
        if self.base_width == 0 {
            bad.push("base_width must be >= 1".to_string());
        }
        if self.latent_channels == 0 {
            bad.push("latent_channels must be >= 1".to_string());
        }
        if !(self.kl_weight >= 0.0) {
            bad.push("kl_weight must be >= 0".to_string());
        }
        if self.num_down > 6 {
            bad.push("num_down must be <= 6".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn factor(&self) -> usize {
        1 << self.num_down
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * if level == 0 { 1 } else { 2 }
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame size {h}x{w} not divisible by downsample factor {f}")));
        }
        Ok(())
    }
}

/// Per-frame encoding: `latent` equals `mean` unless sampled.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub latent: Tensor,
    pub mean: Tensor,
    pub logvar: Tensor,
}

#[derive(Clone)]
pub struct Vae {
    pub config: VaeConfig,
    bounds: Vec<(f32, f32)>,
    enc: Vec<Conv2d>,
    enc_out: Conv2d,
    dec: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Vae {
    /// Builds a freshly initialized VAE. `bounds` are the per-channel
    /// normalized-space output limits enforced by the decoder.
    pub fn new(config: VaeConfig, bounds: Vec<(f32, f32)>, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if bounds.len() != config.in_channels || bounds.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config(format!(
                "need {} increasing output bounds, got {bounds:?}",
                config.in_channels
            )));
        }
        let c = &config;
        let g = 2f64.sqrt();
        let mut enc = vec![Conv2d::new(store, "enc.in", (c.in_channels, c.width(0)), 3, 1, 1, g, rng)?];
        for i in 0..c.num_down {
            enc.push(Conv2d::new(store, &format!("enc.down{i}"), (c.width(i), c.width(i + 1)), 3, 2, 1, g, rng)?);
            enc.push(Conv2d::new(store, &format!("enc.mix{i}"), (c.width(i + 1), c.width(i + 1)), 3, 1, 1, g, rng)?);
        }
        let top = c.width(c.num_down);
        let enc_out = Conv2d::new(store, "enc.out", (top, 2 * c.latent_channels), 3, 1, 1, 1.0, rng)?;

        let mut dec = vec![
            Conv2d::new(store, "dec.in", (c.latent_channels, top), 3, 1, 1, g, rng)?,
            Conv2d::new(store, "dec.mix", (top, top), 3, 1, 1, g, rng)?,
        ];
        for i in (0..c.num_down).rev() {
            dec.push(Conv2d::new(store, &format!("dec.up{i}"), (c.width(i + 1), c.width(i)), 3, 1, 1, g, rng)?);
        }
        let dec_out = Conv2d::new(store, "dec.out", (c.width(0), c.in_channels), 3, 1, 1, 1.0, rng)?;
        Ok(Vae {
            config,
            bounds,
            enc,
            enc_out,
            dec,
            dec_out,
        })
    }

    pub fn bounds(&self) -> &[(f32, f32)] {
        &self.bounds
    }

    /// Encodes `[N, C, H, W]` frames independently. With `sample` the latent
    /// is `mean + exp(logvar/2)·ε`, ε drawn from `rng`.
    pub fn encode(&self, frames: &Tensor, sample: bool, rng: &mut Rng) -> Result<LatentGrid> {
        let (_, c, h, w) = frames.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        self.config.check_dims(h, w)?;
        let mut x = frames.clone();
        for conv in &self.enc {
            x = silu(&conv.forward(&x)?)?;
        }
        let moments = self.enc_out.forward(&x)?;
        let lc = self.config.latent_channels;
        let mean = moments.narrow(1, 0, lc)?;
        let logvar = moments.narrow(1, lc, lc)?.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)?;
        let latent = if sample {
            let eps = randn(mean.dims(), mean.dtype(), rng)?;
            (&mean + (logvar.affine(0.5, 0.0)?.exp()? * eps)?)?
        } else {
            mean.clone()
        };
        Ok(LatentGrid { latent, mean, logvar })
    }

    /// Deterministic mean encoding.
    pub fn encode_mean(&self, frames: &Tensor) -> Result<Tensor> {
        // the rng is never touched when sample = false
        let mut unused = vegecast_core::rng::seeded(0);
        Ok(self.encode(frames, false, &mut unused)?.mean)
    }

    /// Decodes `[N, C_lat, h, w]` latents to bounded `[N, C, h·f, w·f]` frames.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latent.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "expected {} latent channels, got {c}",
                self.config.latent_channels
            )));
        }
        let mut x = silu(&self.dec[0].forward(latent)?)?;
        x = silu(&self.dec[1].forward(&x)?)?;
        for conv in &self.dec[2..] {
            let (_, _, h, w) = x.dims4()?;
            x = silu(&conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)?;
        }
        let logits = self.dec_out.forward(&x)?;
        let (lo, span) = self.bound_tensors(logits.dtype())?;
        Ok(candle_nn::ops::sigmoid(&logits)?.broadcast_mul(&span)?.broadcast_add(&lo)?)
    }

    fn bound_tensors(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let c = self.bounds.len();
        let lo: Vec<f32> = self.bounds.iter().map(|b| b.0).collect();
        let span: Vec<f32> = self.bounds.iter().map(|b| b.1 - b.0).collect();
        let mk = |v: Vec<f32>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (1, c, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok((mk(lo)?, mk(span)?))
    }
}

#[derive(Debug, Clone)]
pub struct VaeLoss {
    pub total: Tensor,
    pub recon: Tensor,
    pub kl: Tensor,
}

/// `recon = MSE`, `kl = 0.5·mean(exp(lv) + μ² − 1 − lv)`, `total = recon + β·kl`.
pub fn vae_loss(recon: &Tensor, target: &Tensor, mean: &Tensor, logvar: &Tensor, beta: f64) -> Result<VaeLoss> {
    if recon.dims() != target.dims() || mean.dims() != logvar.dims() {
        return Err(Error::Shape(format!(
            "vae_loss shapes: recon {:?}, target {:?}, mean {:?}, logvar {:?}",
            recon.dims(),
            target.dims(),
            mean.dims(),
            logvar.dims()
        )));
    }
    let rec = (recon - target)?.sqr()?.mean_all()?;
    let kl = ((logvar.exp()? + mean.sqr()?)? - logvar)?
        .affine(1.0, -1.0)?
        .mean_all()?
        .affine(0.5, 0.0)?;
    let total = (&rec + kl.affine(beta, 0.0)?)?;
    Ok(VaeLoss { total, recon: rec, kl })
}
