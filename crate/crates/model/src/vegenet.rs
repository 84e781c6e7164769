//! Transformer denoiser over latent frame sequences.
//!
//! Latents `[B, F, C, h, w]` (F = T + K) become `L = (h/P)(w/P)` tokens per
//! frame. Static environment layers become one token per spatial position
//! (E tokens), meteorology one vector per frame (M tokens). Each block runs
//! spatial attention within a frame, temporal attention along
//! `[E, Z_1..Z_F]` at every position, and a feed-forward layer, all three
//! gated by adaLN-zero modulation regressed from `M + t_embed`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use vegecast_core::rng::Rng;

use crate::error::{Error, Result};
use crate::nn::{gelu, he, layer_norm, modulate, silu, Attention, Conv2d, Linear};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VegeNetConfig {
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub meteo_vars: usize,
    /// Meteo steps per frame.
    pub meteo_cadence: usize,
    /// Land-cover ids must lie in `0..land_cover_classes`.
    pub land_cover_classes: usize,
    /// Ratio between frame and latent resolution.
    pub env_downsample: usize,
    pub env_width: usize,
    pub time_embed_dim: usize,
    pub temporal_attention: bool,
    pub spatial_attention: bool,
    pub adaln: bool,
    pub use_meteo: bool,
    pub use_env: bool,
}

impl Default for VegeNetConfig {
    fn default() -> Self {
        VegeNetConfig {
            latent_channels: 4,
            latent_height: 8,
            latent_width: 8,
            patch_size: 2,
            embed_dim: 128,
            num_blocks: 4,
            num_heads: 4,
            mlp_ratio: 4,
            context_len: 10,
            horizon: 20,
            meteo_vars: 9,
            meteo_cadence: 5,
            land_cover_classes: 5,
            env_downsample: 4,
            env_width: 32,
            time_embed_dim: 64,
            temporal_attention: true,
            spatial_attention: true,
            adaln: true,
            use_meteo: true,
            use_env: true,
        }
    }
}

impl VegeNetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let p = self.patch_size;
        if p == 0 || self.latent_height % p.max(1) != 0 || self.latent_width % p.max(1) != 0 {
            bad.push(format!(
                "latent size {}x{} not divisible by patch_size {p}",
                self.latent_height, self.latent_width
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            bad.push("embed_dim must be a positive multiple of 4".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads.max(1) != 0 {
            bad.push(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("context_len", self.context_len),
            ("horizon", self.horizon),
            ("meteo_vars", self.meteo_vars),
            ("meteo_cadence", self.meteo_cadence),
            ("land_cover_classes", self.land_cover_classes),
            ("env_downsample", self.env_downsample),
            ("env_width", self.env_width),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            bad.push("time_embed_dim must be a positive even number".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn frames(&self) -> usize {
        self.context_len + self.horizon
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.latent_height / self.patch_size) * (self.latent_width / self.patch_size)
    }

    pub fn env_channels(&self) -> usize {
        1 + self.land_cover_classes
    }

    fn patch_in_channels(&self) -> usize {
        let mut c = self.latent_channels;
        if !self.temporal_attention {
            c += self.env_channels();
        }
        if !self.adaln {
            c += self.meteo_cadence * self.meteo_vars;
        }
        c * self.patch_size * self.patch_size
    }
}

/// Zero-initialized adaLN/output layers (the normal case) or random
/// ones (for gradient checks and conditioning-path tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    AdaLnZero,
    Random,
}

impl InitScheme {
    fn gate(self, fan_in: usize) -> (Init, Init) {
        match self {
            InitScheme::AdaLnZero => (Init::Zeros, Init::Zeros),
            InitScheme::Random => (he(fan_in, 1.0), Init::Normal(0.2)),
        }
    }
}

/// `[B, F, C, h, w] → [B, F, L, C·P·P]`, patches row-major.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, f, c, h, w) = x.dims5()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch size {p}")));
    }
    let (hp, wp) = (h / p, w / p);
    Ok(x.reshape((b * f, c, hp, p, wp, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, f, hp * wp, c * p * p))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, f, l, d) = tokens.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 || l != (h / p) * (w / p) || d != c * p * p {
        return Err(Error::Shape(format!(
            "cannot unpatchify [{b}, {f}, {l}, {d}] to {c}x{h}x{w} with patch {p}"
        )));
    }
    Ok(tokens
        .reshape((b * f, h / p, w / p, c, p, p))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, f, c, h, w))?)
}

fn sincos_1d(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64)).collect();
    freqs
        .iter()
        .map(|w| (pos * w).sin())
        .chain(freqs.iter().map(|w| (pos * w).cos()))
        .collect()
}

/// Fixed `[rows·cols, dim]` encoding: half the channels encode the row,
/// half the column.
pub fn spatial_encoding(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            out.extend(sincos_1d(r as f64, dim / 2));
            out.extend(sincos_1d(c as f64, dim / 2));
        }
    }
    out
}

pub fn temporal_encoding(frames: usize, dim: usize) -> Vec<f64> {
    (0..frames).flat_map(|f| sincos_1d(f as f64, dim)).collect()
}

/// Sinusoidal diffusion-step features `[B, dim]`, cos half first.
pub fn timestep_features(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
        v.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
        v.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone)]
pub struct DitBlock {
    ada: Linear,
    spatial: Option<Attention>,
    temporal: Option<Attention>,
    ff_in: Linear,
    ff_out: Linear,
}

impl DitBlock {
    pub fn new(cfg: &VegeNetConfig, name: &str, init: InitScheme, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        let (w, b) = init.gate(d);
        let ada = Linear::with_bias_init(store, &format!("{name}.ada"), (d, 9 * d), w, b, rng)?;
        let spatial = if cfg.spatial_attention {
            Some(Attention::new(store, &format!("{name}.spatial"), d, cfg.num_heads, rng)?)
        } else {
            None
        };
        let temporal = if cfg.temporal_attention {
            Some(Attention::new(store, &format!("{name}.temporal"), d, cfg.num_heads, rng)?)
        } else {
            None
        };
        let hidden = d * cfg.mlp_ratio;
        Ok(DitBlock {
            ada,
            spatial,
            temporal,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), (d, hidden), he(d, 1.0), true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), (hidden, d), he(hidden, 1.0), true, rng)?,
        })
    }

    /// `z [B, F, L, D]`, `e [B, L, D]` (required iff temporal attention is
    /// on), `cond [B, F, D]`.
    pub fn forward(&self, z: &Tensor, e: Option<&Tensor>, cond: &Tensor) -> Result<Tensor> {
        let (b, f, l, d) = z.dims4()?;
        if cond.dims() != [b, f, d] {
            return Err(Error::Shape(format!("conditioning {:?} vs tokens {:?}", cond.dims(), z.dims())));
        }
        let m = self.ada.forward(&silu(cond)?)?.unsqueeze(2)?.chunk(9, D::Minus1)?;
        let mut x = z.clone();

        if let Some(att) = &self.spatial {
            let h = modulate(&layer_norm(&x)?, &m[0], &m[1])?;
            let h = att.forward(&h.reshape((b * f, l, d))?)?.reshape((b, f, l, d))?;
            x = (x + h.broadcast_mul(&m[2])?)?;
        }

        if let Some(att) = &self.temporal {
            let e = e.ok_or_else(|| Error::Shape("temporal attention needs E tokens".into()))?;
            if e.dims() != [b, l, d] {
                return Err(Error::Shape(format!("E tokens {:?} do not match L={l}, D={d}", e.dims())));
            }
            let h = modulate(&layer_norm(&x)?, &m[3], &m[4])?.permute((0, 2, 1, 3))?;
            let seq = Tensor::cat(&[&layer_norm(e)?.unsqueeze(2)?, &h], 2)?.reshape((b * l, f + 1, d))?;
            let h = att
                .forward(&seq)?
                .reshape((b, l, f + 1, d))?
                .narrow(2, 1, f)?
                .permute((0, 2, 1, 3))?;
            x = (x + h.broadcast_mul(&m[5])?)?;
        }

        let h = modulate(&layer_norm(&x)?, &m[6], &m[7])?;
        let h = self.ff_out.forward(&gelu(&self.ff_in.forward(&h)?)?)?;
        Ok((x + h.broadcast_mul(&m[8])?)?)
    }
}

#[derive(Clone)]
pub struct VegeNet {
    pub config: VegeNetConfig,
    patch: Linear,
    env_conv: Conv2d,
    env_patch: Conv2d,
    meteo_in: Linear,
    meteo_out: Linear,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<DitBlock>,
    final_ada: Linear,
    readout: Linear,
    pos_spatial: Tensor,
    pos_temporal: Tensor,
}

impl VegeNet {
    pub fn new(config: VegeNetConfig, init: InitScheme, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.embed_dim;
        let dtype = store.dtype();
        let g = 2f64.sqrt();
        let patch_in = c.patch_in_channels();
        let patch = Linear::new(store, "patch", (patch_in, d), he(patch_in, 1.0), true, rng)?;
        let f = c.env_downsample;
        let env_conv = Conv2d::new(store, "env.conv", (c.env_channels(), c.env_width), f, f, 0, g, rng)?;
        let p = c.patch_size;
        let env_patch = Conv2d::new(store, "env.patch", (c.env_width, d), p, p, 0, 1.0, rng)?;
        let m_in = c.meteo_cadence * c.meteo_vars;
        let meteo_in = Linear::new(store, "meteo.in", (m_in, d), he(m_in, g), true, rng)?;
        let meteo_out = Linear::new(store, "meteo.out", (d, d), he(d, 1.0), true, rng)?;
        let time_in = Linear::new(store, "time.in", (c.time_embed_dim, d), he(c.time_embed_dim, g), true, rng)?;
        let time_out = Linear::new(store, "time.out", (d, d), he(d, 1.0), true, rng)?;
        let blocks = (0..c.num_blocks)
            .map(|i| DitBlock::new(c, &format!("block{i}"), init, store, rng))
            .collect::<Result<Vec<_>>>()?;
        let (w, b) = init.gate(d);
        let final_ada = Linear::with_bias_init(store, "final.ada", (d, 2 * d), w, b, rng)?;
        let out = c.latent_channels * p * p;
        let (w, b) = init.gate(d);
        let readout = Linear::with_bias_init(store, "final.readout", (d, out), w, b, rng)?;

        let (hp, wp) = (c.latent_height / p, c.latent_width / p);
        let pos_spatial = Tensor::from_vec(spatial_encoding(hp, wp, d), (1, 1, hp * wp, d), &Device::Cpu)?.to_dtype(dtype)?;
        let pos_temporal = Tensor::from_vec(temporal_encoding(c.frames(), d), (1, c.frames(), 1, d), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(VegeNet {
            config,
            patch,
            env_conv,
            env_patch,
            meteo_in,
            meteo_out,
            time_in,
            time_out,
            blocks,
            final_ada,
            readout,
            pos_spatial,
            pos_temporal,
        })
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.blocks
    }

    /// `env [B, 2, H, W]` (elevation, land-cover id) → `[B, 1 + classes, H, W]`
    /// with the land cover one-hot expanded. Zeroed entirely when env is
    /// disabled.
    pub fn env_features(&self, env: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, ch, h, w) = env.dims4()?;
        if ch != 2 {
            return Err(Error::Shape(format!("env needs 2 layers, got {ch}")));
        }
        if h != c.latent_height * c.env_downsample || w != c.latent_width * c.env_downsample {
            return Err(Error::Shape(format!(
                "env is {h}x{w}, expected {}x{}",
                c.latent_height * c.env_downsample,
                c.latent_width * c.env_downsample
            )));
        }
        if !c.use_env {
            return Ok(Tensor::zeros((b, c.env_channels(), h, w), env.dtype(), env.device())?);
        }
        let lc = env.narrow(1, 1, 1)?;
        let ids: Vec<f64> = lc.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        if let Some(bad) = ids.iter().find(|v| !(v.fract() == 0.0 && **v >= 0.0 && (**v as usize) < c.land_cover_classes)) {
            return Err(Error::Invalid(format!(
                "land-cover id {bad} outside the {} configured classes",
                c.land_cover_classes
            )));
        }
        let mut layers = vec![env.narrow(1, 0, 1)?];
        for k in 0..c.land_cover_classes {
            layers.push(lc.eq(k as f64)?.to_dtype(env.dtype())?);
        }
        Ok(Tensor::cat(&layers, 1)?)
    }

    /// E tokens `[B, L, D]` from env features.
    pub fn embed_env(&self, env_feat: &Tensor) -> Result<Tensor> {
        let x = silu(&self.env_conv.forward(env_feat)?)?;
        let x = self.env_patch.forward(&x)?;
        let (b, d, hp, wp) = x.dims4()?;
        Ok(x.reshape((b, d, hp * wp))?.transpose(1, 2)?.contiguous()?)
    }

    /// Meteo `[B, T_meteo, M]` grouped per frame: `[B, F, cadence·M]`.
    pub fn group_meteo(&self, meteo: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, tm, m) = meteo.dims3()?;
        let f = c.frames();
        if m != c.meteo_vars || tm % f != 0 || tm / f != c.meteo_cadence {
            return Err(Error::Shape(format!(
                "meteo [{tm}, {m}] does not split into {f} frames of {} steps x {} vars",
                c.meteo_cadence, c.meteo_vars
            )));
        }
        let meteo = if c.use_meteo { meteo.clone() } else { meteo.zeros_like()? };
        Ok(meteo.reshape((b, f, c.meteo_cadence * m))?)
    }

    /// M tokens `[B, F, D]`.
    pub fn embed_meteo(&self, meteo: &Tensor) -> Result<Tensor> {
        let g = self.group_meteo(meteo)?;
        self.meteo_out.forward(&silu(&self.meteo_in.forward(&g)?)?)
    }

    pub fn embed_time(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        let feats = timestep_features(ts, self.config.time_embed_dim, dtype)?;
        self.time_out.forward(&silu(&self.time_in.forward(&feats)?)?)
    }

    /// Z tokens `[B, F, L, D]` including positional encodings.
    pub fn tokens(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.patch.forward(&patchify(x, self.config.patch_size)?)?;
        Ok(t.broadcast_add(&self.pos_spatial)?.broadcast_add(&self.pos_temporal)?)
    }

    /// Predicts the noise in the future slots of `z_all [B, T+K, C, h, w]`.
    /// Returns `[B, K, C, h, w]`.
    pub fn predict_noise(&self, z_all: &Tensor, meteo: &Tensor, env: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let c = &self.config;
        let (b, f, ch, h, w) = z_all.dims5()?;
        if f != c.frames() || ch != c.latent_channels || h != c.latent_height || w != c.latent_width {
            return Err(Error::Shape(format!(
                "latents [{f}, {ch}, {h}, {w}] do not match config [{}, {}, {}, {}]",
                c.frames(),
                c.latent_channels,
                c.latent_height,
                c.latent_width
            )));
        }
        if ts.len() != b || meteo.dim(0)? != b || env.dim(0)? != b {
            return Err(Error::Shape(format!("batch size mismatch (latents {b}, timesteps {})", ts.len())));
        }
        let dtype = z_all.dtype();
        let env_feat = self.env_features(env)?;
        let grouped = self.group_meteo(meteo)?;
        let t_emb = self.embed_time(ts, dtype)?.unsqueeze(1)?;

        let mut parts = vec![z_all.clone()];
        if !c.temporal_attention {
            let k = c.env_downsample;
            let pooled = env_feat.avg_pool2d(k)?.unsqueeze(1)?;
            parts.push(pooled.broadcast_as((b, f, c.env_channels(), h, w))?.contiguous()?);
        }
        if !c.adaln {
            let mc = grouped.dim(2)?;
            parts.push(grouped.unsqueeze(3)?.unsqueeze(4)?.broadcast_as((b, f, mc, h, w))?.contiguous()?);
        }
        let x = if parts.len() == 1 { parts.pop().unwrap() } else { Tensor::cat(&parts, 2)? };
        let mut tokens = self.tokens(&x)?;

        let cond = if c.adaln {
            let m_tok = self.meteo_out.forward(&silu(&self.meteo_in.forward(&grouped)?)?)?;
            m_tok.broadcast_add(&t_emb)?
        } else {
            t_emb.broadcast_as((b, f, c.embed_dim))?.contiguous()?
        };
        let e_tok = if c.temporal_attention {
            Some(self.embed_env(&env_feat)?)
        } else {
            None
        };
        for blk in &self.blocks {
            tokens = blk.forward(&tokens, e_tok.as_ref(), &cond)?;
        }
        let mods = self.final_ada.forward(&silu(&cond)?)?.unsqueeze(2)?.chunk(2, D::Minus1)?;
        let out = self.readout.forward(&modulate(&layer_norm(&tokens)?, &mods[0], &mods[1])?)?;
        let out = unpatchify(&out, c.patch_size, ch, h, w)?;
        Ok(out.narrow(1, c.context_len, c.horizon)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;
    use vegecast_core::rng::seeded;

    pub(crate) fn tiny(dim: usize) -> VegeNetConfig {
        VegeNetConfig {
            latent_channels: 2,
            latent_height: 4,
            latent_width: 4,
            patch_size: 2,
            embed_dim: dim,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2,
            context_len: 2,
            horizon: 2,
            meteo_vars: 3,
            meteo_cadence: 2,
            land_cover_classes: 3,
            env_downsample: 2,
            env_width: 4,
            time_embed_dim: 8,
            ..Default::default()
        }
    }

    struct Inputs {
        z: Tensor,
        meteo: Tensor,
        env: Tensor,
    }

    fn inputs(cfg: &VegeNetConfig, b: usize, dtype: DType, rng: &mut Rng) -> Inputs {
        let z = randn(&[b, cfg.frames(), cfg.latent_channels, cfg.latent_height, cfg.latent_width], dtype, rng).unwrap();
        let meteo = randn(&[b, cfg.frames() * cfg.meteo_cadence, cfg.meteo_vars], dtype, rng).unwrap();
        let (h, w) = (cfg.latent_height * cfg.env_downsample, cfg.latent_width * cfg.env_downsample);
        let elev = randn(&[b, 1, h, w], dtype, rng).unwrap();
        let ids: Vec<f64> = (0..b * h * w).map(|i| (i % cfg.land_cover_classes) as f64).collect();
        let lc = Tensor::from_vec(ids, (b, 1, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        let env = Tensor::cat(&[elev, lc], 1).unwrap();
        Inputs { z, meteo, env }
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    fn max_dev(a: &Tensor, b: &Tensor) -> f64 {
        flat(a).iter().zip(flat(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn patchify_round_trip_and_token_count() {
        let x = randn(&[2, 3, 4, 8, 8], DType::F32, &mut seeded(0)).unwrap();
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.dims(), &[2, 3, 16, 16]);
        assert_eq!(flat(&unpatchify(&t, 2, 4, 8, 8).unwrap()), flat(&x));
        assert!(patchify(&x, 3).is_err());
        // first token holds the top-left 2x2 patch of every channel
        let v = flat(&x);
        let tok = flat(&t.narrow(2, 0, 1).unwrap().narrow(1, 0, 1).unwrap().narrow(0, 0, 1).unwrap());
        assert_eq!(tok[0], v[0]);
        assert_eq!(tok[1], v[1]);
        assert_eq!(tok[2], v[8]);
    }

    #[test]
    fn identical_frames_differ_only_by_temporal_encoding() {
        let cfg = tiny(16);
        let mut store = ParamStore::new(DType::F64);
        let net = VegeNet::new(cfg.clone(), InitScheme::AdaLnZero, &mut store, &mut seeded(1)).unwrap();
        let frame = randn(&[1, 1, 2, 4, 4], DType::F64, &mut seeded(2)).unwrap();
        let x = Tensor::cat(&[&frame; 4], 1).unwrap();
        let tok = net.tokens(&x).unwrap();
        let pt = Tensor::from_vec(temporal_encoding(4, 16), (1, 4, 1, 16), &Device::Cpu).unwrap();
        let stripped = tok.broadcast_sub(&pt).unwrap();
        let f0 = stripped.narrow(1, 0, 1).unwrap();
        for j in 1..4 {
            assert!(max_dev(&f0, &stripped.narrow(1, j, 1).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn env_embedding_contract() {
        let cfg = tiny(16);
        let mut store = ParamStore::new(DType::F32);
        let net = VegeNet::new(cfg.clone(), InitScheme::AdaLnZero, &mut store, &mut seeded(1)).unwrap();
        let elev = Tensor::full(0.4f32, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let lc = Tensor::full(2f32, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let env = Tensor::cat(&[&elev, &lc], 1).unwrap();
        let e = net.embed_env(&net.env_features(&env).unwrap()).unwrap();
        assert_eq!(e.dims(), &[1, cfg.tokens_per_frame(), 16]);
        let first = e.narrow(1, 0, 1).unwrap();
        for l in 1..cfg.tokens_per_frame() {
            assert!(max_dev(&first, &e.narrow(1, l, 1).unwrap()) < 1e-6);
        }
        let bad = Tensor::cat(&[&elev, &Tensor::full(7f32, (1, 1, 8, 8), &Device::Cpu).unwrap()], 1).unwrap();
        assert!(net.env_features(&bad).is_err());
    }

    #[test]
    fn meteo_embedding_contract() {
        let cfg = VegeNetConfig {
            embed_dim: 16,
            num_heads: 2,
            context_len: 10,
            horizon: 20,
            meteo_cadence: 5,
            ..tiny(16)
        };
        let mut store = ParamStore::new(DType::F64);
        let net = VegeNet::new(cfg.clone(), InitScheme::AdaLnZero, &mut store, &mut seeded(3)).unwrap();
        let zero = Tensor::zeros((1, 150, 3), DType::F64, &Device::Cpu).unwrap();
        let m = net.embed_meteo(&zero).unwrap();
        assert_eq!(m.dims(), &[1, 30, 16]);
        let r0 = m.narrow(1, 0, 1).unwrap();
        for j in 1..30 {
            assert_eq!(flat(&r0), flat(&m.narrow(1, j, 1).unwrap()));
        }
        let x = randn(&[1, 150, 3], DType::F64, &mut seeded(4)).unwrap();
        let swapped = Tensor::cat(&[x.narrow(2, 1, 1).unwrap(), x.narrow(2, 0, 1).unwrap(), x.narrow(2, 2, 1).unwrap()], 2).unwrap();
        assert!(max_dev(&net.embed_meteo(&x).unwrap(), &net.embed_meteo(&swapped).unwrap()) > 1e-6);
        assert!(net.embed_meteo(&randn(&[1, 149, 3], DType::F64, &mut seeded(4)).unwrap()).is_err());
    }

    #[test]
    fn fresh_blocks_are_exact_identity() {
        for cfg in [tiny(16), VegeNetConfig { num_blocks: 4, ..Default::default() }] {
            let mut store = ParamStore::new(DType::F32);
            let mut rng = seeded(5);
            let net = VegeNet::new(cfg.clone(), InitScheme::AdaLnZero, &mut store, &mut rng).unwrap();
            let (f, l, d) = (cfg.frames(), cfg.tokens_per_frame(), cfg.embed_dim);
            let z = randn(&[2, f, l, d], DType::F32, &mut rng).unwrap();
            let e = randn(&[2, l, d], DType::F32, &mut rng).unwrap();
            let cond = randn(&[2, f, d], DType::F32, &mut rng).unwrap();
            let mut x = z.clone();
            for blk in net.blocks() {
                x = blk.forward(&x, Some(&e), &cond).unwrap();
            }
            assert_eq!(max_dev(&x, &z), 0.0);
        }
    }

    #[test]
    fn init_output_ignores_meteo() {
        let cfg = tiny(16);
        let mut store = ParamStore::new(DType::F32);
        let mut rng = seeded(6);
        let net = VegeNet::new(cfg.clone(), InitScheme::AdaLnZero, &mut store, &mut rng).unwrap();
        let a = inputs(&cfg, 2, DType::F32, &mut rng);
        let other = randn(a.meteo.dims(), DType::F32, &mut rng).unwrap();
        let y1 = net.predict_noise(&a.z, &a.meteo, &a.env, &[3, 7]).unwrap();
        let y2 = net.predict_noise(&a.z, &other, &a.env, &[3, 7]).unwrap();
        assert_eq!(y1.dims(), &[2, cfg.horizon, 2, 4, 4]);
        assert_eq!(flat(&y1), flat(&y2));
    }

    fn random_block(cfg: &VegeNetConfig) -> DitBlock {
        let mut store = ParamStore::new(DType::F64);
        DitBlock::new(cfg, "b", InitScheme::Random, &mut store, &mut seeded(8)).unwrap()
    }

    #[test]
    fn meteo_perturbation_locality() {
        let mut rng = seeded(9);
        let (f, l, d) = (4, 4, 16);
        let z = randn(&[1, f, l, d], DType::F64, &mut rng).unwrap();
        let e = randn(&[1, l, d], DType::F64, &mut rng).unwrap();
        let cond = randn(&[1, f, d], DType::F64, &mut rng).unwrap();
        let j = 1;
        let bump = Tensor::cat(
            &[
                Tensor::zeros((1, j, d), DType::F64, &Device::Cpu).unwrap(),
                Tensor::ones((1, 1, d), DType::F64, &Device::Cpu).unwrap(),
                Tensor::zeros((1, f - j - 1, d), DType::F64, &Device::Cpu).unwrap(),
            ],
            1,
        )
        .unwrap();
        let cond2 = (&cond + bump).unwrap();

        let full = random_block(&tiny(d));
        let a = full.forward(&z, Some(&e), &cond).unwrap();
        let b = full.forward(&z, Some(&e), &cond2).unwrap();
        // with temporal attention every frame attends to frame j
        for k in 0..f {
            assert!(max_dev(&a.narrow(1, k, 1).unwrap(), &b.narrow(1, k, 1).unwrap()) > 1e-9);
        }

        let local = random_block(&VegeNetConfig { temporal_attention: false, ..tiny(d) });
        let a = local.forward(&z, None, &cond).unwrap();
        let b = local.forward(&z, None, &cond2).unwrap();
        for k in 0..f {
            let dev = max_dev(&a.narrow(1, k, 1).unwrap(), &b.narrow(1, k, 1).unwrap());
            assert_eq!(dev > 0.0, k == j, "frame {k}");
        }
    }

    #[test]
    fn env_perturbation_locality_without_spatial_attention() {
        let mut rng = seeded(10);
        let (f, l, d) = (3, 4, 16);
        let z = randn(&[1, f, l, d], DType::F64, &mut rng).unwrap();
        let e = randn(&[1, l, d], DType::F64, &mut rng).unwrap();
        let cond = randn(&[1, f, d], DType::F64, &mut rng).unwrap();
        let pos = 2;
        let mut ev = flat(&e);
        for v in &mut ev[pos * d..(pos + 1) * d] {
            *v += 0.5;
        }
        let e2 = Tensor::from_vec(ev, (1, l, d), &Device::Cpu).unwrap();
        let blk = random_block(&VegeNetConfig { spatial_attention: false, ..tiny(d) });
        let a = blk.forward(&z, Some(&e), &cond).unwrap();
        let b = blk.forward(&z, Some(&e2), &cond).unwrap();
        for p in 0..l {
            let dev = max_dev(&a.narrow(2, p, 1).unwrap(), &b.narrow(2, p, 1).unwrap());
            assert_eq!(dev > 0.0, p == pos, "position {p}");
        }
        assert!(blk.forward(&z, Some(&e.narrow(1, 0, 3).unwrap()), &cond).is_err());
    }

    #[test]
    fn conditioning_paths_are_reachable() {
        let cfg = tiny(16);
        let mut store = ParamStore::new(DType::F64);
        let mut rng = seeded(11);
        let net = VegeNet::new(cfg.clone(), InitScheme::Random, &mut store, &mut rng).unwrap();
        let a = inputs(&cfg, 1, DType::F64, &mut rng);
        let base = net.predict_noise(&a.z, &a.meteo, &a.env, &[4]).unwrap();
        let no_meteo = net.predict_noise(&a.z, &a.meteo.zeros_like().unwrap(), &a.env, &[4]).unwrap();
        let no_env = net.predict_noise(&a.z, &a.meteo, &a.env.zeros_like().unwrap(), &[4]).unwrap();
        assert!(max_dev(&base, &no_meteo) > 1e-6);
        assert!(max_dev(&base, &no_env) > 1e-6);
        let again = net.predict_noise(&a.z, &a.meteo, &a.env, &[4]).unwrap();
        assert_eq!(flat(&base), flat(&again));
    }

    #[test]
    fn ablated_configs_run() {
        let mut rng = seeded(12);
        for (t, s, ada, m, e) in [
            (false, true, true, true, true),
            (true, false, true, true, true),
            (true, true, false, true, true),
            (true, true, true, false, false),
            (false, true, false, true, true),
        ] {
            let cfg = VegeNetConfig {
                temporal_attention: t,
                spatial_attention: s,
                adaln: ada,
                use_meteo: m,
                use_env: e,
                ..tiny(16)
            };
            let mut store = ParamStore::new(DType::F32);
            let net = VegeNet::new(cfg.clone(), InitScheme::Random, &mut store, &mut rng).unwrap();
            let a = inputs(&cfg, 2, DType::F32, &mut rng);
            let y = net.predict_noise(&a.z, &a.meteo, &a.env, &[0, 1]).unwrap();
            assert_eq!(y.dims(), &[2, 2, 2, 4, 4]);
            assert!(flat(&y).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny(16);
        let mut store = ParamStore::new(DType::F64);
        let mut rng = seeded(13);
        let net = VegeNet::new(cfg.clone(), InitScheme::Random, &mut store, &mut rng).unwrap();
        let a = inputs(&cfg, 1, DType::F64, &mut rng);
        let loss = || {
            net.predict_noise(&a.z, &a.meteo, &a.env, &[5])
                .unwrap()
                .sqr()
                .unwrap()
                .mean_all()
                .unwrap()
        };
        let r = crate::gradcheck::check_gradients(&store, 3, 1e-5, 1e-3, 13, || Ok(loss())).unwrap();
        assert!(r.pass_rate() >= 0.95, "{r:?}");
    }
}
