//! Two-stage training: VAE (pretrain, fine-tune), then the denoiser on
//! cached latents of the frozen VAE.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use vegecast_core::metrics::rmse;
use vegecast_core::preprocess::{compute_norm_stats, Augmentation, NormStats};
use vegecast_core::rng::{derive_seed, seeded, Rng};
use vegecast_core::Minicube;

use crate::checkpoint::{DenoiserCheckpoint, TrainingRecord, VaeCheckpoint};
use crate::data::{to_array4, to_tensor, training_frames, PreparedCube};
use crate::diffusion::{forward_noise_batch, NoiseSchedule, Residual, ScheduleConfig};
use crate::error::{Error, Result};
use crate::params::{randn, ParamStore};
use crate::sampler::{sample_latents, SampleOptions};
use crate::vae::{vae_loss, VaeConfig};
use crate::vegenet::VegeNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    VaePretrain,
    VaeFinetune,
    Denoiser,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::VaePretrain => "vae_pretrain",
            Stage::VaeFinetune => "vae_finetune",
            Stage::Denoiser => "denoiser",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments, no weight decay.
    Adam,
    /// Adaptive moments with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps (across epochs).
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Validate every this many steps; `None` validates after each epoch.
    pub val_every_steps: Option<usize>,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    /// VAE stages: frames drawn per cube per epoch (`None` = all).
    pub frames_per_cube: Option<usize>,
    /// Denoiser: select by decoded forecast RMSE (true) or eps-MSE (false).
    pub decode_eval: bool,
    /// Denoiser: reverse steps of the validation sampler.
    pub val_sampling_steps: usize,
    /// Denoiser: past-mean weight `w` used at train-time validation and
    /// recorded for sampling.
    pub noise_init_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Denoiser)
    }
}

impl TrainConfig {
    /// Desk-scale defaults: the published rates (4.5e-6 / 2e-4) assume far
    /// larger batches and corpora, so they are scaled up to 1e-4 / 3e-4.
    pub fn for_stage(stage: Stage) -> Self {
        let vae = stage != Stage::Denoiser;
        TrainConfig {
            stage,
            batch_size: 16,
            learning_rate: if vae { 1e-4 } else { 3e-4 },
            optimizer: if vae { OptimizerKind::Adam } else { OptimizerKind::AdamW },
            weight_decay: if vae { 0.0 } else { 0.01 },
            epochs: if vae { 20 } else { 200 },
            max_steps: None,
            seed: 0,
            val_every_steps: None,
            patience: None,
            frames_per_cube: if vae { Some(4) } else { None },
            decode_eval: true,
            val_sampling_steps: 10,
            noise_init_weight: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate must be finite and >= 0".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            bad.push("weight_decay must be >= 0".to_string());
        }
        if self.optimizer == OptimizerKind::Adam && self.weight_decay != 0.0 {
            bad.push("weight_decay requires optimizer adam_w".to_string());
        }
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".to_string());
        }
        if self.max_steps == Some(0) || self.val_every_steps == Some(0) || self.frames_per_cube == Some(0) {
            bad.push("max_steps, val_every_steps and frames_per_cube must be >= 1 when set".to_string());
        }
        if self.val_sampling_steps == 0 {
            bad.push("val_sampling_steps must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.noise_init_weight) {
            bad.push("noise_init_weight must lie in [0, 1]".to_string());
        } else if self.stage == Stage::Denoiser && self.noise_init_weight == 1.0 {
            bad.push("noise_init_weight 1 leaves nothing to train; use w < 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn optimizer(&self, store: &ParamStore) -> Result<AdamW> {
        let params = ParamsAdamW {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        };
        Ok(AdamW::new(store.vars(), params)?)
    }

    fn record(&self, run: &RunState, metric_name: &str, init_from: Option<String>) -> TrainingRecord {
        TrainingRecord {
            stage: self.stage.name().into(),
            optimizer: match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::AdamW => "adam_w".into(),
            },
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            epochs_run: run.epochs_run,
            steps_run: run.step,
            metric_name: metric_name.into(),
            best_metric: run.best_metric,
            best_epoch: run.best_epoch,
            best_step: run.best_step,
            init_from,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
    pub lr: f64,
    pub wall_time_s: f64,
}

pub trait LogSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()>;
}

/// Discards records.
pub struct NoLog;

impl LogSink for NoLog {
    fn record(&mut self, _: &LogRecord) -> Result<()> {
        Ok(())
    }
}

impl LogSink for Vec<LogRecord> {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Line-delimited JSON log file.
pub struct JsonlLog {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlLog {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }
}

impl LogSink for JsonlLog {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("log record serializes");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

struct RunState {
    start: Instant,
    step: usize,
    epochs_run: usize,
    best_metric: f64,
    best_epoch: usize,
    best_step: usize,
    best_params: Option<BTreeMap<String, Vec<f32>>>,
    stale: usize,
}

impl RunState {
    fn new() -> Self {
        RunState {
            start: Instant::now(),
            step: 0,
            epochs_run: 0,
            best_metric: f64::INFINITY,
            best_epoch: 0,
            best_step: 0,
            best_params: None,
            stale: 0,
        }
    }

    /// Returns true when patience is exhausted.
    fn observe(&mut self, metric: f64, epoch: usize, store: &ParamStore, patience: Option<usize>) -> Result<bool> {
        if metric < self.best_metric || self.best_params.is_none() {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.best_step = self.step;
            self.best_params = Some(store.snapshot()?);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(patience.is_some_and(|p| self.stale >= p))
    }

    fn wall(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(loss: f64, step: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, batch })
    }
}

/// Gap-fills every cube the way the model sees it (see [`training_frames`]).
pub fn fill_all(cubes: &[Minicube]) -> Result<Vec<Array4<f32>>> {
    cubes.iter().map(training_frames).collect()
}

/// Mean reconstruction MSE, in reflectance units, of mean-encoded frames.
/// `frames` are gap-filled reflectances.
pub fn vae_validation_mse(ck: &VaeCheckpoint, frames: &[Array4<f32>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in frames {
        let x = to_tensor(ck.norm.normalize_frames(f.view()).view(), DType::F32)?;
        let rec = ck.norm.denormalize_frames(to_array4(&ck.vae.decode(&ck.vae.encode_mean(&x)?)?)?.view());
        sum += rec.iter().zip(f.iter()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
        n += f.len();
    }
    if n == 0 {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Trains the VAE. `init` continues from a pretrained checkpoint (its
/// normalization is kept so the decoder bounds stay valid); otherwise
/// statistics are computed from `train`.
pub fn train_vae(
    train: &[Minicube],
    val: &[Minicube],
    vae_cfg: &VaeConfig,
    cfg: &TrainConfig,
    init: Option<&VaeCheckpoint>,
    log: &mut dyn LogSink,
) -> Result<VaeCheckpoint> {
    cfg.validate()?;
    if !matches!(cfg.stage, Stage::VaePretrain | Stage::VaeFinetune) {
        return Err(Error::Config(format!("train_vae called with stage {}", cfg.stage.name())));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("VAE training needs non-empty train and validation sets".into()));
    }
    if cfg.stage == Stage::VaeFinetune && init.is_none() {
        return Err(Error::Config("vae_finetune needs a pretrained checkpoint".into()));
    }
    let filled = fill_all(train)?;
    let ck = match init {
        Some(ck) => {
            if &ck.vae.config != vae_cfg {
                crate::checkpoint::check_drift(&ck.vae.config, vae_cfg)?;
            }
            let fresh = VaeCheckpoint::init(ck.vae.config.clone(), ck.norm.clone(), cfg.seed)?;
            fresh.store.restore(&ck.store.snapshot()?)?;
            fresh
        }
        None => {
            let refs: Vec<&Minicube> = train.iter().collect();
            let norm = compute_norm_stats(&filled, &refs)?;
            VaeCheckpoint::init(vae_cfg.clone(), norm, derive_seed(cfg.seed, 0))?
        }
    };
    let norm = ck.norm.clone();
    let frames: Vec<Array4<f32>> = filled.iter().map(|f| norm.normalize_frames(f.view())).collect();
    let val_frames = fill_all(val)?;

    let mut opt = cfg.optimizer(&ck.store)?;
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut run = RunState::new();
    let beta = ck.vae.config.kl_weight;

    'epochs: for epoch in 0..cfg.epochs {
        let mut items: Vec<(usize, usize)> = Vec::new();
        for (ci, f) in frames.iter().enumerate() {
            let n = f.len_of(Axis(0));
            let mut idx: Vec<usize> = (0..n).collect();
            if let Some(k) = cfg.frames_per_cube {
                idx.shuffle(&mut rng);
                idx.truncate(k.min(n));
                idx.sort_unstable();
            }
            items.extend(idx.into_iter().map(|t| (ci, t)));
        }
        items.shuffle(&mut rng);
        for (bi, chunk) in items.chunks(cfg.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(chunk.len());
            for &(ci, t) in chunk {
                let aug = Augmentation::draw(&mut rng);
                batch.push(aug.apply(&frames[ci].slice(s![t..t + 1, .., .., ..]).to_owned()));
            }
            let views: Vec<_> = batch.iter().map(|a| a.view()).collect();
            let x = to_tensor(
                ndarray::concatenate(Axis(0), &views)
                    .map_err(|e| Error::Shape(e.to_string()))?
                    .view(),
                DType::F32,
            )?;
            let grid = ck.vae.encode(&x, true, &mut rng)?;
            let rec = ck.vae.decode(&grid.latent)?;
            let loss = vae_loss(&rec, &x, &grid.mean, &grid.logvar, beta)?;
            let total = scalar(&loss.total)?;
            check_finite(total, run.step, bi)?;
            opt.backward_step(&loss.total)?;
            run.step += 1;
            log.record(&LogRecord {
                stage: cfg.stage.name().into(),
                step: run.step,
                epoch,
                batch: bi,
                loss: total,
                recon: Some(scalar(&loss.recon)?),
                kl: Some(scalar(&loss.kl)?),
                val_metric: None,
                lr: cfg.learning_rate,
                wall_time_s: run.wall(),
            })?;
            let val_now = cfg.val_every_steps.is_some_and(|k| run.step % k == 0);
            if val_now {
                let m = vae_validation_mse(&ck, &val_frames)?;
                log_val(log, cfg, &run, epoch, m)?;
                if run.observe(m, epoch, &ck.store, cfg.patience)? {
                    run.epochs_run = epoch + 1;
                    break 'epochs;
                }
            }
            if cfg.max_steps.is_some_and(|m| run.step >= m) {
                run.epochs_run = epoch + 1;
                if !val_now {
                    let m = vae_validation_mse(&ck, &val_frames)?;
                    log_val(log, cfg, &run, epoch, m)?;
                    run.observe(m, epoch, &ck.store, None)?;
                }
                break 'epochs;
            }
        }
        run.epochs_run = epoch + 1;
        if cfg.val_every_steps.is_none() {
            let m = vae_validation_mse(&ck, &val_frames)?;
            log_val(log, cfg, &run, epoch, m)?;
            if run.observe(m, epoch, &ck.store, cfg.patience)? {
                break;
            }
        }
    }
    if run.best_params.is_none() {
        let m = vae_validation_mse(&ck, &val_frames)?;
        run.observe(m, run.epochs_run.saturating_sub(1), &ck.store, None)?;
    }
    ck.store.restore(run.best_params.as_ref().unwrap())?;
    let init_from = init.map(|c| c.hash()).transpose()?;
    Ok(VaeCheckpoint {
        training: Some(cfg.record(&run, "val_recon_mse", init_from)),
        ..ck
    })
}

fn log_val(log: &mut dyn LogSink, cfg: &TrainConfig, run: &RunState, epoch: usize, metric: f64) -> Result<()> {
    log.record(&LogRecord {
        stage: cfg.stage.name().into(),
        step: run.step,
        epoch,
        batch: 0,
        loss: metric,
        recon: None,
        kl: None,
        val_metric: Some(metric),
        lr: cfg.learning_rate,
        wall_time_s: run.wall(),
    })
}

/// Encoder outputs of the frozen VAE for one cube under one augmentation.
#[derive(Clone)]
pub struct CachedCube {
    /// Scaled mean latents `[F, C, h, w]`.
    pub latents: Tensor,
    /// Normalized meteo `[T_meteo, M]`.
    pub meteo: Tensor,
    /// Normalized env `[2, H, W]`.
    pub env: Tensor,
}

/// Mean-encodes all frames of a prepared cube (unscaled). The result is
/// detached: the VAE is frozen and its graph must not be kept alive.
pub fn encode_cube(vae: &VaeCheckpoint, frames: &Array4<f32>) -> Result<Tensor> {
    Ok(vae.vae.encode_mean(&to_tensor(frames.view(), DType::F32)?)?.detach())
}

fn cache_cube(vae: &VaeCheckpoint, p: &PreparedCube, scale: Option<f64>) -> Result<CachedCube> {
    let z = encode_cube(vae, &p.frames)?;
    let latents = match scale {
        Some(s) => (z * s)?,
        None => z,
    };
    Ok(CachedCube {
        latents,
        meteo: to_tensor(p.meteo.view(), DType::F32)?,
        env: to_tensor(p.env.view(), DType::F32)?,
    })
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack(items, 0)?)
}

/// Normalization for the denoiser: the VAE's frame statistics (so latents
/// match what the VAE saw) plus meteo/env statistics of `train`.
pub fn denoiser_norm(vae: &VaeCheckpoint, train: &[Minicube], filled: &[Array4<f32>]) -> Result<NormStats> {
    let refs: Vec<&Minicube> = train.iter().collect();
    let own = compute_norm_stats(filled, &refs)?;
    Ok(NormStats {
        frame_mean: vae.norm.frame_mean.clone(),
        frame_std: vae.norm.frame_std.clone(),
        ..own
    })
}

/// Noises a batch of futures `[B, K, ...]` to steps `ts` in the residual
/// space anchored on each item's past mean. Returns the noised futures in
/// latent space and the standard-normal target noise.
fn noise_future(
    past: &Tensor,
    future: &Tensor,
    ts: &[usize],
    w: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let k = future.dim(1)?;
    let mut res = Vec::with_capacity(past.dim(0)?);
    for b in 0..past.dim(0)? {
        res.push(Residual::new(&past.get(b)?, k, w)?);
    }
    let u0 = stack(
        &res.iter()
            .enumerate()
            .map(|(b, r)| r.to_residual(&future.get(b)?))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let eps = randn(u0.dims(), u0.dtype(), rng)?;
    let ut = forward_noise_batch(&u0, ts, &eps, schedule)?;
    let zt = stack(
        &res.iter()
            .enumerate()
            .map(|(b, r)| r.from_residual(&ut.get(b)?))
            .collect::<Result<Vec<_>>>()?,
    )?;
    Ok((zt, eps))
}

/// Validation data shared by the selection metrics.
struct ValSet {
    cubes: Vec<CachedCube>,
    /// Gap-filled future reflectances `[K, 4, H, W]`.
    truth: Vec<Array4<f32>>,
}

impl ValSet {
    fn build(val: &[Minicube], vae: &VaeCheckpoint, norm: &NormStats, latent_scale: f64) -> Result<Self> {
        let mut set = ValSet {
            cubes: Vec::new(),
            truth: Vec::new(),
        };
        for c in val {
            let p = PreparedCube::new(c, norm)?;
            set.cubes.push(cache_cube(vae, &p, Some(latent_scale))?);
            set.truth.push(p.filled.slice(s![c.context_len.., .., .., ..]).to_owned());
        }
        Ok(set)
    }
}

/// Everything denoiser training needs from the frozen VAE, computed once:
/// scaled latents of every training cube under each augmentation, the
/// validation set, and the normalization.
pub struct DenoiserData {
    cache: Vec<Vec<CachedCube>>,
    val: ValSet,
    pub norm: NormStats,
    pub latent_scale: f64,
    pub vae_hash: String,
    /// Cube height and width.
    pub dims: (usize, usize),
}

impl DenoiserData {
    pub fn prepare(train: &[Minicube], val: &[Minicube], vae: &VaeCheckpoint) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Invalid("denoiser training needs non-empty train and validation sets".into()));
        }
        let dims = (train[0].height(), train[0].width());
        let vae_hash = vae.hash()?;
        let filled = fill_all(train)?;
        let norm = denoiser_norm(vae, train, &filled)?;
        let prepared: Vec<PreparedCube> = train
            .iter()
            .zip(filled)
            .map(|(c, fl)| PreparedCube::from_filled(c, fl, &norm))
            .collect();

        // scale latents to unit variance (measured on un-augmented encodings)
        let mut raw: Vec<Vec<CachedCube>> = Vec::with_capacity(prepared.len());
        let (mut s1, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
        for p in &prepared {
            let mut variants = Vec::with_capacity(4);
            for aug in Augmentation::ALL {
                let c = cache_cube(vae, &p.augmented(aug), None)?;
                if aug.index() == 0 {
                    s1 += scalar(&c.latents.sum_all()?)?;
                    s2 += scalar(&c.latents.sqr()?.sum_all()?)?;
                    n += c.latents.elem_count();
                }
                variants.push(c);
            }
            raw.push(variants);
        }
        let mean = s1 / n as f64;
        let std = (s2 / n as f64 - mean * mean).max(1e-12).sqrt();
        let latent_scale = 1.0 / std;
        let cache: Vec<Vec<CachedCube>> = raw
            .into_iter()
            .map(|vs| {
                vs.into_iter()
                    .map(|c| {
                        Ok(CachedCube {
                            latents: (c.latents * latent_scale)?,
                            ..c
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let val = ValSet::build(val, vae, &norm, latent_scale)?;
        Ok(DenoiserData {
            cache,
            val,
            norm,
            latent_scale,
            vae_hash,
            dims,
        })
    }

    fn check(&self, vae: &VaeCheckpoint, net_cfg: &VegeNetConfig) -> Result<()> {
        if vae.hash()? != self.vae_hash {
            return Err(Error::Invalid("prepared data belongs to a different VAE".into()));
        }
        let f = vae.vae.config.factor();
        if net_cfg.env_downsample != f || net_cfg.latent_channels != vae.vae.config.latent_channels {
            return Err(Error::Config(format!(
                "denoiser expects env_downsample {} / latent_channels {}, VAE has {f} / {}",
                net_cfg.env_downsample, net_cfg.latent_channels, vae.vae.config.latent_channels
            )));
        }
        let (h, w) = self.dims;
        if h != net_cfg.latent_height * f || w != net_cfg.latent_width * f {
            return Err(Error::Config(format!(
                "cubes are {h}x{w}, config expects latents {}x{} at factor {f}",
                net_cfg.latent_height, net_cfg.latent_width
            )));
        }
        Ok(())
    }
}

pub fn train_denoiser(
    train: &[Minicube],
    val: &[Minicube],
    vae: &VaeCheckpoint,
    net_cfg: &VegeNetConfig,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    log: &mut dyn LogSink,
) -> Result<DenoiserCheckpoint> {
    cfg.validate()?;
    if cfg.stage != Stage::Denoiser {
        return Err(Error::Config(format!("train_denoiser called with stage {}", cfg.stage.name())));
    }
    let data = DenoiserData::prepare(train, val, vae)?;
    train_denoiser_on(&data, vae, net_cfg, schedule, cfg, log)
}

/// Trains a denoiser on data prepared by [`DenoiserData::prepare`].
pub fn train_denoiser_on(
    data: &DenoiserData,
    vae: &VaeCheckpoint,
    net_cfg: &VegeNetConfig,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    log: &mut dyn LogSink,
) -> Result<DenoiserCheckpoint> {
    cfg.validate()?;
    if cfg.stage != Stage::Denoiser {
        return Err(Error::Config(format!("train_denoiser called with stage {}", cfg.stage.name())));
    }
    net_cfg.validate()?;
    data.check(vae, net_cfg)?;
    let (cache, val_set, vae_hash) = (&data.cache, &data.val, data.vae_hash.clone());
    let ck = DenoiserCheckpoint::init(
        net_cfg.clone(),
        schedule.clone(),
        data.norm.clone(),
        cfg.noise_init_weight,
        data.latent_scale,
        vae_hash.clone(),
        derive_seed(cfg.seed, 0),
    )?;
    let s = ck.schedule.num_steps();
    let (t_len, k_len) = (net_cfg.context_len, net_cfg.horizon);
    let mut opt = cfg.optimizer(&ck.store)?;
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut run = RunState::new();

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..cache.len()).collect();
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picks: Vec<&CachedCube> = chunk.iter().map(|&i| &cache[i][rng.random_range(0..4)]).collect();
            let ts: Vec<usize> = chunk.iter().map(|_| rng.random_range(0..s)).collect();
            let z = stack(&picks.iter().map(|c| c.latents.clone()).collect::<Vec<_>>())?;
            let meteo = stack(&picks.iter().map(|c| c.meteo.clone()).collect::<Vec<_>>())?;
            let env = stack(&picks.iter().map(|c| c.env.clone()).collect::<Vec<_>>())?;
            let past = z.narrow(1, 0, t_len)?;
            let future = z.narrow(1, t_len, k_len)?;
            let (noisy, eps) = noise_future(&past, &future, &ts, cfg.noise_init_weight, &ck.schedule, &mut rng)?;
            let z_all = Tensor::cat(&[&past, &noisy], 1)?;
            let eps_hat = ck.net.predict_noise(&z_all, &meteo, &env, &ts)?;
            let loss = (eps_hat - &eps)?.sqr()?.mean_all()?;
            let lv = scalar(&loss)?;
            check_finite(lv, run.step, bi)?;
            opt.backward_step(&loss)?;
            run.step += 1;
            log.record(&LogRecord {
                stage: cfg.stage.name().into(),
                step: run.step,
                epoch,
                batch: bi,
                loss: lv,
                recon: None,
                kl: None,
                val_metric: None,
                lr: cfg.learning_rate,
                wall_time_s: run.wall(),
            })?;
            let val_now = cfg.val_every_steps.is_some_and(|k| run.step % k == 0);
            if val_now {
                let m = denoiser_validation(&ck, vae, val_set, cfg)?;
                log_val(log, cfg, &run, epoch, m)?;
                if run.observe(m, epoch, &ck.store, cfg.patience)? {
                    run.epochs_run = epoch + 1;
                    break 'epochs;
                }
            }
            if cfg.max_steps.is_some_and(|m| run.step >= m) {
                run.epochs_run = epoch + 1;
                if !val_now {
                    let m = denoiser_validation(&ck, vae, val_set, cfg)?;
                    log_val(log, cfg, &run, epoch, m)?;
                    run.observe(m, epoch, &ck.store, None)?;
                }
                break 'epochs;
            }
        }
        run.epochs_run = epoch + 1;
        if cfg.val_every_steps.is_none() {
            let m = denoiser_validation(&ck, vae, val_set, cfg)?;
            log_val(log, cfg, &run, epoch, m)?;
            if run.observe(m, epoch, &ck.store, cfg.patience)? {
                break;
            }
        }
    }
    if run.best_params.is_none() {
        let m = denoiser_validation(&ck, vae, val_set, cfg)?;
        run.observe(m, run.epochs_run.saturating_sub(1), &ck.store, None)?;
    }
    ck.store.restore(run.best_params.as_ref().unwrap())?;
    if vae.hash()? != vae_hash {
        return Err(Error::Invalid("VAE parameters changed during denoiser training".into()));
    }
    let metric = if cfg.decode_eval { "val_forecast_rmse" } else { "val_eps_mse" };
    Ok(DenoiserCheckpoint {
        training: Some(cfg.record(&run, metric, None)),
        ..ck
    })
}

/// Validation metric of a denoiser: RGBN RMSE of short-chain forecasts
/// (`decode_eval`) or eps-MSE at fixed noise. Deterministic: every draw
/// comes from seeds fixed by the training seed and cube index.
fn denoiser_validation(ck: &DenoiserCheckpoint, vae: &VaeCheckpoint, val: &ValSet, cfg: &TrainConfig) -> Result<f64> {
    let t_len = ck.net.config.context_len;
    let root = derive_seed(cfg.seed, 2);
    if cfg.decode_eval {
        let opts = SampleOptions {
            num_steps: Some(cfg.val_sampling_steps.min(ck.schedule.num_steps())),
            w: Some(cfg.noise_init_weight),
            ..Default::default()
        };
        let mut sq = 0.0;
        let mut n = 0usize;
        for (i, (c, truth)) in val.cubes.iter().zip(&val.truth).enumerate() {
            let past = c.latents.narrow(0, 0, t_len)?;
            let mut rng = seeded(derive_seed(root, i as u64));
            let z = sample_latents(ck, &past, &c.meteo, &c.env, &opts, &mut rng)?;
            let pred = crate::sampler::decode_latents(ck, vae, &z)?;
            let r = rmse(pred.view(), truth.view(), None)?;
            sq += r * r * truth.len() as f64;
            n += truth.len();
        }
        Ok((sq / n as f64).sqrt())
    } else {
        let s = ck.schedule.num_steps();
        let mut total = 0.0;
        for (i, c) in val.cubes.iter().enumerate() {
            let mut rng = seeded(derive_seed(root, i as u64));
            let t = rng.random_range(0..s);
            let z = c.latents.unsqueeze(0)?;
            let past = z.narrow(1, 0, t_len)?;
            let future = z.narrow(1, t_len, ck.net.config.horizon)?;
            let (noisy, eps) = noise_future(&past, &future, &[t], ck.noise_init_weight, &ck.schedule, &mut rng)?;
            let z_all = Tensor::cat(&[&past, &noisy], 1)?;
            let eps_hat = ck
                .net
                .predict_noise(&z_all, &c.meteo.unsqueeze(0)?, &c.env.unsqueeze(0)?, &[t])?;
            total += scalar(&(eps_hat - eps)?.sqr()?.mean_all()?)?;
        }
        Ok(total / val.cubes.len() as f64)
    }
}

/// Re-evaluates a VAE checkpoint's selection metric on `val`.
pub fn reevaluate_vae(ck: &VaeCheckpoint, val: &[Minicube]) -> Result<f64> {
    vae_validation_mse(ck, &fill_all(val)?)
}

/// Re-evaluates a denoiser checkpoint's selection metric on `val`.
pub fn reevaluate_denoiser(ck: &DenoiserCheckpoint, vae: &VaeCheckpoint, val: &[Minicube], cfg: &TrainConfig) -> Result<f64> {
    let set = ValSet::build(val, vae, &ck.norm, ck.latent_scale)?;
    denoiser_validation(ck, vae, &set, cfg)
}
