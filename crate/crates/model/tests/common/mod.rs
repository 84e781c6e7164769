#![allow(dead_code)]

use vegecast_core::{generate_synthetic_cube, GeneratorConfig, Minicube};
use vegecast_model::diffusion::ScheduleConfig;
use vegecast_model::trainer::{NoLog, Stage, TrainConfig};
use vegecast_model::vae::VaeConfig;
use vegecast_model::vegenet::VegeNetConfig;
use vegecast_model::{DenoiserCheckpoint, VaeCheckpoint};

pub const T: usize = 3;
pub const K: usize = 3;

pub fn gen_config() -> GeneratorConfig {
    GeneratorConfig {
        height: 8,
        width: 8,
        context_len: T,
        horizon: K,
        meteo_per_frame: 2,
        num_land_classes: 3,
        emit_history: false,
        ..Default::default()
    }
}

pub fn cubes(seed: u64, n: usize) -> Vec<Minicube> {
    let g = gen_config();
    (0..n as u64).map(|i| generate_synthetic_cube(seed * 1000 + i, &g).unwrap()).collect()
}

pub fn vae_config() -> VaeConfig {
    VaeConfig {
        base_width: 4,
        num_down: 1,
        latent_channels: 2,
        ..Default::default()
    }
}

pub fn net_config() -> VegeNetConfig {
    VegeNetConfig {
        latent_channels: 2,
        latent_height: 4,
        latent_width: 4,
        patch_size: 2,
        embed_dim: 16,
        num_blocks: 1,
        num_heads: 2,
        mlp_ratio: 2,
        context_len: T,
        horizon: K,
        meteo_cadence: 2,
        land_cover_classes: 3,
        env_downsample: 2,
        env_width: 8,
        time_embed_dim: 16,
        ..Default::default()
    }
}

pub fn schedule() -> ScheduleConfig {
    ScheduleConfig {
        num_steps: 8,
        ..Default::default()
    }
}

pub fn vae_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-3,
        frames_per_cube: Some(2),
        ..TrainConfig::for_stage(Stage::VaePretrain)
    }
}

pub fn denoiser_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        max_steps: Some(steps),
        val_sampling_steps: 4,
        ..TrainConfig::for_stage(Stage::Denoiser)
    }
}

pub fn trained_vae(train: &[Minicube], val: &[Minicube]) -> VaeCheckpoint {
    vegecast_model::trainer::train_vae(train, val, &vae_config(), &vae_train_config(1), None, &mut NoLog).unwrap()
}

pub fn trained_pair(seed: u64) -> (Vec<Minicube>, VaeCheckpoint, DenoiserCheckpoint) {
    let all = cubes(seed, 8);
    let (train, val) = all.split_at(6);
    let vae = trained_vae(train, val);
    let den = vegecast_model::trainer::train_denoiser(
        train,
        val,
        &vae,
        &net_config(),
        &schedule(),
        &denoiser_train_config(3),
        &mut NoLog,
    )
    .unwrap();
    (all, vae, den)
}
