use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use ndarray::Axis;
use vegecast_core::cube::{load_minicube, save_frames_only, save_minicube, LAND_COVER};
use vegecast_core::exec::try_map_range;
use vegecast_core::rng::{derive_seed, seeded};
use vegecast_core::{generate_synthetic_cube, split_dataset, Execution, Minicube, SplitSpec, Target};
use vegecast_eval::ablation::{run_ablation, Ablation, AblationProtocol};
use vegecast_eval::report::{write_bundle, ReportBundle};
use vegecast_eval::scoring::{evaluate, Forecaster, ModelForecaster, Persistence, PreviousYear};
use vegecast_eval::whatif::what_if_study;
use vegecast_model::sampler::{save_forecast, ForecastProvenance};
use vegecast_model::trainer::{train_denoiser, train_vae, DenoiserData, JsonlLog, LogRecord, Stage};
use vegecast_model::vegenet::VegeNetConfig;
use vegecast_model::{ensemble_forecast, forecast, DenoiserCheckpoint, VaeCheckpoint};

use crate::config::{
    load, AblateConfig, DenoiserStageConfig, EvaluateConfig, ForecastConfig, GenDataConfig, Resolved, SplitPart,
    VaeStageConfig, WhatIfConfig, GEOMETRY_KEYS,
};
use crate::error::{Error, Result};
use crate::provenance::{hash_dirs, Provenance};
use crate::{Command, VaeStageArg, OUTPUT_DIR_ENV};

pub const SPLIT_FILE: &str = "split.json";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::GenData { config, out, count, seed } => gen_data(config.as_deref(), &out_path(&out), count, seed),
        Command::TrainVae {
            stage,
            config,
            data,
            init,
            out,
        } => train_vae_cmd(stage, config.as_deref(), &data, init.as_deref(), &out_path(&out)),
        Command::TrainDenoiser { config, data, vae, out } => {
            train_denoiser_cmd(config.as_deref(), &data, &vae, &out_path(&out))
        }
        Command::Forecast {
            cube,
            vae,
            denoiser,
            seed,
            members,
            config,
            out,
        } => forecast_cmd(&cube, &vae, &denoiser, seed, members, config.as_deref(), &out_path(&out)),
        Command::Evaluate {
            data,
            vae,
            denoiser,
            targets,
            masked,
            config,
            out,
        } => evaluate_cmd(&data, &vae, &denoiser, &targets, masked, config.as_deref(), &out_path(&out)),
        Command::Ablate {
            flags,
            budget,
            config,
            data,
            vae,
            out,
        } => ablate_cmd(&flags, budget, config.as_deref(), &data, &vae, &out_path(&out)),
        Command::WhatIf {
            variable,
            scale,
            data,
            vae,
            denoiser,
            config,
            out,
        } => what_if_cmd(&variable, &scale, &data, &vae, &denoiser, config.as_deref(), &out_path(&out)),
        Command::Plot { log, out } => plot_cmd(&log, &out_path(&out)),
    }
}

/// Applies the output-directory override to relative paths.
pub fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configs serialize")
}

/// A corpus directory written by `gen-data`: cube directories plus the
/// split file naming them.
pub struct Dataset {
    pub root: PathBuf,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(SPLIT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let split = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("{} is not a valid split file: {e}", path.display())))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            split,
        })
    }

    pub fn paths(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.split.train_paths,
            SplitPart::Val => &self.split.val_paths,
            SplitPart::Test => &self.split.test_paths,
        }
    }

    pub fn load(&self, part: SplitPart) -> Result<Vec<Minicube>> {
        let paths = self.paths(part);
        if paths.is_empty() {
            return Err(Error::Usage(format!(
                "the {part:?} split of {} is empty",
                self.root.display()
            )));
        }
        Ok(paths
            .iter()
            .map(|p| load_minicube(&self.root.join(p)))
            .collect::<vegecast_core::Result<_>>()?)
    }

    pub fn hash(&self, part: SplitPart) -> Result<String> {
        hash_dirs(&self.root, self.paths(part))
    }
}

fn part_name(part: SplitPart) -> &'static str {
    match part {
        SplitPart::Train => "train",
        SplitPart::Val => "val",
        SplitPart::Test => "test",
    }
}

fn gen_data(config: Option<&Path>, out: &Path, count: usize, seed: u64) -> Result<Value> {
    let cfg = load(config, GenDataConfig::default())?.config;
    if count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    cfg.generator.validate()?;
    let ratios = (cfg.split.train, cfg.split.val, cfg.split.test);
    let names: Vec<String> = (0..count).map(|i| format!("cubes/cube_{i:05}")).collect();
    let split = split_dataset(&names, ratios, seed)?;
    create_dir(out)?;
    try_map_range(count, Execution::default(), |i| -> Result<()> {
        let cube = generate_synthetic_cube(derive_seed(seed, i as u64), &cfg.generator)?;
        save_minicube(&cube, &out.join(&names[i]))?;
        Ok(())
    })?;
    let path = out.join(SPLIT_FILE);
    let json = serde_json::to_string_pretty(&split).expect("split serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let mut params = to_value(&cfg);
    params["count"] = json!(count);
    Provenance::new("gen-data", params)
        .seed("data", seed)
        .output("corpus", hash_dirs(out, &names)?)
        .write(out)?;
    Ok(json!({
        "cubes": count,
        "train": split.train_paths.len(),
        "val": split.val_paths.len(),
        "test": split.test_paths.len(),
    }))
}

fn train_vae_cmd(stage: VaeStageArg, config: Option<&Path>, data: &Path, init: Option<&Path>, out: &Path) -> Result<Value> {
    let stage = match stage {
        VaeStageArg::Pretrain => Stage::VaePretrain,
        VaeStageArg::Finetune => Stage::VaeFinetune,
    };
    let cfg = load(config, VaeStageConfig::defaults(stage))?.config;
    if cfg.train.stage != stage {
        return Err(Error::Schema {
            path: config.map(Path::to_path_buf),
            errors: vec![format!(
                "`train.stage` is {} but --stage selects {}",
                cfg.train.stage.name(),
                stage.name()
            )],
        });
    }
    let init_ck = match (stage, init) {
        (Stage::VaeFinetune, None) => return Err(Error::Usage("--stage finetune needs --init <checkpoint>".into())),
        (Stage::VaePretrain, Some(_)) => return Err(Error::Usage("--init is only used with --stage finetune".into())),
        (_, Some(p)) => Some(VaeCheckpoint::load(p)?),
        (_, None) => None,
    };
    let ds = Dataset::open(data)?;
    let (train, val) = (ds.load(SplitPart::Train)?, ds.load(SplitPart::Val)?);
    create_dir(out)?;
    let mut log = JsonlLog::create(&out.join(LOG_FILE))?;
    let ck = train_vae(&train, &val, &cfg.model, &cfg.train, init_ck.as_ref(), &mut log)?;
    ck.save(out)?;

    let hash = ck.hash()?;
    let mut prov = Provenance::new("train-vae", to_value(&cfg))
        .seed("train", cfg.train.seed)
        .input("train_data", ds.hash(SplitPart::Train)?)
        .input("val_data", ds.hash(SplitPart::Val)?)
        .output("vae", hash.clone());
    if let Some(i) = &init_ck {
        prov = prov.input("init_vae", i.hash()?);
    }
    prov.write(out)?;
    let rec = ck.training.as_ref();
    Ok(json!({
        "checkpoint": hash,
        "steps": rec.map(|r| r.steps_run),
        "val_mse": rec.map(|r| r.best_metric),
    }))
}

/// Fills the model section's geometry from the data and VAE, rejecting
/// explicit settings that disagree.
fn fill_geometry<T>(
    resolved: &Resolved<T>,
    prefix: &str,
    model: &mut VegeNetConfig,
    vae: &VaeCheckpoint,
    cubes: &[&[Minicube]],
    config: Option<&Path>,
) -> Result<()> {
    let first = cubes
        .iter()
        .find_map(|c| c.first())
        .ok_or_else(|| Error::Usage("no cubes to derive the model geometry from".into()))?;
    let f = vae.vae.config.factor();
    if first.height() % f != 0 || first.width() % f != 0 {
        return Err(Error::Usage(format!(
            "cubes are {}x{}, not divisible by the VAE factor {f}",
            first.height(),
            first.width()
        )));
    }
    let classes = cubes
        .iter()
        .flat_map(|c| c.iter())
        .map(|c| c.env.index_axis(Axis(0), LAND_COVER).fold(0.0f32, |m, &v| m.max(v)))
        .fold(0.0f32, f32::max) as usize
        + 1;
    let derived: [usize; 9] = [
        vae.vae.config.latent_channels,
        first.height() / f,
        first.width() / f,
        first.context_len,
        first.horizon,
        first.meteo.shape()[1],
        first.meteo_cadence(),
        classes,
        f,
    ];
    let mut errors = Vec::new();
    for (key, value) in GEOMETRY_KEYS.iter().zip(derived) {
        if let Some(v) = resolved.explicit(&format!("{prefix}/{key}")) {
            if v.as_u64() != Some(value as u64) {
                errors.push(format!(
                    "`{}.{key}` is {v} but the data and VAE imply {value}",
                    prefix.trim_start_matches('/').replace('/', ".")
                ));
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Schema {
            path: config.map(Path::to_path_buf),
            errors,
        });
    }
    let [c, h, w, t, k, m, cad, cls, ds] = derived;
    *model = VegeNetConfig {
        latent_channels: c,
        latent_height: h,
        latent_width: w,
        context_len: t,
        horizon: k,
        meteo_vars: m,
        meteo_cadence: cad,
        land_cover_classes: cls,
        env_downsample: ds,
        ..model.clone()
    };
    Ok(())
}

fn train_denoiser_cmd(config: Option<&Path>, data: &Path, vae_path: &Path, out: &Path) -> Result<Value> {
    let resolved = load(config, DenoiserStageConfig::default())?;
    let mut cfg = resolved.config.clone();
    if cfg.train.stage != Stage::Denoiser {
        return Err(Error::Schema {
            path: config.map(Path::to_path_buf),
            errors: vec![format!("`train.stage` must be denoiser, got {}", cfg.train.stage.name())],
        });
    }
    let vae = VaeCheckpoint::load(vae_path)?;
    let ds = Dataset::open(data)?;
    let (train, val) = (ds.load(SplitPart::Train)?, ds.load(SplitPart::Val)?);
    fill_geometry(&resolved, "/model", &mut cfg.model, &vae, &[&train, &val], config)?;
    create_dir(out)?;
    let mut log = JsonlLog::create(&out.join(LOG_FILE))?;
    let ck = train_denoiser(&train, &val, &vae, &cfg.model, &cfg.schedule, &cfg.train, &mut log)?;
    ck.save(out)?;

    let hash = ck.hash()?;
    Provenance::new("train-denoiser", to_value(&cfg))
        .seed("train", cfg.train.seed)
        .input("train_data", ds.hash(SplitPart::Train)?)
        .input("val_data", ds.hash(SplitPart::Val)?)
        .input("vae", vae.hash()?)
        .output("denoiser", hash.clone())
        .write(out)?;
    let rec = ck.training.as_ref();
    Ok(json!({
        "checkpoint": hash,
        "steps": rec.map(|r| r.steps_run),
        "best_metric": rec.map(|r| r.best_metric),
    }))
}

fn load_pair(vae: &Path, denoiser: &Path) -> Result<(VaeCheckpoint, DenoiserCheckpoint)> {
    Ok((VaeCheckpoint::load(vae)?, DenoiserCheckpoint::load(denoiser, None)?))
}

#[allow(clippy::too_many_arguments)]
fn forecast_cmd(
    cube: &Path,
    vae: &Path,
    denoiser: &Path,
    seed: u64,
    members: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    let cfg = load(config, ForecastConfig::default())?.config;
    if members == 0 {
        return Err(Error::Usage("--members must be at least 1".into()));
    }
    let (vae, den) = load_pair(vae, denoiser)?;
    let c = load_minicube(cube)?;
    let opts = &cfg.sampling;
    if members == 1 {
        let frames = forecast(&c, &vae, &den, opts, &mut seeded(seed))?;
        save_forecast(out, &frames, &ForecastProvenance::new(&vae, &den, opts, vec![seed])?)?;
    } else {
        let ens = ensemble_forecast(&c, &vae, &den, members, opts, seed, Execution::default())?;
        save_forecast(out, &ens.mean, &ForecastProvenance::new(&vae, &den, opts, ens.seeds.clone())?)?;
        save_frames_only(&ens.std, &out.join("std"))?;
        for (i, m) in ens.members.iter().enumerate() {
            save_frames_only(m, &out.join("members").join(format!("member_{i:03}")))?;
        }
    }
    let mut params = to_value(&cfg);
    params["members"] = json!(members);
    Provenance::new("forecast", params)
        .seed("forecast", seed)
        .input("cube", hash_dirs(cube, &[String::new()])?)
        .input("vae", vae.hash()?)
        .input("denoiser", den.hash()?)
        .write(out)?;
    Ok(json!({ "members": members, "horizon": den.net.config.horizon }))
}

fn parse_targets(spec: &str) -> Result<Vec<Target>> {
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let t = Target::parse(name).map_err(|e| Error::Usage(e.to_string()))?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("--targets names no metric target".into()));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    data: &Path,
    vae: &Path,
    denoiser: &Path,
    targets: &str,
    masked: bool,
    config: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    let cfg = load(config, EvaluateConfig::default())?.config;
    let targets = parse_targets(targets)?;
    if cfg.members == 0 {
        return Err(Error::Usage("`members` must be at least 1".into()));
    }
    let (vae, den) = load_pair(vae, denoiser)?;
    let ds = Dataset::open(data)?;
    let cubes = ds.load(cfg.split)?;
    let model = ModelForecaster {
        name: "vegecast".into(),
        vae: &vae,
        denoiser: &den,
        options: cfg.sampling.clone(),
        root_seed: cfg.seed,
        members: cfg.members,
    };
    let mut forecasters: Vec<&dyn Forecaster> = vec![&model];
    if cfg.baselines {
        forecasters.push(&Persistence);
        forecasters.push(&PreviousYear);
    }
    let (ev, _) = evaluate(&forecasters, &cubes, &targets, cfg.curve_target, masked, Execution::default())?;
    let summary: Vec<Value> = ev
        .forecasters
        .iter()
        .map(|f| {
            json!({
                "forecaster": f.name,
                "rmse": f.reports.iter().map(|r| (r.target.name().to_string(), json!(r.aggregate.rmse))).collect::<serde_json::Map<_, _>>(),
            })
        })
        .collect();
    write_bundle(
        out,
        &ReportBundle {
            evaluation: Some(ev),
            ..Default::default()
        },
    )?;
    let mut params = to_value(&cfg);
    params["targets"] = json!(targets);
    params["masked"] = json!(masked);
    Provenance::new("evaluate", params)
        .seed("sampling", cfg.seed)
        .input(&format!("{}_data", part_name(cfg.split)), ds.hash(cfg.split)?)
        .input("vae", vae.hash()?)
        .input("denoiser", den.hash()?)
        .write(out)?;
    Ok(json!({ "cubes": cubes.len(), "forecasters": summary }))
}

fn ablate_cmd(flags: &str, budget: usize, config: Option<&Path>, data: &Path, vae: &Path, out: &Path) -> Result<Value> {
    let resolved = load(config, AblateConfig::default())?;
    let mut cfg = resolved.config.clone();
    if budget == 0 {
        return Err(Error::Usage("--budget must be at least 1 step".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Usage("`seeds` must list at least one seed".into()));
    }
    let ablations = match flags.trim() {
        "standard" | "all" => Ablation::standard(),
        spec => Ablation::parse_list(spec).map_err(|e| Error::Usage(e.to_string()))?,
    };
    let vae = VaeCheckpoint::load(vae)?;
    let ds = Dataset::open(data)?;
    let (train, val, test) = (ds.load(SplitPart::Train)?, ds.load(SplitPart::Val)?, ds.load(cfg.split)?);
    fill_geometry(&resolved, "/denoiser/model", &mut cfg.denoiser.model, &vae, &[&train, &val, &test], config)?;
    cfg.denoiser.train.max_steps = Some(budget);
    let prepared = DenoiserData::prepare(&train, &val, &vae)?;
    let protocol = AblationProtocol {
        base: cfg.denoiser.model.clone(),
        schedule: cfg.denoiser.schedule.clone(),
        train: cfg.denoiser.train.clone(),
        seeds: cfg.seeds.clone(),
        sampling: cfg.sampling.clone(),
        eval_seed: cfg.eval_seed,
        masked: cfg.masked,
    };
    create_dir(out)?;
    let mut log = JsonlLog::create(&out.join(LOG_FILE))?;
    let report = run_ablation(&ablations, &prepared, &vae, &test, &protocol, &mut log)?;
    let summary: Vec<Value> = report
        .summary
        .iter()
        .map(|s| json!({ "config": s.name, "ndvi_rmse": s.ndvi_rmse_mean, "stderr": s.ndvi_rmse_stderr }))
        .collect();
    write_bundle(
        out,
        &ReportBundle {
            ablation: Some(report),
            ..Default::default()
        },
    )?;
    let mut params = to_value(&cfg);
    params["flags"] = json!(ablations.iter().map(|a| a.name.clone()).collect::<Vec<_>>());
    params["budget"] = json!(budget);
    let mut prov = Provenance::new("ablate", params)
        .seed("eval", cfg.eval_seed)
        .input("train_data", ds.hash(SplitPart::Train)?)
        .input("val_data", ds.hash(SplitPart::Val)?)
        .input(&format!("{}_data", part_name(cfg.split)), ds.hash(cfg.split)?)
        .input("vae", vae.hash()?);
    for (i, s) in cfg.seeds.iter().enumerate() {
        prov = prov.seed(&format!("train_{i}"), *s);
    }
    prov.write(out)?;
    Ok(json!({ "ablations": summary }))
}

#[allow(clippy::too_many_arguments)]
fn what_if_cmd(
    variable: &str,
    scales: &[f64],
    data: &Path,
    vae: &Path,
    denoiser: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    let cfg = load(config, WhatIfConfig::default())?.config;
    let (vae, den) = load_pair(vae, denoiser)?;
    let ds = Dataset::open(data)?;
    let cubes = ds.load(cfg.split)?;
    let study = what_if_study(&cubes, &vae, &den, variable, scales, &cfg.sampling, cfg.seed)?;
    let summary: Vec<Value> = study
        .iter()
        .map(|s| {
            json!({
                "scale": s.scale,
                "final_lead_mean_delta": s.final_lead_mean,
                "positive": s.sign.positive,
                "negative": s.sign.negative,
                "max_abs_delta": s.max_abs_delta,
            })
        })
        .collect();
    write_bundle(
        out,
        &ReportBundle {
            what_if: study,
            ..Default::default()
        },
    )?;
    let mut params = to_value(&cfg);
    params["variable"] = json!(variable);
    params["scales"] = json!(scales);
    Provenance::new("what-if", params)
        .seed("sampling", cfg.seed)
        .input(&format!("{}_data", part_name(cfg.split)), ds.hash(cfg.split)?)
        .input("vae", vae.hash()?)
        .input("denoiser", den.hash()?)
        .write(out)?;
    Ok(json!({ "variable": variable, "results": summary }))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Training logs become one row per record; reports become long-format
/// `series,x,y` rows (lead-time curves and mean NDVI deltas per lead).
fn plot_cmd(input: &Path, out: &Path) -> Result<Value> {
    if out.extension().is_some_and(|e| e != "csv") {
        return Err(Error::Usage(format!(
            "{}: only CSV output is supported",
            out.display()
        )));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let input = if input.is_dir() { input.join("report.json") } else { input.to_path_buf() };
    let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
    let mut w = csv::Writer::from_path(out).map_err(|e| csv_err(out, e))?;
    let rows;
    if input.extension().is_some_and(|e| e == "jsonl") {
        let records: Vec<LogRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::Usage(format!("{} line {}: {e}", input.display(), i + 1)))
            })
            .collect::<Result<_>>()?;
        w.write_record(["stage", "step", "epoch", "loss", "recon", "kl", "val_metric", "lr"])
            .map_err(|e| csv_err(out, e))?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &records {
            w.write_record([
                r.stage.clone(),
                r.step.to_string(),
                r.epoch.to_string(),
                r.loss.to_string(),
                opt(r.recon),
                opt(r.kl),
                opt(r.val_metric),
                r.lr.to_string(),
            ])
            .map_err(|e| csv_err(out, e))?;
        }
        rows = records.len();
    } else {
        let bundle: ReportBundle = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("{} is neither a log nor a report: {e}", input.display())))?;
        w.write_record(["series", "x", "y"]).map_err(|e| csv_err(out, e))?;
        let mut n = 0;
        let mut put = |series: String, x: usize, y: f64| {
            n += 1;
            w.write_record([series, x.to_string(), y.to_string()])
        };
        if let Some(ev) = &bundle.evaluation {
            for c in ev.forecasters.iter().filter_map(|f| f.lead_curve.as_ref()) {
                for (i, v) in c.rmse.iter().enumerate() {
                    put(format!("rmse/{}/{}", c.forecaster, c.target.name()), i + 1, *v).map_err(|e| csv_err(out, e))?;
                }
            }
        }
        for s in &bundle.what_if {
            for (i, v) in s.mean_delta_per_lead.iter().enumerate() {
                put(format!("ndvi_delta/{}x{}", s.variable, s.scale), i + 1, *v).map_err(|e| csv_err(out, e))?;
            }
        }
        rows = n;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(json!({ "rows": rows }))
}
