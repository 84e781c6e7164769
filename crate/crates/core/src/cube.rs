//! The minicube sample model and its on-disk directory format.
//!
//! A minicube directory holds a `meta.json` sidecar plus one raw,
//! row-major, little-endian array file per field. Real arrays are stored
//! as `f32`; boolean masks as one byte per element (`0` or `1`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array, Array2, Array3, Array4, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Frame channel order.
pub const CHANNEL_NAMES: [&str; 4] = ["blue", "green", "red", "nir"];
pub const BLUE: usize = 0;
pub const GREEN: usize = 1;
pub const RED: usize = 2;
pub const NIR: usize = 3;

/// Meteorological variable order.
pub const METEO_NAMES: [&str; 9] = [
    "wind_speed",
    "relative_humidity",
    "shortwave_downwelling",
    "rainfall",
    "sea_level_pressure",
    "temperature_mean",
    "temperature_min",
    "temperature_max",
    "spare",
];
pub const RAINFALL: usize = 3;
pub const TEMPERATURE_MEAN: usize = 5;

/// Static environment layer order. Land cover is a class id stored as a real.
pub const ENV_NAMES: [&str; 2] = ["elevation", "land_cover"];
pub const ELEVATION: usize = 0;
pub const LAND_COVER: usize = 1;

/// Index of a meteorological variable by name.
pub fn meteo_index(name: &str) -> Option<usize> {
    METEO_NAMES.iter().position(|n| *n == name)
}

/// Auxiliary previous-year frame series, sampled at `times` (in frame
/// units of the current window, ascending).
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub frames: Array4<f32>,
    pub times: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minicube {
    /// `[T + K, 4, H, W]` reflectances in `[0, 1]`.
    pub frames: Array4<f32>,
    /// `[T_meteo, 9]`, `T_meteo` a multiple of `T + K`.
    pub meteo: Array2<f32>,
    /// `[2, H, W]`.
    pub env: Array3<f32>,
    /// `[T + K, H, W]`, true = cloud-contaminated.
    pub cloud_mask: Array3<bool>,
    /// `[H, W]`, true = vegetated.
    pub veg_mask: Array2<bool>,
    pub context_len: usize,
    pub horizon: usize,
    pub history: Option<History>,
}

impl Minicube {
    pub fn total_len(&self) -> usize {
        self.context_len + self.horizon
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Meteo steps per image frame.
    pub fn meteo_cadence(&self) -> usize {
        self.meteo.shape()[0] / self.total_len().max(1)
    }

    /// Checks every data-model invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let fs = self.frames.shape();
        let (tt, h, w) = (fs[0], fs[2], fs[3]);
        if self.context_len == 0 || self.horizon == 0 {
            return Err(Error::Validation(
                "context_len and horizon must be at least 1".into(),
            ));
        }
        if tt != self.total_len() {
            return Err(Error::Validation(format!(
                "frames has {tt} steps but context_len + horizon = {}",
                self.total_len()
            )));
        }
        if fs[1] != CHANNEL_NAMES.len() {
            return Err(Error::Validation(format!(
                "frames has {} channels, expected {}",
                fs[1],
                CHANNEL_NAMES.len()
            )));
        }
        check_finite("frames", self.frames.iter())?;
        if self.frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("frames contains values outside [0, 1]".into()));
        }

        let ms = self.meteo.shape();
        if ms[1] != METEO_NAMES.len() {
            return Err(Error::Validation(format!(
                "meteo has {} variables, expected {}",
                ms[1],
                METEO_NAMES.len()
            )));
        }
        if ms[0] == 0 || ms[0] % tt != 0 {
            return Err(Error::Validation(format!(
                "meteo length {} is not a multiple of {tt} frames",
                ms[0]
            )));
        }
        check_finite("meteo", self.meteo.iter())?;

        let es = self.env.shape();
        if es != [ENV_NAMES.len(), h, w] {
            return Err(Error::Validation(format!(
                "env shape {es:?} does not match [{}, {h}, {w}]",
                ENV_NAMES.len()
            )));
        }
        check_finite("env", self.env.iter())?;

        if self.cloud_mask.shape() != [tt, h, w] {
            return Err(Error::Validation(format!(
                "cloud_mask shape {:?} does not match [{tt}, {h}, {w}]",
                self.cloud_mask.shape()
            )));
        }
        if self.veg_mask.shape() != [h, w] {
            return Err(Error::Validation(format!(
                "veg_mask shape {:?} does not match [{h}, {w}]",
                self.veg_mask.shape()
            )));
        }
        if let Some(hist) = &self.history {
            let hs = hist.frames.shape();
            if hs[1..] != fs[1..] || hs[0] != hist.times.len() || hs[0] == 0 {
                return Err(Error::Validation(format!(
                    "history shape {hs:?} inconsistent with frames or {} timestamps",
                    hist.times.len()
                )));
            }
            check_finite("history", hist.frames.iter())?;
            if hist.times.windows(2).any(|p| p[1] <= p[0]) {
                return Err(Error::Validation(
                    "history times must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }
}

fn check_finite<'a>(name: &str, mut it: impl Iterator<Item = &'a f32>) -> Result<()> {
    let mut inf = false;
    for v in &mut it {
        if v.is_nan() {
            return Err(Error::Validation(format!("{name} contains NaN")));
        }
        inf |= v.is_infinite();
    }
    if inf {
        return Err(Error::Validation(format!("{name} contains Inf")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CubeMeta {
    pub format_version: u32,
    pub arrays: BTreeMap<String, ArrayEntry>,
    pub channel_names: Vec<String>,
    pub meteo_names: Vec<String>,
    pub env_names: Vec<String>,
    pub context_len: usize,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_times: Option<Vec<f32>>,
}

/// Writes a raw little-endian `f32` array file.
pub fn write_f32_file(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a raw little-endian `f32` array file, checking the element count.
pub fn read_f32_file(path: &Path, name: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::shape(
            name,
            format!(
                "expected {expected} f32 values but file holds {} bytes ({} values)",
                bytes.len(),
                bytes.len() / 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn entry<D: Dimension>(name: &str, a: &Array<impl Sized, D>, dtype: DType) -> (String, ArrayEntry) {
    (
        name.to_string(),
        ArrayEntry {
            shape: a.shape().to_vec(),
            dtype,
            file: format!("{name}.bin"),
        },
    )
}

/// Writes `cube` as a minicube directory at `path` (created if missing).
///
/// Concurrent writers to the same directory are not supported.
pub fn save_minicube(cube: &Minicube, path: &Path) -> Result<PathBuf> {
    cube.validate()?;
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;

    let mut arrays = BTreeMap::from([
        entry("frames", &cube.frames, DType::F32),
        entry("meteo", &cube.meteo, DType::F32),
        entry("env", &cube.env, DType::F32),
        entry("cloud_mask", &cube.cloud_mask, DType::U8),
        entry("veg_mask", &cube.veg_mask, DType::U8),
    ]);
    write_f32_file(&path.join("frames.bin"), cube.frames.iter().copied())?;
    write_f32_file(&path.join("meteo.bin"), cube.meteo.iter().copied())?;
    write_f32_file(&path.join("env.bin"), cube.env.iter().copied())?;
    write_bool_file(&path.join("cloud_mask.bin"), cube.cloud_mask.iter())?;
    write_bool_file(&path.join("veg_mask.bin"), cube.veg_mask.iter())?;
    if let Some(h) = &cube.history {
        arrays.extend([entry("history", &h.frames, DType::F32)]);
        write_f32_file(&path.join("history.bin"), h.frames.iter().copied())?;
    }

    let meta = CubeMeta {
        format_version: FORMAT_VERSION,
        arrays,
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        meteo_names: METEO_NAMES.iter().map(|s| s.to_string()).collect(),
        env_names: ENV_NAMES.iter().map(|s| s.to_string()).collect(),
        context_len: cube.context_len,
        horizon: cube.horizon,
        history_times: cube.history.as_ref().map(|h| h.times.clone()),
    };
    let meta_path = path.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(path.to_path_buf())
}

fn write_bool_file<'a>(path: &Path, values: impl Iterator<Item = &'a bool>) -> Result<()> {
    let bytes: Vec<u8> = values.map(|&b| b as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<CubeMeta> {
    let meta_path = path.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CubeMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(meta)
}

fn load_array<T, D: Dimension>(
    dir: &Path,
    meta: &CubeMeta,
    name: &str,
    ndim: usize,
    dtype: DType,
) -> Result<Array<T, D>>
where
    T: FromRaw,
{
    let e = meta
        .arrays
        .get(name)
        .ok_or_else(|| Error::shape(name, "missing from meta.json"))?;
    if e.dtype != dtype {
        return Err(Error::shape(
            name,
            format!("dtype {:?}, expected {dtype:?}", e.dtype),
        ));
    }
    if e.shape.len() != ndim {
        return Err(Error::shape(
            name,
            format!("declared rank {} but expected {ndim}", e.shape.len()),
        ));
    }
    let count: usize = e.shape.iter().product();
    let path = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
    if bytes.len() != count * dtype.size() {
        return Err(Error::shape(
            name,
            format!(
                "meta.json declares {:?} ({count} values) but file holds {} values",
                e.shape,
                bytes.len() / dtype.size()
            ),
        ));
    }
    let values = T::decode(name, &bytes)?;
    Array::from_shape_vec(IxDyn(&e.shape), values)
        .map_err(|err| Error::shape(name, err.to_string()))?
        .into_dimensionality::<D>()
        .map_err(|err| Error::shape(name, err.to_string()))
}

trait FromRaw: Sized {
    fn decode(name: &str, bytes: &[u8]) -> Result<Vec<Self>>;
}

impl FromRaw for f32 {
    fn decode(_: &str, bytes: &[u8]) -> Result<Vec<Self>> {
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

impl FromRaw for bool {
    fn decode(name: &str, bytes: &[u8]) -> Result<Vec<Self>> {
        bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::shape(name, format!("invalid boolean byte {other}"))),
            })
            .collect()
    }
}

/// Reads a minicube directory written by [`save_minicube`].
pub fn load_minicube(path: &Path) -> Result<Minicube> {
    let meta = read_meta(path)?;
    if meta.meteo_names != METEO_NAMES || meta.env_names != ENV_NAMES || meta.channel_names != CHANNEL_NAMES {
        return Err(Error::Validation(
            "variable names in meta.json do not match the supported ordering".into(),
        ));
    }
    let history = match (&meta.history_times, meta.arrays.contains_key("history")) {
        (Some(times), true) => Some(History {
            frames: load_array(path, &meta, "history", 4, DType::F32)?,
            times: times.clone(),
        }),
        (None, false) => None,
        _ => {
            return Err(Error::shape(
                "history",
                "history array and history_times must appear together",
            ))
        }
    };
    let cube = Minicube {
        frames: load_array::<f32, ndarray::Ix4>(path, &meta, "frames", 4, DType::F32)?,
        meteo: load_array::<f32, ndarray::Ix2>(path, &meta, "meteo", 2, DType::F32)?,
        env: load_array::<f32, ndarray::Ix3>(path, &meta, "env", 3, DType::F32)?,
        cloud_mask: load_array::<bool, ndarray::Ix3>(path, &meta, "cloud_mask", 3, DType::U8)?,
        veg_mask: load_array::<bool, ndarray::Ix2>(path, &meta, "veg_mask", 2, DType::U8)?,
        context_len: meta.context_len,
        horizon: meta.horizon,
        history,
    };
    cube.validate()?;
    Ok(cube)
}

/// Writes forecast frames `[K, 4, H, W]` as a frames-only minicube
/// directory: `frames.bin` plus a `meta.json` listing just that array.
pub fn save_frames_only(frames: &Array4<f32>, path: &Path) -> Result<PathBuf> {
    if frames.shape()[1] != CHANNEL_NAMES.len() {
        return Err(Error::shape("frames", format!("expected 4 channels, got {:?}", frames.shape())));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    write_f32_file(&path.join("frames.bin"), frames.iter().copied())?;
    let meta = CubeMeta {
        format_version: FORMAT_VERSION,
        arrays: BTreeMap::from([entry("frames", frames, DType::F32)]),
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        meteo_names: Vec::new(),
        env_names: Vec::new(),
        context_len: 0,
        horizon: frames.shape()[0],
        history_times: None,
    };
    let meta_path = path.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(path.to_path_buf())
}

/// Reads the `frames` array of any minicube directory, including
/// frames-only ones.
pub fn load_frames_only(path: &Path) -> Result<Array4<f32>> {
    let meta = read_meta(path)?;
    load_array(path, &meta, "frames", 4, DType::F32)
}

/// Lists minicube directories (those containing `meta.json`) under `root`,
/// sorted by name.
pub fn list_cube_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("meta.json").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}
