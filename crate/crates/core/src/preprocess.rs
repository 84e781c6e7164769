//! Gap filling, normalization and augmentation.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::cube::{History, Minicube, CHANNEL_NAMES, ELEVATION, ENV_NAMES, METEO_NAMES};
use crate::error::{Error, Result};

/// Replaces cloud-masked pixels with the mean of the nearest clear values
/// before and after them in time (or the single available side).
pub fn fill_cloud_gaps(frames: ArrayView4<f32>, cloud_mask: ArrayView3<bool>) -> Result<Array4<f32>> {
    let (tt, ch, h, w) = frames.dim();
    if cloud_mask.dim() != (tt, h, w) {
        return Err(Error::shape(
            "cloud_mask",
            format!("{:?} does not match frames {:?}", cloud_mask.shape(), frames.shape()),
        ));
    }
    let mut out = frames.to_owned();
    let mut occluded = Vec::new();
    let mut clear = Vec::with_capacity(tt);
    for y in 0..h {
        for x in 0..w {
            clear.clear();
            clear.extend((0..tt).filter(|&t| !cloud_mask[[t, y, x]]));
            if clear.is_empty() {
                occluded.push((y, x));
                continue;
            }
            if clear.len() == tt {
                continue;
            }
            for t in (0..tt).filter(|&t| cloud_mask[[t, y, x]]) {
                // first clear index after t
                let pos = clear.partition_point(|&c| c < t);
                let before = pos.checked_sub(1).map(|i| clear[i]);
                let after = clear.get(pos).copied();
                for c in 0..ch {
                    out[[t, c, y, x]] = match (before, after) {
                        (Some(a), Some(b)) => 0.5 * (frames[[a, c, y, x]] + frames[[b, c, y, x]]),
                        (Some(a), None) => frames[[a, c, y, x]],
                        (None, Some(b)) => frames[[b, c, y, x]],
                        (None, None) => unreachable!(),
                    };
                }
            }
        }
    }
    if occluded.is_empty() {
        Ok(out)
    } else {
        Err(Error::FullyOccluded(occluded))
    }
}

/// Sets every non-vegetated pixel to its mean over the first `context_len`
/// frames, at every time step.
pub fn fill_non_vegetation(
    frames: ArrayView4<f32>,
    veg_mask: ArrayView2<bool>,
    context_len: usize,
) -> Result<Array4<f32>> {
    let (tt, ch, h, w) = frames.dim();
    if veg_mask.dim() != (h, w) {
        return Err(Error::shape("veg_mask", format!("{:?} vs frames {:?}", veg_mask.shape(), frames.shape())));
    }
    if context_len == 0 || context_len > tt {
        return Err(Error::Invalid(format!("context_len {context_len} outside 1..={tt}")));
    }
    let mut out = frames.to_owned();
    for ((y, x), &veg) in veg_mask.indexed_iter() {
        if veg {
            continue;
        }
        for c in 0..ch {
            let mean = (0..context_len).map(|t| frames[[t, c, y, x]] as f64).sum::<f64>() / context_len as f64;
            for t in 0..tt {
                out[[t, c, y, x]] = mean as f32;
            }
        }
    }
    Ok(out)
}

/// Cloud filling followed by non-vegetation filling over a cube's frames.
pub fn fill_frames(cube: &Minicube, context_len: usize) -> Result<Array4<f32>> {
    let filled = fill_cloud_gaps(cube.frames.view(), cube.cloud_mask.view())?;
    fill_non_vegetation(filled.view(), cube.veg_mask.view(), context_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub frame_mean: Vec<f64>,
    pub frame_std: Vec<f64>,
    pub meteo_mean: Vec<f64>,
    pub meteo_std: Vec<f64>,
    pub env_min: Vec<f64>,
    pub env_max: Vec<f64>,
}

/// Meteo variables that are padding and may legitimately be constant.
fn is_padding(name: &str) -> bool {
    name == "spare"
}

fn mean_std(values: &[Vec<f32>]) -> (f64, f64) {
    let n: usize = values.iter().map(Vec::len).sum();
    let sum: f64 = values.iter().flatten().map(|&v| v as f64).sum();
    let mean = sum / n as f64;
    let sq: f64 = values.iter().flatten().map(|&v| (v as f64 - mean).powi(2)).sum();
    (mean, (sq / n as f64).sqrt())
}

/// Computes normalization statistics from (already gap-filled) training
/// frames and the cubes' meteo and env layers.
pub fn compute_norm_stats(frames: &[Array4<f32>], cubes: &[&Minicube]) -> Result<NormStats> {
    if frames.is_empty() || cubes.is_empty() {
        return Err(Error::Invalid("norm stats need at least one training cube".into()));
    }
    let mut frame_mean = Vec::new();
    let mut frame_std = Vec::new();
    for (c, name) in CHANNEL_NAMES.iter().enumerate() {
        let vals: Vec<Vec<f32>> = frames
            .iter()
            .map(|f| f.index_axis(Axis(1), c).iter().copied().collect())
            .collect();
        let (m, s) = mean_std(&vals);
        if !(s > 0.0) {
            return Err(Error::ZeroVariance(name.to_string()));
        }
        frame_mean.push(m);
        frame_std.push(s);
    }
    let mut meteo_mean = Vec::new();
    let mut meteo_std = Vec::new();
    for (v, name) in METEO_NAMES.iter().enumerate() {
        let vals: Vec<Vec<f32>> = cubes.iter().map(|c| c.meteo.column(v).to_vec()).collect();
        let (m, s) = mean_std(&vals);
        if s > 0.0 {
            meteo_mean.push(m);
            meteo_std.push(s);
        } else if is_padding(name) {
            meteo_mean.push(m);
            meteo_std.push(1.0);
        } else {
            return Err(Error::ZeroVariance(name.to_string()));
        }
    }
    let mut env_min = Vec::new();
    let mut env_max = Vec::new();
    for l in 0..ENV_NAMES.len() {
        let (lo, hi) = cubes
            .iter()
            .flat_map(|c| c.env.index_axis(Axis(0), l).iter().copied().collect::<Vec<_>>())
            .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v as f64), b.max(v as f64)));
        env_min.push(lo);
        env_max.push(hi);
    }
    Ok(NormStats {
        frame_mean,
        frame_std,
        meteo_mean,
        meteo_std,
        env_min,
        env_max,
    })
}

impl NormStats {
    /// Normalized-space bounds `(lo, hi)` per frame channel corresponding to
    /// reflectances 0 and 1.
    pub fn frame_bounds(&self) -> Vec<(f32, f32)> {
        self.frame_mean
            .iter()
            .zip(&self.frame_std)
            .map(|(m, s)| (((0.0 - m) / s) as f32, ((1.0 - m) / s) as f32))
            .collect()
    }

    /// Normalizes `[.., 4, H, W]`-shaped frames (channel axis second).
    pub fn normalize_frames(&self, frames: ArrayView4<f32>) -> Array4<f32> {
        let mut out = frames.to_owned();
        for (c, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.frame_mean[c], self.frame_std[c]);
            lane.mapv_inplace(|v| ((v as f64 - m) / s) as f32);
        }
        out
    }

    pub fn denormalize_frames(&self, frames: ArrayView4<f32>) -> Array4<f32> {
        let mut out = frames.to_owned();
        for (c, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.frame_mean[c], self.frame_std[c]);
            lane.mapv_inplace(|v| (v as f64 * s + m) as f32);
        }
        out
    }

    pub fn normalize_meteo(&self, meteo: ArrayView2<f32>) -> Array2<f32> {
        let mut out = meteo.to_owned();
        for (v, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.meteo_mean[v], self.meteo_std[v]);
            col.mapv_inplace(|x| ((x as f64 - m) / s) as f32);
        }
        out
    }

    pub fn denormalize_meteo(&self, meteo: ArrayView2<f32>) -> Array2<f32> {
        let mut out = meteo.to_owned();
        for (v, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.meteo_mean[v], self.meteo_std[v]);
            col.mapv_inplace(|x| (x as f64 * s + m) as f32);
        }
        out
    }

    /// Min-max scales elevation to `[0, 1]`; land cover stays a class id.
    pub fn normalize_env(&self, env: ArrayView3<f32>) -> Array3<f32> {
        let mut out = env.to_owned();
        let (lo, hi) = (self.env_min[ELEVATION], self.env_max[ELEVATION]);
        let span = if hi > lo { hi - lo } else { 1.0 };
        out.index_axis_mut(Axis(0), ELEVATION)
            .mapv_inplace(|v| ((v as f64 - lo) / span).clamp(0.0, 1.0) as f32);
        out
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A spatial dihedral transform: optional horizontal flip (x reversed),
/// then optional transpose of the two spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Augmentation {
    pub flip: bool,
    pub transpose: bool,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [
        Augmentation { flip: false, transpose: false },
        Augmentation { flip: true, transpose: false },
        Augmentation { flip: false, transpose: true },
        Augmentation { flip: true, transpose: true },
    ];

    /// Draws flip and transpose independently with probability 0.5 each.
    pub fn draw(rng: &mut impl rand::Rng) -> Self {
        let flip = rng.random_bool(0.5);
        let transpose = rng.random_bool(0.5);
        Self { flip, transpose }
    }

    pub fn index(self) -> usize {
        self.flip as usize + 2 * self.transpose as usize
    }

    /// Applies the transform to the last two axes of `a`.
    pub fn apply<T: Clone, D: Dimension>(self, a: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
        let nd = a.ndim();
        let mut v = a.view();
        if self.flip {
            v.invert_axis(Axis(nd - 1));
        }
        if self.transpose {
            v.swap_axes(nd - 2, nd - 1);
        }
        v.as_standard_layout().into_owned()
    }
}

/// Applies a random [`Augmentation`] to all spatial fields of a cube;
/// meteo is untouched.
pub fn augment(cube: &Minicube, rng: &mut impl rand::Rng) -> (Minicube, Augmentation) {
    let aug = Augmentation::draw(rng);
    (apply_augmentation(cube, aug), aug)
}

pub fn apply_augmentation(cube: &Minicube, aug: Augmentation) -> Minicube {
    Minicube {
        frames: aug.apply(&cube.frames),
        meteo: cube.meteo.clone(),
        env: aug.apply(&cube.env),
        cloud_mask: aug.apply(&cube.cloud_mask),
        veg_mask: aug.apply(&cube.veg_mask),
        context_len: cube.context_len,
        horizon: cube.horizon,
        history: cube.history.as_ref().map(|h| History {
            frames: aug.apply(&h.frames),
            times: h.times.clone(),
        }),
    }
}
