//! ndarray ↔ tensor conversion and model-ready cube preparation.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array, Array2, Array3, Array4, ArrayView, Dimension, IxDyn};
use ndarray::{concatenate, s, Axis};
use vegecast_core::preprocess::{fill_cloud_gaps, fill_frames, fill_non_vegetation, Augmentation, NormStats};
use vegecast_core::Minicube;

use crate::error::{Error, Result};

pub fn to_tensor<D: Dimension>(a: ArrayView<f32, D>, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, a.shape(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn to_array(t: &Tensor) -> Result<Array<f32, IxDyn>> {
    let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Array::from_shape_vec(IxDyn(t.dims()), v).map_err(|e| Error::Shape(e.to_string()))
}

pub fn to_array4(t: &Tensor) -> Result<Array4<f32>> {
    to_array(t)?
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))
}

/// Context frames gap-filled from the context alone, exactly as at
/// forecast time.
pub fn context_frames(cube: &Minicube, context_len: usize) -> Result<Array4<f32>> {
    let t = context_len;
    if cube.frames.len_of(Axis(0)) < t {
        return Err(Error::Shape(format!(
            "cube has {} frames, need {t} context frames",
            cube.frames.len_of(Axis(0))
        )));
    }
    let ctx = fill_cloud_gaps(
        cube.frames.slice(s![..t, .., .., ..]),
        cube.cloud_mask.slice(s![..t, .., ..]),
    )?;
    Ok(fill_non_vegetation(ctx.view(), cube.veg_mask.view(), t)?)
}

/// Full series as the denoiser is trained on it: context filled from the
/// context only (matching inference), targets from the full series.
pub fn training_frames(cube: &Minicube) -> Result<Array4<f32>> {
    let t = cube.context_len;
    let full = fill_cloud_gaps(cube.frames.view(), cube.cloud_mask.view())?;
    let ctx = fill_cloud_gaps(
        cube.frames.slice(s![..t, .., .., ..]),
        cube.cloud_mask.slice(s![..t, .., ..]),
    )?;
    let joined = concatenate(Axis(0), &[ctx.view(), full.slice(s![t.., .., .., ..])])
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(fill_non_vegetation(joined.view(), cube.veg_mask.view(), t)?)
}

/// A cube with gap-filled, normalized layers ready for encoding.
#[derive(Debug, Clone)]
pub struct PreparedCube {
    /// Gap-filled reflectances `[F, 4, H, W]` (scoring truth).
    pub filled: Array4<f32>,
    /// Normalized `filled`.
    pub frames: Array4<f32>,
    pub meteo: Array2<f32>,
    pub env: Array3<f32>,
    pub veg_mask: Array2<bool>,
}

impl PreparedCube {
    /// Model view of a full cube (see [`training_frames`]); `filled` keeps
    /// the full-series fill used as scoring truth.
    pub fn new(cube: &Minicube, norm: &NormStats) -> Result<Self> {
        let mut p = Self::from_filled(cube, training_frames(cube)?, norm);
        p.filled = fill_frames(cube, cube.context_len)?;
        Ok(p)
    }

    pub fn from_filled(cube: &Minicube, filled: Array4<f32>, norm: &NormStats) -> Self {
        PreparedCube {
            frames: norm.normalize_frames(filled.view()),
            filled,
            meteo: norm.normalize_meteo(cube.meteo.view()),
            env: norm.normalize_env(cube.env.view()),
            veg_mask: cube.veg_mask.clone(),
        }
    }

    pub fn augmented(&self, aug: Augmentation) -> PreparedCube {
        PreparedCube {
            filled: aug.apply(&self.filled),
            frames: aug.apply(&self.frames),
            meteo: self.meteo.clone(),
            env: aug.apply(&self.env),
            veg_mask: aug.apply(&self.veg_mask),
        }
    }
}
