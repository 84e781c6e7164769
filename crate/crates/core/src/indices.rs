//! Pointwise vegetation indices over `[T, 4, H, W]` RGBN reflectances.
//!
//! Every index guards its denominator with [`DELTA`] and clamps to a fixed
//! range so outputs are always finite.

use ndarray::{Array3, ArrayView4, Axis, Zip};

use crate::cube::{BLUE, NIR, RED};

pub const DELTA: f32 = 1e-8;
/// Blue-correction weight for ARVI.
pub const ARVI_GAMMA: f32 = 1.0;
pub const SIPI_RANGE: (f32, f32) = (0.0, 2.0);

fn pointwise(frames: ArrayView4<f32>, f: impl Fn(f32, f32, f32) -> f32 + Sync + Send) -> Array3<f32> {
    let blue = frames.index_axis(Axis(1), BLUE);
    let red = frames.index_axis(Axis(1), RED);
    let nir = frames.index_axis(Axis(1), NIR);
    Zip::from(&blue).and(&red).and(&nir).map_collect(|&b, &r, &n| f(b, r, n))
}

pub fn ndvi_px(red: f32, nir: f32) -> f32 {
    ((nir - red) / (nir + red + DELTA)).clamp(-1.0, 1.0)
}

pub fn arvi_px(blue: f32, red: f32, nir: f32) -> f32 {
    let red_adj = red - ARVI_GAMMA * (blue - red);
    ((nir - red_adj) / (nir + red_adj + DELTA)).clamp(-1.0, 1.0)
}

pub fn evi_px(blue: f32, red: f32, nir: f32) -> f32 {
    (2.5 * (nir - red) / (nir + 6.0 * red - 7.5 * blue + 1.0 + DELTA)).clamp(-1.5, 1.5)
}

/// Returns the clamped SIPI value and whether the raw value was undefined
/// or outside [`SIPI_RANGE`].
pub fn sipi_px(blue: f32, red: f32, nir: f32) -> (f32, bool) {
    let raw = (nir - blue) / (nir - red + DELTA);
    let flagged = !raw.is_finite() || raw < SIPI_RANGE.0 || raw > SIPI_RANGE.1;
    let v = if raw.is_nan() { SIPI_RANGE.1 } else { raw.clamp(SIPI_RANGE.0, SIPI_RANGE.1) };
    (v, flagged)
}

pub fn ndvi(frames: ArrayView4<f32>) -> Array3<f32> {
    pointwise(frames, |_, r, n| ndvi_px(r, n))
}

pub fn arvi(frames: ArrayView4<f32>) -> Array3<f32> {
    pointwise(frames, arvi_px)
}

pub fn evi(frames: ArrayView4<f32>) -> Array3<f32> {
    pointwise(frames, evi_px)
}

#[derive(Debug, Clone)]
pub struct SipiMaps {
    pub values: Array3<f32>,
    /// True where the raw index was undefined or clamped.
    pub flagged: Array3<bool>,
}

pub fn sipi(frames: ArrayView4<f32>) -> SipiMaps {
    let values = pointwise(frames, |b, r, n| sipi_px(b, r, n).0);
    let flagged = {
        let blue = frames.index_axis(Axis(1), BLUE);
        let red = frames.index_axis(Axis(1), RED);
        let nir = frames.index_axis(Axis(1), NIR);
        Zip::from(&blue).and(&red).and(&nir).map_collect(|&b, &r, &n| sipi_px(b, r, n).1)
    };
    SipiMaps { values, flagged }
}
