//! Reference forecasters that need no training.

use ndarray::{s, Array4, Axis};
use vegecast_core::Minicube;

use crate::error::{Error, Result};

/// Repeats each pixel's last cloud-free context value over the horizon.
/// Reads only `frames[..T]` and `cloud_mask[..T]`.
pub fn persistence_baseline(cube: &Minicube) -> Result<Array4<f32>> {
    let (t_len, k) = (cube.context_len, cube.horizon);
    let (h, w) = (cube.height(), cube.width());
    let mut out = Array4::<f32>::zeros((k, 4, h, w));
    let mut occluded = Vec::new();
    for y in 0..h {
        for x in 0..w {
            match (0..t_len).rev().find(|&t| !cube.cloud_mask[[t, y, x]]) {
                Some(t) => {
                    let px = cube.frames.slice(s![t, .., y, x]);
                    for mut lead in out.axis_iter_mut(Axis(0)) {
                        lead.slice_mut(s![.., y, x]).assign(&px);
                    }
                }
                None => occluded.push((y, x)),
            }
        }
    }
    if !occluded.is_empty() {
        return Err(vegecast_core::Error::FullyOccluded(occluded).into());
    }
    Ok(out)
}

/// Linear interpolation of the cube's previous-year series onto the target
/// frame times `T..T+K`. `Ok(None)` when the cube carries no history.
pub fn previous_year_baseline(cube: &Minicube) -> Result<Option<Array4<f32>>> {
    let Some(hist) = &cube.history else {
        return Ok(None);
    };
    let times = &hist.times;
    if times.is_empty() || times.len() != hist.frames.len_of(Axis(0)) {
        return Err(Error::Invalid("history times do not match its frames".into()));
    }
    if times.windows(2).any(|p| !(p[0] < p[1])) {
        return Err(Error::Invalid("history times must be strictly increasing".into()));
    }
    let (t_len, k) = (cube.context_len, cube.horizon);
    let (first, last) = (times[0], *times.last().unwrap());
    let dims = hist.frames.raw_dim();
    let mut out = Array4::<f32>::zeros((k, dims[1], dims[2], dims[3]));
    for (lead, mut slot) in out.axis_iter_mut(Axis(0)).enumerate() {
        let t = (t_len + lead) as f32;
        if t < first || t > last {
            return Err(Error::Invalid(format!(
                "history covers times {first}..={last}, target time {t} is outside"
            )));
        }
        // first index with times[j] >= t
        let j = times.partition_point(|&v| v < t);
        if times[j] == t {
            slot.assign(&hist.frames.index_axis(Axis(0), j));
            continue;
        }
        let (t0, t1) = (times[j - 1], times[j]);
        let a = (t - t0) / (t1 - t0);
        let f0 = hist.frames.index_axis(Axis(0), j - 1);
        let f1 = hist.frames.index_axis(Axis(0), j);
        ndarray::Zip::from(&mut slot)
            .and(&f0)
            .and(&f1)
            .for_each(|o, &p, &q| *o = (1.0 - a) * p + a * q);
    }
    Ok(Some(out))
}
