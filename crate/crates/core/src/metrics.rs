//! RMSE and windowed SSIM, plus the per-target metrics report.

use ndarray::{s, Array3, Array4, ArrayView, ArrayView2, ArrayView3, ArrayView4, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::indices::{self, ARVI_GAMMA, DELTA};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_DATA_RANGE: f64 = 1.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn as_planes<'a, D: Dimension>(a: &'a ArrayView<'a, f32, D>, name: &str) -> Result<ArrayView3<'a, f32>> {
    let sh = a.shape();
    if sh.len() < 2 {
        return Err(Error::shape(name, "needs at least two (spatial) axes"));
    }
    let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let n = sh[..sh.len() - 2].iter().product::<usize>();
    a.view()
        .into_shape_with_order((n, h, w))
        .map_err(|e| Error::shape(name, format!("{e} (arrays must be in standard layout)")))
}

fn check_same<D: Dimension>(a: &ArrayView<f32, D>, b: &ArrayView<f32, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "pred",
            format!("shape {:?} differs from target {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Root-mean-square error over all elements, or only over pixels where
/// `mask` (broadcast over the trailing `[H, W]` axes) is true.
pub fn rmse<D: Dimension>(
    pred: ArrayView<f32, D>,
    target: ArrayView<f32, D>,
    mask: Option<ArrayView2<bool>>,
) -> Result<f64> {
    let (sum, count) = squared_error_sum(pred, target, mask)?;
    if count == 0 {
        return Err(Error::Invalid("rmse over an empty mask".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// Sum of squared differences and element count under `mask`.
pub fn squared_error_sum<D: Dimension>(
    pred: ArrayView<f32, D>,
    target: ArrayView<f32, D>,
    mask: Option<ArrayView2<bool>>,
) -> Result<(f64, usize)> {
    check_same(&pred, &target)?;
    let p = as_planes(&pred, "pred")?;
    let t = as_planes(&target, "target")?;
    if let Some(m) = &mask {
        if m.shape() != &p.shape()[1..] {
            return Err(Error::shape("mask", format!("{:?} vs planes {:?}", m.shape(), p.shape())));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (pp, tp) in p.outer_iter().zip(t.outer_iter()) {
        for ((idx, &a), &b) in pp.indexed_iter().zip(tp.iter()) {
            if mask.as_ref().is_none_or(|m| m[idx]) {
                let d = a as f64 - b as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok((sum, count))
}

/// Normalized 2-D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// SSIM values of every valid (fully inside) window of one plane, paired
/// with the window centre.
fn ssim_windows(x: ArrayView2<f32>, y: ArrayView2<f32>, win: &[f64]) -> Vec<((usize, usize), f64)> {
    let (h, w) = x.dim();
    let n = SSIM_WINDOW;
    let c1 = (SSIM_K1 * SSIM_DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DATA_RANGE).powi(2);
    let mut out = Vec::with_capacity((h + 1 - n) * (w + 1 - n));
    for i in 0..=h - n {
        for j in 0..=w - n {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..n {
                for b in 0..n {
                    let wt = win[a * n + b];
                    let xv = x[[i + a, j + b]] as f64;
                    let yv = y[[i + a, j + b]] as f64;
                    mx += wt * xv;
                    my += wt * yv;
                    sxx += wt * xv * xv;
                    syy += wt * yv * yv;
                    sxy += wt * xv * yv;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let v = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            out.push(((i + n / 2, j + n / 2), v));
        }
    }
    out
}

/// Mean windowed SSIM over all `[H, W]` planes of the inputs (Gaussian
/// window 7, sigma 1.5, data range 1).
pub fn ssim<D: Dimension>(pred: ArrayView<f32, D>, target: ArrayView<f32, D>) -> Result<f64> {
    ssim_masked(pred, target, None)
}

/// Like [`ssim`], averaging only windows whose centre pixel is in `mask`.
pub fn ssim_masked<D: Dimension>(
    pred: ArrayView<f32, D>,
    target: ArrayView<f32, D>,
    mask: Option<ArrayView2<bool>>,
) -> Result<f64> {
    check_same(&pred, &target)?;
    let p = as_planes(&pred, "pred")?;
    let t = as_planes(&target, "target")?;
    let (_, h, w) = p.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape("pred", format!("spatial size {h}x{w} smaller than the SSIM window")));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let per_plane = exec::map_range(p.dim().0, Execution::default(), |k| {
        let vals = ssim_windows(p.index_axis(Axis(0), k), t.index_axis(Axis(0), k), &win);
        let mut sum = 0.0;
        let mut n = 0usize;
        for (c, v) in vals {
            if mask.as_ref().is_none_or(|m| m[c]) {
                sum += v;
                n += 1;
            }
        }
        (sum, n)
    });
    let (sum, n) = per_plane.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
    if n == 0 {
        return Err(Error::Invalid("ssim over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Rgbn,
    Ndvi,
    Arvi,
    Evi,
    Sipi,
}

impl Target {
    pub const TABLE: [Target; 3] = [Target::Rgbn, Target::Ndvi, Target::Arvi];

    pub fn name(self) -> &'static str {
        match self {
            Target::Rgbn => "rgbn",
            Target::Ndvi => "ndvi",
            Target::Arvi => "arvi",
            Target::Evi => "evi",
            Target::Sipi => "sipi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgbn" => Ok(Target::Rgbn),
            "ndvi" => Ok(Target::Ndvi),
            "arvi" => Ok(Target::Arvi),
            "evi" => Ok(Target::Evi),
            "sipi" => Ok(Target::Sipi),
            other => Err(Error::Invalid(format!("unknown metric target `{other}`"))),
        }
    }

    /// Maps `[K, 4, H, W]` frames to the target's `[K, C, H, W]` maps.
    pub fn maps(self, frames: ArrayView4<f32>) -> Array4<f32> {
        let one = |m: Array3<f32>| m.insert_axis(Axis(1));
        match self {
            Target::Rgbn => frames.to_owned(),
            Target::Ndvi => one(indices::ndvi(frames)),
            Target::Arvi => one(indices::arvi(frames)),
            Target::Evi => one(indices::evi(frames)),
            Target::Sipi => one(indices::sipi(frames).values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConstants {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub ssim_data_range: f64,
    pub index_delta: f64,
    pub arvi_gamma: f64,
}

impl Default for MetricConstants {
    fn default() -> Self {
        Self {
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_c1: (SSIM_K1 * SSIM_DATA_RANGE).powi(2),
            ssim_c2: (SSIM_K2 * SSIM_DATA_RANGE).powi(2),
            ssim_data_range: SSIM_DATA_RANGE,
            index_delta: DELTA as f64,
            arvi_gamma: ARVI_GAMMA as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadMetrics {
    pub lead: usize,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub target: Target,
    pub masked: bool,
    pub per_lead_time: Vec<LeadMetrics>,
    pub aggregate: AggregateMetrics,
    pub constants: MetricConstants,
}

/// One scored forecast: `[K, 4, H, W]` prediction and truth plus the
/// vegetation mask.
pub struct Scored<'a> {
    pub pred: ArrayView4<'a, f32>,
    pub truth: ArrayView4<'a, f32>,
    pub veg_mask: ArrayView2<'a, bool>,
}

/// Builds a report for `target` over a set of forecasts. RMSE is pooled
/// over all cubes' pixels per lead time; SSIM is the mean over cubes.
pub fn build_report(items: &[Scored<'_>], target: Target, masked: bool) -> Result<MetricsReport> {
    let first = items.first().ok_or_else(|| Error::Invalid("no forecasts to score".into()))?;
    let k = first.pred.shape()[0];
    let per_cube = exec::try_map_range(items.len(), Execution::default(), |i| {
        let it = &items[i];
        if it.pred.shape() != it.truth.shape() || it.pred.shape()[0] != k {
            return Err(Error::shape("pred", "forecast and truth shapes disagree"));
        }
        let p = target.maps(it.pred);
        let t = target.maps(it.truth);
        let mask = masked.then_some(it.veg_mask);
        let mut leads = Vec::with_capacity(k);
        for lead in 0..k {
            let pl = p.slice(s![lead, .., .., ..]);
            let tl = t.slice(s![lead, .., .., ..]);
            let (se, n) = squared_error_sum(pl, tl, mask)?;
            let ss = ssim_masked(pl, tl, mask)?;
            leads.push((se, n, ss));
        }
        Ok::<_, Error>(leads)
    })?;

    let mut per_lead_time = Vec::with_capacity(k);
    let (mut tot_se, mut tot_n, mut tot_ss) = (0.0, 0usize, 0.0);
    for lead in 0..k {
        let (mut se, mut n, mut ss) = (0.0, 0usize, 0.0);
        for c in &per_cube {
            se += c[lead].0;
            n += c[lead].1;
            ss += c[lead].2;
        }
        tot_se += se;
        tot_n += n;
        tot_ss += ss;
        per_lead_time.push(LeadMetrics {
            lead: lead + 1,
            rmse: (se / n.max(1) as f64).sqrt(),
            ssim: ss / per_cube.len() as f64,
        });
    }
    Ok(MetricsReport {
        target,
        masked,
        per_lead_time,
        aggregate: AggregateMetrics {
            rmse: (tot_se / tot_n.max(1) as f64).sqrt(),
            ssim: tot_ss / (per_cube.len() * k) as f64,
        },
        constants: MetricConstants::default(),
    })
}

/// Per-cube masked RMSE of `target` restricted to lead indices `leads`
/// (zero-based).
pub fn cube_rmse(
    pred: ArrayView4<f32>,
    truth: ArrayView4<f32>,
    mask: Option<ArrayView2<bool>>,
    target: Target,
    leads: std::ops::Range<usize>,
) -> Result<f64> {
    let p = target.maps(pred);
    let t = target.maps(truth);
    rmse(
        p.slice(s![leads.clone(), .., .., ..]),
        t.slice(s![leads, .., .., ..]),
        mask,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use proptest::prelude::*;
    use rand::Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = crate::rng::seeded(seed);
        Array4::from_shape_simple_fn(shape, || rng.random::<f32>())
    }

    #[test]
    fn rmse_examples() {
        let a = random((2, 4, 8, 8), 1);
        assert_eq!(rmse(a.view(), a.view(), None).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.1);
        assert!((rmse(b.view(), a.view(), None).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn rmse_matches_streaming_oracle() {
        let a = random((3, 4, 9, 7), 2);
        let b = random((3, 4, 9, 7), 3);
        let mask = Array2::from_shape_fn((9, 7), |(y, x)| (y * 7 + x) % 3 != 0);
        // one value at a time, Welford-style running mean of squared errors
        let mut mean = 0.0f64;
        let mut n = 0.0f64;
        for ((idx, &p), &t) in a.indexed_iter().zip(b.iter()) {
            if mask[[idx.2, idx.3]] {
                n += 1.0;
                let d = (p as f64 - t as f64).powi(2);
                mean += (d - mean) / n;
            }
        }
        let got = rmse(a.view(), b.view(), Some(mask.view())).unwrap();
        assert!((got - mean.sqrt()).abs() <= 1e-9, "{got} vs {}", mean.sqrt());
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = random((2, 4, 16, 16), 5);
        assert_eq!(ssim(a.view(), a.view()).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_inverted_image_is_below_one() {
        let a = random((1, 1, 12, 12), 6);
        let b = a.mapv(|v| 1.0 - v);
        assert!(ssim(b.view(), a.view()).unwrap() < 1.0);
    }

    #[test]
    fn ssim_constant_pair_matches_closed_form() {
        let x = Array2::from_elem((7, 7), 0.3f32);
        let y = Array2::from_elem((7, 7), 0.5f32);
        let got = ssim(x.view(), y.view()).unwrap();
        let (mx, my) = (0.3f32 as f64, 0.5f32 as f64);
        let c1 = (0.01f64).powi(2);
        let c2 = (0.03f64).powi(2);
        let expect = (2.0 * mx * my + c1) * c2 / ((mx * mx + my * my + c1) * c2);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn report_has_one_row_per_lead() {
        let p = random((5, 4, 8, 8), 7);
        let t = random((5, 4, 8, 8), 8);
        let m = Array2::from_elem((8, 8), true);
        let item = Scored { pred: p.view(), truth: t.view(), veg_mask: m.view() };
        let r = build_report(&[item], Target::Ndvi, true).unwrap();
        assert_eq!(r.per_lead_time.len(), 5);
        assert_eq!(r.per_lead_time[0].lead, 1);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["target"], "ndvi");
        assert!(json["constants"]["ssim_c1"].is_number());
    }

    proptest! {
        #[test]
        fn rmse_is_a_metric(seed in 0u64..1000) {
            let a = random((1, 1, 4, 4), seed);
            let b = random((1, 1, 4, 4), seed + 1000);
            let c = random((1, 1, 4, 4), seed + 2000);
            let d = |x: &Array4<f32>, y: &Array4<f32>| rmse(x.view(), y.view(), None).unwrap();
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert!(d(&a, &b) > 0.0);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        }

        #[test]
        fn ssim_self_similarity(seed in 0u64..1000, scale in 0.1f32..10.0) {
            let a = random((1, 2, 9, 9), seed).mapv(|v| v * scale);
            prop_assert_eq!(ssim(a.view(), a.view()).unwrap(), 1.0);
        }
    }
}
