//! Synthetic minicube generator with known ground-truth dynamics.
//!
//! Per vegetated pixel the NDVI field `v` follows a discrete logistic rule
//!
//! ```text
//! v[t+1] = v[t] + r * g(rain[t], temp[t]) * v[t] * (1 - v[t] / cap(elev, class))
//! g(rain, temp) = rain / (rain + k_rain) * exp(-((temp - t_opt) / t_width)^2)
//! ```
//!
//! where `rain[t]` and `temp[t]` are the frame-interval means of the
//! rainfall and mean-temperature series. `g` is smooth, non-negative and
//! strictly increasing in rain. Non-vegetated pixels (land-cover class 0)
//! keep their initial value. RGBN frames come from [`render`], whose NDVI
//! recovers `v` exactly up to float rounding.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cube::{History, Minicube, ELEVATION, LAND_COVER, METEO_NAMES, RAINFALL, TEMPERATURE_MEAN};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub meteo_per_frame: usize,
    /// Logistic growth rate `r` per frame.
    pub growth_rate: f32,
    pub rain_half_saturation: f32,
    pub temp_optimum: f32,
    pub temp_width: f32,
    /// Multiplies the whole rainfall series after it is drawn.
    pub rain_scale: f32,
    pub cloud_fraction: f32,
    /// Land-cover classes; class 0 is non-vegetated.
    pub num_land_classes: usize,
    pub emit_history: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            context_len: 10,
            horizon: 20,
            meteo_per_frame: 5,
            growth_rate: 0.35,
            rain_half_saturation: 0.6,
            temp_optimum: 0.6,
            temp_width: 0.6,
            rain_scale: 1.0,
            cloud_fraction: 0.1,
            num_land_classes: 5,
            emit_history: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.height < 4 || self.width < 4 {
            bad.push("height and width must be at least 4".to_string());
        }
        if self.context_len == 0 || self.horizon == 0 {
            bad.push("context_len and horizon must be at least 1".into());
        }
        if self.meteo_per_frame == 0 {
            bad.push("meteo_per_frame must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            bad.push("cloud_fraction must lie in [0, 1)".into());
        }
        if self.num_land_classes < 2 {
            bad.push("num_land_classes must be at least 2".into());
        }
        if !(self.growth_rate >= 0.0 && self.growth_rate <= 1.0) {
            bad.push("growth_rate must lie in [0, 1]".into());
        }
        if !(self.rain_scale >= 0.0) || !(self.rain_half_saturation > 0.0) || !(self.temp_width > 0.0) {
            bad.push("rain_scale >= 0, rain_half_saturation > 0 and temp_width > 0 required".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn total_len(&self) -> usize {
        self.context_len + self.horizon
    }
}

/// Renders one pixel's RGBN reflectances from NDVI `v` and soil brightness
/// `s = nir + red` (in `(0, 1]`).
pub fn render(v: f32, s: f32) -> [f32; 4] {
    let nir = 0.5 * s * (1.0 + v);
    let red = 0.5 * s * (1.0 - v);
    let blue = 0.5 * red + 0.02;
    let green = 0.3 * nir + 0.4 * red + 0.02;
    [blue, green, red, nir]
}

/// Soil brightness as a function of normalized elevation.
pub fn brightness(elevation: f32) -> f32 {
    0.45 + 0.35 * elevation
}

/// Carrying capacity of NDVI for a pixel.
pub fn capacity(elevation: f32, class: usize, num_classes: usize) -> f32 {
    if class == 0 {
        return 0.0;
    }
    let base = 0.55 + 0.35 * (class - 1) as f32 / (num_classes.max(3) - 2) as f32;
    (base - 0.25 * elevation).clamp(0.2, 0.95)
}

/// The growth response `g(rain, temp)`.
pub fn growth_response(rain: f32, temp: f32, cfg: &GeneratorConfig) -> f32 {
    let r = rain.max(0.0);
    let z = (temp - cfg.temp_optimum) / cfg.temp_width;
    r / (r + cfg.rain_half_saturation) * (-z * z).exp()
}

/// Sum of random Gaussian bumps, min-max normalized to `[0, 1]`.
fn smooth_field(rng: &mut Rng, h: usize, w: usize, bumps: usize) -> Array2<f32> {
    let scale = h.max(w) as f32;
    let params: Vec<(f32, f32, f32, f32)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(-0.2..1.2) * h as f32,
                rng.random_range(-0.2..1.2) * w as f32,
                rng.random_range(0.15..0.45) * scale,
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut f = Array2::from_shape_fn((h, w), |(y, x)| {
        params
            .iter()
            .map(|&(cy, cx, s, a)| {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum::<f32>()
    });
    let (lo, hi) = f.iter().fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
    let span = (hi - lo).max(1e-6);
    f.mapv_inplace(|v| (v - lo) / span);
    f
}

/// Stationary AR(1) series with unit marginal variance.
fn ar1(rng: &mut Rng, n: usize, phi: f32) -> Array1<f32> {
    let mut out = Array1::zeros(n);
    let mut x: f32 = StandardNormal.sample(rng);
    let innov = (1.0 - phi * phi).sqrt();
    for v in out.iter_mut() {
        *v = x;
        let e: f32 = StandardNormal.sample(rng);
        x = phi * x + innov * e;
    }
    out
}

struct Statics {
    elevation: Array2<f32>,
    classes: Array2<usize>,
}

fn draw_meteo(rng: &mut Rng, cfg: &GeneratorConfig) -> Array2<f32> {
    let n = cfg.total_len() * cfg.meteo_per_frame;
    let mut m = Array2::zeros((n, METEO_NAMES.len()));

    let rain_level: f32 = rng.random_range(0.15..2.0);
    let rain_noise = ar1(rng, n, 0.8);
    let temp_base: f32 = rng.random_range(0.3..0.9);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let temp_noise = ar1(rng, n, 0.7);
    let others: Vec<(f32, Array1<f32>)> = [0usize, 1, 2, 4]
        .iter()
        .map(|_| (rng.random_range(0.2..0.8), ar1(rng, n, 0.9)))
        .collect();

    for s in 0..n {
        let rain = rain_level * (0.6 * rain_noise[s] - 0.18).exp() * cfg.rain_scale;
        let season = (std::f32::consts::TAU * s as f32 / n as f32 + phase).sin();
        let tm = temp_base + 0.2 * season + 0.05 * temp_noise[s];
        m[[s, RAINFALL]] = rain;
        m[[s, TEMPERATURE_MEAN]] = tm;
        m[[s, 6]] = tm - 0.12 - 0.02 * temp_noise[s].abs();
        m[[s, 7]] = tm + 0.12 + 0.02 * temp_noise[s].abs();
        for (&col, (mean, noise)) in [0usize, 1, 2, 4].iter().zip(&others) {
            m[[s, col]] = mean + 0.1 * noise[s];
        }
        // relative humidity co-varies with rain but does not drive growth
        m[[s, 1]] += 0.1 * (rain / (rain + 1.0));
    }
    m
}

/// Runs the growth rule over all frames; returns `v` as `[T_total, H, W]`.
fn simulate_ndvi(
    rng: &mut Rng,
    st: &Statics,
    meteo: &Array2<f32>,
    cfg: &GeneratorConfig,
) -> Array3<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let tt = cfg.total_len();
    let c = cfg.meteo_per_frame;
    let start: f32 = rng.random_range(0.25..0.45);
    let texture = smooth_field(rng, h, w, 6);
    let bare = smooth_field(rng, h, w, 4);

    let drivers: Vec<f32> = (0..tt)
        .map(|t| {
            let rows = meteo.slice(ndarray::s![t * c..(t + 1) * c, ..]);
            let rain = rows.column(RAINFALL).mean().unwrap();
            let temp = rows.column(TEMPERATURE_MEAN).mean().unwrap();
            growth_response(rain, temp, cfg)
        })
        .collect();

    let mut v = Array3::zeros((tt, h, w));
    for y in 0..h {
        for x in 0..w {
            let class = st.classes[[y, x]];
            let cap = capacity(st.elevation[[y, x]], class, cfg.num_land_classes);
            let mut cur = if class == 0 {
                0.05 + 0.1 * bare[[y, x]]
            } else {
                cap * start * (0.85 + 0.3 * texture[[y, x]])
            };
            for t in 0..tt {
                v[[t, y, x]] = cur;
                if class != 0 {
                    cur += cfg.growth_rate * drivers[t] * cur * (1.0 - cur / cap);
                }
            }
        }
    }
    v
}

fn render_series(v: &Array3<f32>, elevation: &Array2<f32>) -> Array4<f32> {
    let (tt, h, w) = v.dim();
    let mut frames = Array4::zeros((tt, 4, h, w));
    for t in 0..tt {
        for y in 0..h {
            for x in 0..w {
                let px = render(v[[t, y, x]], brightness(elevation[[y, x]]));
                for (ch, val) in px.iter().enumerate() {
                    frames[[t, ch, y, x]] = *val;
                }
            }
        }
    }
    frames
}

fn draw_clouds(rng: &mut Rng, cfg: &GeneratorConfig) -> Array3<bool> {
    let (tt, h, w) = (cfg.total_len(), cfg.height, cfg.width);
    let mut mask = Array3::from_elem((tt, h, w), false);
    if cfg.cloud_fraction <= 0.0 {
        return mask;
    }
    for t in 0..tt {
        let field = smooth_field(rng, h, w, 5);
        let mut sorted: Vec<f32> = field.iter().copied().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let n_cloudy = (cfg.cloud_fraction * (h * w) as f32).round() as usize;
        if n_cloudy == 0 {
            continue;
        }
        let thr = sorted[n_cloudy - 1];
        for ((y, x), &f) in field.indexed_iter() {
            mask[[t, y, x]] = f >= thr;
        }
    }
    // every pixel keeps at least one clear context frame
    let last = cfg.context_len - 1;
    for y in 0..h {
        for x in 0..w {
            if (0..cfg.context_len).all(|t| mask[[t, y, x]]) {
                mask[[last, y, x]] = false;
            }
        }
    }
    mask
}

/// Generates one minicube; a pure function of `(seed, cfg)`.
pub fn generate_synthetic_cube(seed: u64, cfg: &GeneratorConfig) -> Result<Minicube> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = seeded(seed);

    let elevation = smooth_field(&mut rng, h, w, 5);
    let cover = smooth_field(&mut rng, h, w, 4);
    let n_cls = cfg.num_land_classes;
    let classes = cover.mapv(|u| ((u * n_cls as f32) as usize).min(n_cls - 1));
    let statics = Statics { elevation, classes };

    let meteo = draw_meteo(&mut rng, cfg);
    let v = simulate_ndvi(&mut rng, &statics, &meteo, cfg);
    let clean = render_series(&v, &statics.elevation);
    let cloud_mask = draw_clouds(&mut rng, cfg);

    let mut frames = clean;
    for ((t, y, x), &cloudy) in cloud_mask.indexed_iter() {
        if cloudy {
            let shade: f32 = rng.random_range(0.0..0.1);
            for (ch, base) in [0.78f32, 0.8, 0.8, 0.82].iter().enumerate() {
                frames[[t, ch, y, x]] = base + shade;
            }
        }
    }

    let mut env = Array3::zeros((2, h, w));
    env.index_axis_mut(ndarray::Axis(0), ELEVATION).assign(&statics.elevation);
    env.index_axis_mut(ndarray::Axis(0), LAND_COVER)
        .assign(&statics.classes.mapv(|c| c as f32));
    let veg_mask = statics.classes.mapv(|c| c != 0);

    let history = if cfg.emit_history {
        // previous year: same statics, independently drawn weather
        let mut hrng = seeded(derive_seed(seed, 0x4849_5354));
        let hmeteo = draw_meteo(&mut hrng, cfg);
        let hv = simulate_ndvi(&mut hrng, &statics, &hmeteo, cfg);
        let full = render_series(&hv, &statics.elevation);
        let tt = cfg.total_len();
        let mut times: Vec<usize> = (0..tt).step_by(2).collect();
        if *times.last().unwrap() != tt - 1 {
            times.push(tt - 1);
        }
        let frames = full.select(ndarray::Axis(0), &times);
        Some(History {
            frames,
            times: times.iter().map(|&t| t as f32).collect(),
        })
    } else {
        None
    };

    let cube = Minicube {
        frames,
        meteo,
        env,
        cloud_mask,
        veg_mask,
        context_len: cfg.context_len,
        horizon: cfg.horizon,
        history,
    };
    cube.validate()?;
    Ok(cube)
}
