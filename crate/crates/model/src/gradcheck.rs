//! Central finite-difference checks of autograd gradients.

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use vegecast_core::rng::seeded;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    /// Largest relative error seen.
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Compares the gradient of the scalar `loss` with respect to every
/// parameter of an f64 `store` against central differences with step `h`,
/// at `per_param` coordinates per parameter (drawn from `seed`). A
/// coordinate passes when `|fd - g| / max(|fd|, |g|, 1e-7) <= tol`.
/// Parameters are restored afterwards.
pub fn check_gradients(
    store: &ParamStore,
    per_param: usize,
    h: f64,
    tol: f64,
    seed: u64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    if store.dtype() != DType::F64 {
        return Err(Error::Invalid("gradient checks need an f64 parameter store".into()));
    }
    let grads = loss()?.backward()?;
    let mut rng = seeded(seed);
    let mut out = GradCheck {
        checked: 0,
        passed: 0,
        worst: 0.0,
    };
    for (name, var) in store.iter() {
        let g: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => return Err(Error::Invalid(format!("loss does not depend on `{name}`"))),
        };
        let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
        let eval = |i: usize, delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu)?)?;
            Ok(loss()?.to_scalar::<f64>()?)
        };
        for _ in 0..per_param {
            let i = rng.random_range(0..base.len());
            let fd = (eval(i, h)? - eval(i, -h)?) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7);
            out.checked += 1;
            out.worst = out.worst.max(err);
            if err <= tol {
                out.passed += 1;
            }
        }
        var.set(&Tensor::from_vec(base, var.shape(), &Device::Cpu)?)?;
    }
    Ok(out)
}
