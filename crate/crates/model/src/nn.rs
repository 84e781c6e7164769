//! Small layer toolkit on top of candle tensors.

use candle_core::{Module, Tensor, D};
use vegecast_core::rng::Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone)]
pub struct Linear {
    /// `[in, out]`, so the forward pass needs no transpose.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize),
        init: Init,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[dims.0, dims.1], init, rng)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[dims.1], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// Same as [`Linear::new`] but the bias is drawn from `bias_init`
    /// (used for randomized-gate test inits).
    pub fn with_bias_init(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize),
        init: Init,
        bias_init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[dims.0, dims.1], init, rng)?;
        let bias = Some(store.add(&format!("{name}.bias"), &[dims.1], bias_init, rng)?);
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (d_in, d_out) = self.weight.dims2()?;
        if dims.last() != Some(&d_in) {
            return Err(Error::Shape(format!("linear expects last dim {d_in}, got {dims:?}")));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = d_out;
        Ok(y.reshape(out_dims)?)
    }
}

/// Fan-in scaled normal init (`gain² / fan_in` variance).
pub fn he(fan_in: usize, gain: f64) -> Init {
    Init::Normal(gain / (fan_in as f64).sqrt())
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        (c_in, c_out): (usize, usize),
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            he(c_in * kernel * kernel, gain),
            rng,
        )?;
        let bias = store.add(&format!("{name}.bias"), &[c_out], Init::Zeros, rng)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer norm over the last axis without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// `x · (1 + scale) + shift`, broadcasting `shift`/`scale` against `x`.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::Activation::Silu.forward(x)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

/// Multi-head self-attention over `[N, S, D]` sequences.
#[derive(Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embed dim {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            qkv: Linear::new(store, &format!("{name}.qkv"), (dim, 3 * dim), he(dim, 1.0), true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), (dim, dim), he(dim, 1.0), true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, s, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, s, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((n, s, d))?;
        self.proj.forward(&y)
    }
}
