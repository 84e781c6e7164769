//! Named, seeded parameter storage.
//!
//! candle's own initializers draw from an unseedable generator, so every
//! parameter here is initialized from a caller-supplied ChaCha stream.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use vegecast_core::cube::{read_f32_file, write_f32_file, ArrayEntry, DType as FileDType};
use vegecast_core::rng::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

impl Init {
    fn sample(self, n: usize, rng: &mut Rng) -> Vec<f64> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect(),
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        }
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(shape: &[usize], dtype: DType, rng: &mut Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a new parameter and returns a tensor handle sharing its storage.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        let n = shape.iter().product();
        let t = Tensor::from_vec(init.sample(n, rng), shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat f32 copies of every parameter, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), flat_f32(v.as_tensor())?)))
            .collect()
    }

    pub fn restore(&self, snap: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        for (name, var) in &self.vars {
            let vals = snap
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("snapshot lacks parameter `{name}`")))?;
            self.set_flat(name, var, vals)?;
        }
        Ok(())
    }

    fn set_flat(&self, name: &str, var: &Var, vals: &[f32]) -> Result<()> {
        if vals.len() != var.elem_count() {
            return Err(Error::Corrupt {
                name: name.to_string(),
                detail: format!("expected {} values, found {}", var.elem_count(), vals.len()),
            });
        }
        let t = Tensor::from_slice(vals, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in flat_f32(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Writes one raw little-endian f32 file per parameter into `dir`.
    pub fn save_arrays(&self, dir: &Path) -> Result<BTreeMap<String, ArrayEntry>> {
        let mut entries = BTreeMap::new();
        for (name, var) in &self.vars {
            let file = format!("{name}.bin");
            write_f32_file(&dir.join(&file), flat_f32(var.as_tensor())?.into_iter())?;
            entries.insert(
                name.clone(),
                ArrayEntry {
                    shape: var.dims().to_vec(),
                    dtype: FileDType::F32,
                    file,
                },
            );
        }
        Ok(entries)
    }

    /// Overwrites every registered parameter from `dir`. The manifest
    /// entries must cover exactly the registered names with matching shapes.
    pub fn load_arrays(&self, dir: &Path, entries: &BTreeMap<String, ArrayEntry>) -> Result<()> {
        for name in entries.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Corrupt {
                    name: name.clone(),
                    detail: "not a parameter of the configured model".into(),
                });
            }
        }
        for (name, var) in &self.vars {
            let e = entries.get(name).ok_or_else(|| Error::Corrupt {
                name: name.clone(),
                detail: "missing from manifest".into(),
            })?;
            if e.shape != var.dims() {
                return Err(Error::Corrupt {
                    name: name.clone(),
                    detail: format!("shape {:?} does not match model shape {:?}", e.shape, var.dims()),
                });
            }
            let vals = read_f32_file(&dir.join(&e.file), name, var.elem_count()).map_err(|err| {
                Error::Corrupt {
                    name: name.clone(),
                    detail: err.to_string(),
                }
            })?;
            self.set_flat(name, var, &vals)?;
        }
        Ok(())
    }
}

pub fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}
