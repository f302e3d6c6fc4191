use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable arrays: backbone, image projection, output head, the
/// per-level projection heads and the log-temperature.
#[derive(Debug, Clone)]
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

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        self.vars.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(Var::as_tensor)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flattened values of one parameter, widened to f64.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self
            .get(name)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let t = Tensor::from_slice(values, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Deep copy with fresh storage, so updates to one store never leak
    /// into the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype);
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> Result<bool> {
        for name in self.vars.keys() {
            if self.values(name)?.iter().any(|v| !v.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Seeded initializer producing tensors in the store's dtype.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    /// Glorot-uniform `fan_in x fan_out` matrix.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Result<Tensor> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }

    pub fn constant(shape: &[usize], value: f64) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &Device::Cpu)?)
    }
}
