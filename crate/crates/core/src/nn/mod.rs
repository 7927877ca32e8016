//! Minimal channels-last neural network toolkit on top of `candle-core`.
//!
//! Parameters live in a [`ParamStore`] whose initialisation is driven by a
//! seeded ChaCha stream, so two stores built with the same seed hold
//! bit-identical weights.

mod checkpoint;
mod im2col;
mod layers;
mod optim;

pub use checkpoint::Checkpoint;
pub use im2col::Unfold;
pub use layers::{
    attention, softmax_last, upsample_nearest2x, Conv2d, Embedding, GroupNorm, KeyMask, LayerNorm, Linear,
};
pub use optim::{Adam, AdamConfig, LrSchedule};

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Named, seeded collection of trainable variables.
pub struct ParamStore {
    vars: IndexMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: IndexMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`. Missing names or shape
    /// differences are errors; extra names are ignored.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::shape(var.dims(), src.dims()));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Overwrites the parameters that `tensors` names and returns how many
    /// were loaded. Shape differences are errors.
    pub fn assign_present(&self, tensors: &HashMap<String, Tensor>) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in &self.vars {
            let Some(src) = tensors.get(name) else { continue };
            if src.dims() != var.dims() {
                return Err(Error::Shape {
                    expected: format!("{name} {:?}", var.dims()),
                    got: format!("{:?}", src.dims()),
                });
            }
            var.set(&src.to_dtype(self.dtype)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Elementwise equality of all parameters with another store.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        let mut worst = 0f64;
        for (name, var) in &self.vars {
            let o = other
                .vars
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            let d = (var.as_tensor() - o.as_tensor())?
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

/// Standard-normal tensor drawn from an explicit RNG.
pub fn randn_tensor(rng: &mut impl Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean of a tensor as `f64`.
pub fn scalar_mean(t: &Tensor) -> Result<f64> {
    Ok(t.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flattened values as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
