//! Thin helpers over candle for the small learned networks (mapping network, decoder) and the
//! fixed convolutional encoders.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named multi-dimensional f32 array, the unit of checkpoint storage.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

/// Learnable tensors keyed by name, in a deterministic order. Cloning copies the storage, so
/// a clone never observes optimizer steps taken on the original.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| {
                let copy = v.as_tensor().copy().and_then(|t| Var::from_tensor(&t));
                (k.clone(), copy.expect("copying a CPU tensor cannot fail"))
            })
            .collect();
        Self { vars }
    }
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.vars.insert(name.into(), Var::from_tensor(&tensor)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
            .as_tensor()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    pub fn to_arrays(&self, prefix: &str) -> Result<Vec<NamedArray>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor();
                Ok(NamedArray::new(
                    format!("{prefix}{k}"),
                    t.dims().to_vec(),
                    t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
                ))
            })
            .collect()
    }

    /// Overwrites every registered parameter from `arrays` (looked up as `prefix + name`),
    /// rejecting missing names and shape mismatches.
    pub fn load_arrays(&self, prefix: &str, arrays: &BTreeMap<String, NamedArray>) -> Result<()> {
        for (k, var) in &self.vars {
            let key = format!("{prefix}{k}");
            let arr = arrays
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
            if arr.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "array {key} has shape {:?}, expected {:?}",
                    arr.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(arr.data.clone(), arr.shape.as_slice(), &Device::Cpu)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Content digest of all parameter values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for arr in self.to_arrays("")? {
            h.update(arr.name.as_bytes());
            for v in &arr.data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn digest_f32(values: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f32) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// 3x3 convolution with replicate padding, so constant inputs stay constant.
pub fn conv3x3_same(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
    let w = weight.to_dtype(x.dtype())?;
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let y = padded.conv2d(&w, 0, 1, 1, 1)?;
    match bias {
        Some(b) => {
            let b = b.to_dtype(x.dtype())?;
            y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)
        }
        None => Ok(y),
    }
}

/// `x W^T + b` for `x: N x in`, `W: out x in`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    let w = weight.to_dtype(x.dtype())?;
    let b = bias.to_dtype(x.dtype())?;
    x.matmul(&w.t()?)?.broadcast_add(&b)
}

/// `ln(1 + e^x)` as `relu(x) + ln(1 + e^{-|x|})`, finite for all inputs.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

/// Logistic function through `tanh`, which keeps gradients finite.
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    ((x * 0.5)?.tanh()? + 1.0)? * 0.5
}

/// Per-channel spatial mean and population std of `N x C x H x W`, both `N x C`.
/// `eps` goes inside the square root.
pub fn channel_stats(x: &Tensor, eps: f64) -> candle_core::Result<(Tensor, Tensor)> {
    let flat = x.flatten_from(2)?;
    let mean = flat.mean_keepdim(2)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean(2)?;
    let std = (var + eps)?.sqrt()?;
    Ok((mean.squeeze(2)?, std))
}

/// `1 x C x H x W` tensor from planar values.
pub fn planar_tensor(values: &[f32], channels: usize, height: usize, width: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (1, channels, height, width), &Device::Cpu)?)
}
