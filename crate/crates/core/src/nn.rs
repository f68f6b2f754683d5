//! Small neural-network toolkit on top of candle: named parameter storage with
//! seeded initialization, affine layers, normalization and attention.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{TensorData, TensorMap};
use crate::error::{invalid, Error, Result};

/// Trainable parameters keyed by name. Iteration order (and therefore
/// checkpoint and packing order) is lexicographic by name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
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

    fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, shape, values)
    }

    /// Glorot-uniform matrix of shape `(fan_in, fan_out)`.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Tensor> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, &[fan_in, fan_out], values)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn export(&self) -> Result<TensorMap> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), TensorData::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites every parameter in place. Names and shapes must match exactly.
    pub fn import(&self, map: &TensorMap) -> Result<()> {
        if map.len() != self.vars.len() {
            return Err(invalid(format!(
                "expected {} tensors, got {}",
                self.vars.len(),
                map.len()
            )));
        }
        for (name, var) in &self.vars {
            let data = map.get(name).ok_or_else(|| invalid(format!("missing tensor `{name}`")))?;
            if data.shape != var.dims() {
                return Err(Error::ShapeMismatch { expected: var.dims().to_vec(), actual: data.shape.clone() });
            }
            var.set(&data.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Xavier,
    Zeros,
    Normal(f64),
}

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        let wname = format!("{prefix}.weight");
        let weight = match init {
            Init::Xavier => store.xavier(&wname, fan_in, fan_out)?,
            Init::Zeros => store.zeros(&wname, &[fan_in, fan_out])?,
            Init::Normal(std) => store.normal(&wname, &[fan_in, fan_out], std)?,
        };
        let bias = store.zeros(&format!("{prefix}.bias"), &[fan_out])?;
        Ok(Linear { weight, bias })
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn fan_out(&self) -> usize {
        self.bias.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| invalid("linear input must have rank >= 1"))?;
        let rows = x.elem_count() / fan_in.max(1);
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.fan_out();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension, without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-6;
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + EPS)?.sqrt()?)?)
}

/// Softmax over the last dimension. The max shift is detached since softmax
/// is invariant to it.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, l, h) = x.dims3()?;
    Ok(x.reshape((n, l, heads, h / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Scaled dot-product attention. `q: (N, Lq, H)`, `k, v: (N, Lk, H)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, lq, h) = q.dims3()?;
    if h % heads != 0 {
        return Err(invalid(format!("hidden size {h} not divisible by {heads} heads")));
    }
    let scale = 1.0 / ((h / heads) as f64).sqrt();
    let q = split_heads(q, heads)?;
    let k = split_heads(k, heads)?;
    let v = split_heads(v, heads)?;
    let scores = (q.matmul(&k.t()?)? * scale)?;
    let out = softmax_last(&scores)?.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((n, lq, h))?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}
