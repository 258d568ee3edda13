//! Parameter storage and the small set of layers the models need.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NetError, Result};
use crate::ops;

/// Named trainable variables plus non-trainable buffers (batch-norm
/// statistics). Initialization draws from a seeded stream, so two stores
/// built with the same seed and layer sequence are identical.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), buffers: BTreeMap::new(), dtype, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Tensor> {
        let var = Var::from_tensor(&ops::tensor_from(values, shape, self.dtype)?)?;
        let t = var.as_tensor().clone();
        let map = if trainable { &mut self.vars } else { &mut self.buffers };
        if map.insert(name.to_string(), var).is_some() {
            return Err(NetError::Param(format!("duplicate parameter name {name}")));
        }
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.insert(name, values, shape, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape, false)
    }

    pub(crate) fn buffer_var(&self, name: &str) -> Option<&Var> {
        self.buffers.get(name)
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn trainable_named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Every tensor (trainable and buffers) by name.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().chain(&self.buffers).map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrites every stored tensor from `tensors`; names and shapes must
    /// match exactly.
    pub fn load(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        let expected = self.vars.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(NetError::State(format!("expected {expected} tensors, found {}", tensors.len())));
        }
        for (name, var) in self.vars.iter().chain(&self.buffers) {
            let t = tensors.get(name).ok_or_else(|| NetError::State(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(NetError::Shape(format!("{name}: stored {:?}, model {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&Device::Cpu)?)?;
        }
        Ok(())
    }
}

/// Forward-pass context: training flag and the dropout stream.
pub struct Ctx {
    train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { train: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(seed: u64) -> Self {
        Self { train: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = ps.uniform(&format!("{name}.weight"), &[cout, cin * kernel * kernel], bound)?;
        let bias = Some(ps.uniform(&format!("{name}.bias"), &[cout], bound)?);
        Ok(Self { weight, bias, kernel, stride, pad })
    }

    /// Weights uniform in `±bound`, zero bias.
    pub fn with_bound(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, bound: f64) -> Result<Self> {
        let weight = ps.uniform(&format!("{name}.weight"), &[cout, cin * kernel * kernel], bound)?;
        let bias = Some(ps.constant(&format!("{name}.bias"), &[cout], 0.0)?);
        Ok(Self { weight, bias, kernel, stride: 1, pad: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.kernel, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / (cin as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[cout, cin], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[cout], bound)?,
        })
    }

    /// Applies to the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, &self.bias)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gamma, &self.beta, 1e-6)
    }
}

/// Batch normalization over `(B, H, W)` per channel. Training uses batch
/// statistics and updates running estimates; evaluation uses the running
/// estimates.
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    mean_name: String,
    var_name: String,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = ps.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let beta = ps.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        ps.buffer(&mean_name, &[channels], 0.0)?;
        ps.buffer(&var_name, &[channels], 1.0)?;
        let running_mean = ps.buffer_var(&mean_name).expect("just inserted").clone();
        let running_var = ps.buffer_var(&var_name).expect("just inserted").clone();
        Ok(Self { gamma, beta, mean_name, var_name, running_mean, running_var, momentum: 0.1, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if ctx.is_train() {
            let flat = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let (mean, var) = (mean.flatten_all()?, var.flatten_all()?);
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            let m = self.momentum;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?)
                .map_err(|e| NetError::State(format!("{}: {e}", self.mean_name)))?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)
                .map_err(|e| NetError::State(format!("{}: {e}", self.var_name)))?;
            (mean, var)
        } else {
            (self.running_mean.as_tensor().clone(), self.running_var.as_tensor().clone())
        };
        let shape = (1, c, 1, 1);
        let scale = (self.gamma.reshape(shape)?.broadcast_div(&(var.reshape(shape)? + self.eps)?.sqrt()?))?;
        Ok(x.broadcast_sub(&mean.reshape(shape)?)?.broadcast_mul(&scale)?.broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Inverted dropout; identity outside training.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        if !ctx.train || self.p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f64> = (0..x.elem_count()).map(|_| if ctx.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mask = ops::tensor_from(mask, x.shape(), x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let mut ps = ParamStore::new(seed, DType::F64);
            Conv2d::new(&mut ps, "c", 3, 4, 3, 1, 1).unwrap();
            Linear::new(&mut ps, "l", 4, 2).unwrap();
            ps.tensors().into_iter().map(|(k, v)| (k, v.flatten_all().unwrap().to_vec1::<f64>().unwrap())).collect::<Vec<_>>()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new(0, DType::F32);
        ps.constant("a", &[1], 0.0).unwrap();
        assert!(ps.constant("a", &[1], 0.0).is_err());
    }

    #[test]
    fn batchnorm_normalizes_in_training_and_tracks_statistics() {
        let mut ps = ParamStore::new(0, DType::F64);
        let bn = BatchNorm2d::new(&mut ps, "bn", 2).unwrap();
        let x = Tensor::from_vec((0..32).map(|i| i as f64 * 0.5 + 3.0).collect::<Vec<_>>(), (2, 2, 2, 4), &Device::Cpu).unwrap();
        let y = bn.forward(&x, &Ctx::train(0)).unwrap();
        let per_channel = y.transpose(0, 1).unwrap().reshape((2, 16)).unwrap();
        for m in per_channel.mean(1).unwrap().to_vec1::<f64>().unwrap() {
            assert!(m.abs() < 1e-12);
        }
        let rm = ps.tensors()["bn.running_mean"].to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|&v| v > 0.0));
        // eval path is a fixed affine map
        let a = bn.forward(&x, &Ctx::eval()).unwrap();
        let b = bn.forward(&x, &Ctx::eval()).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_unbiased_in_training() {
        let x = Tensor::ones((1, 1, 100, 100), DType::F64, &Device::Cpu).unwrap();
        let d = Dropout { p: 0.1 };
        let e = d.forward(&x, &mut Ctx::eval()).unwrap();
        assert_eq!(e.sum_all().unwrap().to_scalar::<f64>().unwrap(), 10_000.0);
        let t = d.forward(&x, &mut Ctx::train(3)).unwrap();
        let mean = t.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn load_restores_values() {
        let mut a = ParamStore::new(1, DType::F32);
        Conv2d::new(&mut a, "c", 2, 2, 3, 1, 1).unwrap();
        let mut b = ParamStore::new(2, DType::F32);
        Conv2d::new(&mut b, "c", 2, 2, 3, 1, 1).unwrap();
        let saved: std::collections::HashMap<_, _> = a.tensors().into_iter().collect();
        b.load(&saved).unwrap();
        for (k, v) in b.tensors() {
            assert_eq!(v.flatten_all().unwrap().to_vec1::<f32>().unwrap(), saved[&k].flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }
}
