use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::seed;

/// Named parameters of one part of a network. `params` are optimizable;
/// `buffers` (batch-norm running statistics) are state but never trained.
#[derive(Debug, Clone, Default)]
pub struct ParamGroup {
    pub params: BTreeMap<String, Var>,
    pub buffers: BTreeMap<String, Var>,
}

impl ParamGroup {
    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every named tensor, parameters then buffers.
    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// SHA-256 over names and little-endian values of all tensors.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.tensors() {
            h.update(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            for v in flat.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<ParamGroup> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(ParamGroup {
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
        })
    }
}

/// Deterministic parameter initializer; candle's CPU RNG cannot be seeded.
pub struct Init<'a> {
    rng: ChaCha8Rng,
    dtype: DType,
    device: &'a Device,
    group: ParamGroup,
    prefix: Vec<String>,
}

impl<'a> Init<'a> {
    pub fn new(seed: u64, dtype: DType, device: &'a Device) -> Self {
        Init {
            rng: seed::rng(seed),
            dtype,
            device,
            group: ParamGroup::default(),
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn finish(self) -> ParamGroup {
        self.group
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn tensor(&self, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        let var = self.tensor(data, shape)?;
        self.group.params.insert(self.full_name(name), var.clone());
        Ok(var)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32, buffer: bool) -> Result<Var> {
        let var = self.tensor(vec![value; shape.iter().product()], shape)?;
        let full = self.full_name(name);
        let slot = if buffer {
            &mut self.group.buffers
        } else {
            &mut self.group.params
        };
        slot.insert(full, var.clone());
        Ok(var)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Result<Conv2d> {
        self.push(name);
        let fan_in = cin * k * k;
        let weight = self.uniform("weight", &[cout, cin, k, k], (6.0 / fan_in as f64).sqrt())?;
        let bias = if bias {
            Some(self.constant("bias", &[cout], 0.0, false)?)
        } else {
            None
        };
        self.pop();
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.push(name);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = self.uniform("weight", &[fan_out, fan_in], bound)?;
        let bias = self.uniform("bias", &[fan_out], bound)?;
        self.pop();
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn linear_no_bias(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.push(name);
        let weight = self.uniform("weight", &[fan_out, fan_in], 1.0 / (fan_in as f64).sqrt())?;
        self.pop();
        Ok(Linear { weight, bias: None })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<BatchNorm2d> {
        self.push(name);
        let bn = BatchNorm2d {
            gamma: self.constant("weight", &[channels], 1.0, false)?,
            beta: self.constant("bias", &[channels], 0.0, false)?,
            running_mean: self.constant("running_mean", &[channels], 0.0, true)?,
            running_var: self.constant("running_var", &[channels], 1.0, true)?,
        };
        self.pop();
        Ok(bn)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    /// Batch statistics (and a running-average update) when `train`,
    /// running statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let m = mean.detach().flatten_all()?;
            let v = var.detach().flatten_all()?;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (m * BN_MOMENTUM)?)?,
            )?;
            self.running_var.set(
                &((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (v * BN_MOMENTUM)?)?,
            )?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// `linear → GELU → linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, input: usize, hidden: usize, output: usize) -> Result<Mlp> {
        init.push(name);
        let first = init.linear("fc1", input, hidden)?;
        let second = init.linear("fc2", hidden, output)?;
        init.pop();
        Ok(Mlp { first, second })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x)?.gelu_erf()?)
    }
}

/// Mean over the spatial axes of an `N × C × H × W` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_named() {
        let dev = Device::Cpu;
        let build = |seed| {
            let mut init = Init::new(seed, DType::F32, &dev);
            init.push("block");
            init.conv("conv", 3, 4, 3, 1, 1, true).unwrap();
            init.linear("fc", 4, 2).unwrap();
            init.pop();
            init.finish()
        };
        let (a, b, c) = (build(1), build(1), build(2));
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
        let names: Vec<_> = a.params.keys().cloned().collect();
        assert_eq!(names, ["block.conv.bias", "block.conv.weight", "block.fc.bias", "block.fc.weight"]);
        assert_eq!(a.num_params(), 4 * 3 * 9 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks_running_stats() {
        let dev = Device::Cpu;
        let mut init = Init::new(0, DType::F64, &dev);
        let bn = init.batch_norm("bn", 2).unwrap();
        let group = init.finish();
        let x = Tensor::from_vec((0..16).map(f64::from).collect::<Vec<_>>(), (2, 2, 2, 2), &dev).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-12);
        let rm = group.buffers["bn.running_mean"].as_tensor().to_vec1::<f64>().unwrap();
        // Channel 0 holds 0..4 and 8..12 (mean 5.5), channel 1 holds 4..8 and 12..16 (mean 9.5).
        assert!((rm[0] - 0.55).abs() < 1e-12 && (rm[1] - 0.95).abs() < 1e-12);
    }
}
