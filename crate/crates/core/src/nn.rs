//! Minimal layer toolkit on top of candle with explicitly seeded parameter
//! initialization. Parameters live in a name-ordered [`ParamStore`] so that
//! optimizer traversal, checkpointing, and fingerprints are deterministic.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self {
            device: device.clone(),
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, init: Tensor) -> Result<Var> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::contract(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&init)?;
        self.vars.insert(name, var.clone());
        Ok(var)
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent copy: new storage, same values.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            device: self.device.clone(),
            vars,
        })
    }

    /// Overwrites every parameter of `self` with the value of the same-named
    /// parameter in `other`. Shapes must agree.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.check_aligned(other)?;
        for (k, v) in &self.vars {
            v.set(other.vars[k].as_tensor())?;
        }
        Ok(())
    }

    pub fn check_aligned(&self, other: &ParamStore) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::contract("parameter stores differ in size"));
        }
        for (k, v) in &self.vars {
            let o = other
                .vars
                .get(k)
                .ok_or_else(|| Error::contract(format!("parameter {k} missing")))?;
            if v.shape() != o.shape() {
                return Err(Error::contract(format!(
                    "parameter {k}: shape {:?} vs {:?}",
                    v.shape(),
                    o.shape()
                )));
            }
        }
        Ok(())
    }

    /// Snapshot of all values under `prefix`.
    pub fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            out.insert(format!("{prefix}{k}"), v.as_tensor().copy()?);
        }
        Ok(())
    }

    /// Restores values saved with [`export`](Self::export). Every parameter must be present.
    pub fn import(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        // validate first so a bad snapshot leaves the store untouched
        let mut staged = Vec::with_capacity(self.vars.len());
        for (k, v) in &self.vars {
            let key = format!("{prefix}{k}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
            staged.push((v, t.to_dtype(v.dtype())?.to_device(&self.device)?));
        }
        for (v, t) in staged {
            v.set(&t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values. Equal fingerprints mean
    /// bit-identical parameters.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (k, v) in &self.vars {
            h.update(k.as_bytes());
            h.update(format!("{:?}", v.dims()).as_bytes());
            hash_tensor_into(&mut h, v.as_tensor())?;
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Euclidean norm of the gradients of this store's parameters. Parameters
    /// with no gradient contribute zero.
    pub fn grad_norm(&self, grads: &candle_core::backprop::GradStore) -> Result<f64> {
        self.grad_norm_prefixed(grads, "")
    }

    /// As [`grad_norm`](Self::grad_norm), restricted to names starting with `prefix`.
    pub fn grad_norm_prefixed(&self, grads: &candle_core::backprop::GradStore, prefix: &str) -> Result<f64> {
        let mut acc = 0.0f64;
        for v in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v) {
            if let Some(g) = grads.get(v.as_tensor()) {
                acc += g
                    .to_dtype(DType::F64)?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(acc.sqrt())
    }
}

fn hash_tensor_into(h: &mut Sha256, t: &Tensor) -> Result<()> {
    match t.dtype() {
        DType::F64 => {
            for x in t.flatten_all()?.to_vec1::<f64>()? {
                h.update(x.to_le_bytes());
            }
        }
        _ => {
            for x in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// SHA-256 of a tensor's values (used as a regression anchor for outputs).
pub fn tensor_fingerprint(t: &Tensor) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format!("{:?}", t.dims()).as_bytes());
    hash_tensor_into(&mut h, t)?;
    Ok(hex::encode(h.finalize()))
}

/// `N(0, std²)` samples drawn from `rng` in row-major order.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::param(e.to_string()))?;
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal initialized convolution with `padding = kernel / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let dev = store.device().clone();
        let w = normal_tensor(rng, &[out_ch, in_ch, kernel, kernel], std, &dev)?;
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(out_ch, DType::F32, &dev)?)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.bias.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), as torch's default
        let bound = 1.0 / (in_dim as f32).sqrt();
        let dev = store.device().clone();
        let w: Vec<f32> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f32> = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.insert(format!("{name}.weight"), Tensor::from_vec(w, (out_dim, in_dim), &dev)?)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::from_vec(b, out_dim, &dev)?)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn out_dim(&self) -> usize {
        self.bias.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.clamp(1, channels);
        if channels % groups != 0 {
            return Err(Error::param(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        let dev = store.device().clone();
        let gamma = store.insert(format!("{name}.gamma"), Tensor::ones(channels, DType::F32, &dev)?)?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(channels, DType::F32, &dev)?)?;
        Ok(Self {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Row-wise L2 normalization of a `B×D` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::MAX)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean over the spatial dimensions of a `B×C×H×W` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = |seed| {
            let mut store = ParamStore::new(&Device::Cpu);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Conv2d::new(&mut store, "c", 3, 4, 3, 1, 1.0, &mut rng).unwrap();
            Linear::new(&mut store, "l", 4, 2, &mut rng).unwrap();
            store.fingerprint().unwrap()
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1), make(2));
    }

    #[test]
    fn deep_clone_is_independent() {
        let mut store = ParamStore::new(&Device::Cpu);
        let v = store.insert("p", Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        let copy = store.deep_clone().unwrap();
        v.set(&Tensor::new(&[5f32, 6.0], &Device::Cpu).unwrap()).unwrap();
        let c = copy.get("p").unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(c, vec![1.0, 2.0]);
    }

    #[test]
    fn import_rejects_shape_mismatch_without_partial_write() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev);
        store.insert("a", Tensor::new(&[1f32], &dev).unwrap()).unwrap();
        store.insert("b", Tensor::new(&[2f32], &dev).unwrap()).unwrap();
        let mut snap = HashMap::new();
        snap.insert("a".to_string(), Tensor::new(&[9f32], &dev).unwrap());
        snap.insert("b".to_string(), Tensor::new(&[9f32, 9.0], &dev).unwrap());
        assert!(store.import("", &snap).is_err());
        assert_eq!(store.get("a").unwrap().to_vec1::<f32>().unwrap(), vec![1.0]);
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(&dev);
        let gn = GroupNorm::new(&mut store, "gn", 4, 2).unwrap();
        let x = Tensor::arange(0f32, 32.0, &dev).unwrap().reshape((1, 4, 2, 4)).unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 16)).unwrap();
        let mean = y.mean(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-5));
    }

    #[test]
    fn l2_rows_are_unit() {
        let x = Tensor::new(&[[3f32, 4.0], [1.0, 0.0]], &Device::Cpu).unwrap();
        let y = l2_normalize(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(y[0], vec![0.6, 0.8]);
        assert_eq!(y[1], vec![1.0, 0.0]);
    }
}
