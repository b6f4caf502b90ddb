//! SGD with momentum and Adam over a [`ParamStore`]. Parameters without a
//! gradient in the supplied [`GradStore`] are skipped entirely: no decay, no
//! state change.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

fn check_rates(lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::param(format!("learning rate must be positive, got {lr}")));
    }
    if !(weight_decay >= 0.0) {
        return Err(Error::param(format!("weight decay must be nonnegative, got {weight_decay}")));
    }
    Ok(())
}

/// `g ← ∇ + wd·θ; v ← μ·v + g; θ ← θ − lr·v` (velocity starts at the first gradient).
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        check_rates(config.lr, config.weight_decay)?;
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::param("SGD momentum must lie in [0,1)"));
        }
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so the stored state never holds on to an autograd graph
            let mut g = g.detach();
            if self.config.weight_decay != 0.0 {
                g = (g + var.as_tensor().detach().affine(self.config.weight_decay, 0.0)?)?;
            }
            let v = match self.velocity.get(name) {
                Some(prev) if self.config.momentum != 0.0 => (prev.affine(self.config.momentum, 0.0)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor().detach() - v.affine(self.config.lr, 0.0)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) {
        for (k, v) in &self.velocity {
            out.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Restores velocities saved by [`export`](Self::export); parameters absent
    /// from the snapshot start without momentum.
    pub fn import(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>, params: &ParamStore) -> Result<()> {
        let mut velocity = BTreeMap::new();
        for (name, var) in params.iter() {
            if let Some(t) = tensors.get(&format!("{prefix}{name}")) {
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("velocity for {name} has wrong shape")));
                }
                velocity.insert(name.clone(), t.clone());
            }
        }
        self.velocity = velocity;
        Ok(())
    }
}

/// Adam with bias correction and L2-style weight decay; step counts are kept per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        check_rates(config.lr, config.weight_decay)?;
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || !(config.eps > 0.0) {
            return Err(Error::param("Adam betas must lie in [0,1) and eps be positive"));
        }
        Ok(Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> &BTreeMap<String, u64> {
        &self.steps
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let c = self.config;
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mut g = g.detach();
            if c.weight_decay != 0.0 {
                g = (g + var.as_tensor().detach().affine(c.weight_decay, 0.0)?)?;
            }
            let m = match self.m.get(name) {
                Some(prev) => (prev.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?,
                None => g.affine(1.0 - c.beta1, 0.0)?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(prev) => (prev.affine(c.beta2, 0.0)? + g2.affine(1.0 - c.beta2, 0.0)?)?,
                None => g2.affine(1.0 - c.beta2, 0.0)?,
            };
            let t = self.steps.get(name).copied().unwrap_or(0) + 1;
            let bc1 = 1.0 - c.beta1.powi(t as i32);
            let bc2 = 1.0 - c.beta2.powi(t as i32);
            let m_hat = m.affine(1.0 / bc1, 0.0)?;
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + c.eps)?;
            let update = (m_hat / denom)?.affine(c.lr, 0.0)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
            self.steps.insert(name.clone(), t);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut HashMap<String, Tensor>) {
        for (k, t) in &self.m {
            out.insert(format!("{prefix}m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}v.{k}"), t.clone());
        }
    }

    pub fn import(
        &mut self,
        prefix: &str,
        tensors: &HashMap<String, Tensor>,
        steps: &BTreeMap<String, u64>,
        params: &ParamStore,
    ) -> Result<()> {
        let (mut m, mut v, mut s) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (name, var) in params.iter() {
            let (tm, tv) = (tensors.get(&format!("{prefix}m.{name}")), tensors.get(&format!("{prefix}v.{name}")));
            match (tm, tv, steps.get(name)) {
                (Some(tm), Some(tv), Some(&n)) => {
                    if tm.dims() != var.dims() || tv.dims() != var.dims() {
                        return Err(Error::Checkpoint(format!("moments for {name} have wrong shape")));
                    }
                    m.insert(name.clone(), tm.clone());
                    v.insert(name.clone(), tv.clone());
                    s.insert(name.clone(), n);
                }
                (None, None, None) => {}
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {name}"))),
            }
        }
        self.m = m;
        self.v = v;
        self.steps = s;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn scalar_store(value: f64) -> (ParamStore, Var) {
        let mut s = ParamStore::new(&Device::Cpu);
        let v = s.insert("w", Tensor::new(&[value], &Device::Cpu).unwrap()).unwrap();
        (s, v)
    }

    fn value(v: &Var) -> f64 {
        v.as_tensor().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn sgd_matches_hand_recurrence() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let (store, w) = scalar_store(1.0);
        let mut opt = Sgd::new(cfg).unwrap();
        let (mut theta, mut vel) = (1.0f64, None::<f64>);
        for _ in 0..5 {
            // loss = θ², gradient 2θ
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&store, &loss.backward().unwrap()).unwrap();
            let g = 2.0 * theta + 0.01 * theta;
            let v = vel.map_or(g, |p| 0.9 * p + g);
            theta -= 0.1 * v;
            vel = Some(v);
            assert!((value(&w) - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let cfg = AdamConfig::default();
        let (store, w) = scalar_store(0.5);
        let mut opt = Adam::new(cfg).unwrap();
        let (mut theta, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for t in 1..=4 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&store, &loss.backward().unwrap()).unwrap();
            let g = 2.0 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((value(&w) - theta).abs() < 1e-12);
        }
        assert_eq!(opt.steps()["w"], 4);
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let mut s = ParamStore::new(&Device::Cpu);
        let a = s.insert("a", Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let b = s.insert("b", Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let loss = a.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        sgd.step(&s, &grads).unwrap();
        let mut adam = Adam::new(AdamConfig { weight_decay: 0.1, ..Default::default() }).unwrap();
        adam.step(&s, &grads).unwrap();
        assert_eq!(value(&b), 1.0);
        assert_ne!(value(&a), 1.0);
        assert!(!adam.steps().contains_key("b"));
    }

    #[test]
    fn state_round_trip() {
        let (store, w) = scalar_store(0.3);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut sgd = Sgd::new(SgdConfig::default()).unwrap();
        for _ in 0..2 {
            let g = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.step(&store, &g).unwrap();
            sgd.step(&store, &g).unwrap();
        }
        let mut snap = HashMap::new();
        adam.export("adam.", &mut snap);
        sgd.export("sgd.", &mut snap);
        let mut adam2 = Adam::new(AdamConfig::default()).unwrap();
        adam2.import("adam.", &snap, &adam.steps().clone(), &store).unwrap();
        let mut sgd2 = Sgd::new(SgdConfig::default()).unwrap();
        sgd2.import("sgd.", &snap, &store).unwrap();

        let (store2, w2) = scalar_store(value(&w));
        let g = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        adam.step(&store, &g).unwrap();
        sgd.step(&store, &g).unwrap();
        let g2 = w2.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        adam2.step(&store2, &g2).unwrap();
        sgd2.step(&store2, &g2).unwrap();
        assert_eq!(value(&w).to_bits(), value(&w2).to_bits());
    }

    #[test]
    fn invalid_configs() {
        assert!(Sgd::new(SgdConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(Sgd::new(SgdConfig { momentum: 1.0, ..Default::default() }).is_err());
        assert!(Adam::new(AdamConfig { eps: 0.0, ..Default::default() }).is_err());
    }
}
