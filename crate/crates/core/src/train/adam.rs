//! Adam with bias correction and checkpointable moments.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.99;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: BTreeMap<String, u64>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(BETA1, BETA2, EPS)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Global L2 norm of the gradients of `params`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Updates every parameter that has a gradient. With `clip`, gradients are
    /// rescaled so their global norm does not exceed it.
    pub fn step(
        &mut self,
        params: &ParamStore,
        grads: &GradStore,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<()> {
        let scale = match clip {
            Some(c) => {
                let n = Self::grad_norm(params, grads)?;
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // leaf gradients still reference the forward graph
            let g = g.detach();
            let g = if scale != 1.0 {
                g.affine(scale, 0.0)?
            } else {
                g
            };
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => {
                    (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?
                }
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let t = self.steps.get(name).copied().unwrap_or(0) + 1;
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + self.eps)?;
            let update = m.affine(lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor() - update)?.detach())?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
            self.steps.insert(name.clone(), t);
        }
        Ok(())
    }

    /// Moments and per-parameter step counts as named tensors.
    pub fn state_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (k, m) in &self.m {
            out.insert(format!("m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("v.{k}"), v.clone());
        }
        for (k, t) in &self.steps {
            out.insert(
                format!("t.{k}"),
                Tensor::new(&[*t as i64], &candle_core::Device::Cpu)?,
            );
        }
        Ok(out)
    }

    pub fn load_state(&mut self, map: &HashMap<String, Tensor>, params: &ParamStore) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.steps.clear();
        for (name, var) in params.iter() {
            let Some(t) = map.get(&format!("t.{name}")) else {
                continue;
            };
            let step = t.to_vec1::<i64>()?[0] as u64;
            let get = |p: &str| -> Result<Tensor> {
                let t = map.get(&format!("{p}.{name}")).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer state lacks {p}.{name}"))
                })?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment shape mismatch for {name}"
                    )));
                }
                Ok(t.to_dtype(var.dtype())?)
            };
            self.m.insert(name.clone(), get("m")?);
            self.v.insert(name.clone(), get("v")?);
            self.steps.insert(name.clone(), step);
        }
        Ok(())
    }

    pub fn moments_finite(&self) -> Result<bool> {
        for t in self.m.values().chain(self.v.values()) {
            let s = t
                .abs()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
