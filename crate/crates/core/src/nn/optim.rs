use std::collections::BTreeMap;

use super::{shape_err, Module, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dampening: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            dampening: 0.0,
        }
    }
}

/// SGD with Nesterov momentum, in the formulation used by PyTorch:
/// `g ← ∇ + λp; b ← μb + (1−τ)g; p ← p − lr·(g + μb)`, with the buffer
/// initialized to `g` on the first step.
#[derive(Debug, Clone)]
pub struct SgdNesterov {
    pub cfg: SgdConfig,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl SgdNesterov {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor) -> Result<(), NnError> {
        let Some(grad) = param.grad.as_ref() else {
            return Ok(());
        };
        let c = self.cfg;
        let n = param.data.len();
        let fresh = !self.buffers.contains_key(name);
        let buf = self
            .buffers
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        if buf.len() != n {
            return Err(shape_err(format!("momentum buffer for {name} has wrong length")));
        }
        for i in 0..n {
            let g = grad[i] + c.weight_decay * param.data[i];
            let step = if c.momentum > 0.0 {
                buf[i] = if fresh {
                    g
                } else {
                    c.momentum * buf[i] + (1.0 - c.dampening) * g
                };
                g + c.momentum * buf[i]
            } else {
                g
            };
            param.data[i] -= c.lr * step;
        }
        Ok(())
    }

    /// Steps every trainable tensor whose name passes `select`.
    pub fn step_module<M: Module + ?Sized>(
        &mut self,
        module: &mut M,
        select: &dyn Fn(&str) -> bool,
    ) -> Result<(), NnError> {
        let mut result = Ok(());
        module.visit_params(&mut |name, t| {
            if result.is_ok() && t.requires_grad() && select(name) {
                result = self.step(name, t);
            }
        });
        result
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.buffers
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update with an explicit gradient.
    pub fn step_with(&mut self, name: &str, param: &mut [f64], grad: &[f64]) -> Result<(), NnError> {
        if grad.len() != param.len() {
            return Err(shape_err(format!("gradient for {name} has wrong length")));
        }
        let c = self.cfg;
        let n = param.len();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        if slot.m.len() != n {
            return Err(shape_err(format!("Adam moments for {name} have wrong length")));
        }
        slot.t += 1;
        let bc1 = 1.0 - c.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - c.beta2.powi(slot.t as i32);
        for i in 0..n {
            let g = grad[i] + c.weight_decay * param[i];
            slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
            slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            param[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
        Ok(())
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor) -> Result<(), NnError> {
        let Some(grad) = param.grad.take() else {
            return Ok(());
        };
        let r = self.step_with(name, &mut param.data, &grad);
        param.grad = Some(grad);
        r
    }

    pub fn step_module<M: Module + ?Sized>(
        &mut self,
        module: &mut M,
        select: &dyn Fn(&str) -> bool,
    ) -> Result<(), NnError> {
        let mut result = Ok(());
        module.visit_params(&mut |name, t| {
            if result.is_ok() && t.requires_grad() && select(name) {
                result = self.step(name, t);
            }
        });
        result
    }
}
