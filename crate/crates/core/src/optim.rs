//! First-order optimisers with PyTorch update semantics (coupled L2 decay).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// SGD with heavy-ball momentum; state keyed by caller-chosen slot ids.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    buffers: HashMap<usize, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            buffers: HashMap::new(),
        }
    }

    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.cfg;
        let first = !self.buffers.contains_key(&slot);
        let buf = self.buffers.entry(slot).or_insert_with(|| vec![0.0; param.len()]);
        for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
            let d = g + weight_decay * *p;
            *b = if first { d } else { momentum * *b + d };
            *p -= lr * *b;
        }
    }
}

#[derive(Clone, Debug)]
struct AdamSlot {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    slots: HashMap<usize, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            slots: HashMap::new(),
        }
    }

    /// Descent step; pass a negated gradient to ascend.
    pub fn step(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        let c = self.cfg;
        let s = self.slots.entry(slot).or_insert_with(|| AdamSlot {
            t: 0,
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        s.t += 1;
        let bc1 = 1.0 - c.beta1.powi(s.t as i32);
        let bc2 = 1.0 - c.beta2.powi(s.t as i32);
        for i in 0..param.len() {
            let g = grad[i] + c.weight_decay * param[i];
            s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g;
            s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = s.m[i] / bc1;
            let vhat = s.v[i] / bc2;
            param[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
}
