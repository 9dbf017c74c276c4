//! Optimizers. Any implementation of [`Optimizer`] can drive training;
//! [`AdamW`] is the default.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Module;

/// Named optimizer state arrays, stored alongside parameters in checkpoints.
pub type OptimizerState = BTreeMap<String, Vec<f64>>;

pub trait Optimizer {
    fn name(&self) -> &'static str;
    /// Applies one update from the gradients currently held by `model`.
    fn step(&mut self, model: &mut dyn Module);
    fn steps_taken(&self) -> u64;
    fn state(&self) -> OptimizerState;
    fn load_state(&mut self, state: &OptimizerState) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// Adam with decoupled weight decay, applied to every trainable parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, model: &mut dyn Module) {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p.value[i] -= c.lr * (update + c.weight_decay * p.value[i]);
            }
        });
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }

    fn state(&self) -> OptimizerState {
        let mut s = OptimizerState::new();
        s.insert("t".into(), vec![self.t as f64]);
        for (k, v) in &self.m {
            s.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.v {
            s.insert(format!("v.{k}"), v.clone());
        }
        s
    }

    fn load_state(&mut self, state: &OptimizerState) -> Result<()> {
        let t = state.get("t").and_then(|v| v.first()).ok_or_else(|| Error::Checkpoint("optimizer state lacks step".into()))?;
        self.t = *t as u64;
        self.m.clear();
        self.v.clear();
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("m.") {
                self.m.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.v.insert(name.to_string(), v.clone());
            }
        }
        Ok(())
    }
}

pub fn build_optimizer(name: &str, config: AdamWConfig) -> Result<Box<dyn Optimizer>> {
    match name {
        "adamw" => Ok(Box::new(AdamW::new(config))),
        other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
    }
}
