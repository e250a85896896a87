//! Parameter updates: AdamW with decoupled weight decay, and plain SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

/// Learning-rate multiplier over the steps of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at the first step towards 0 after the last.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 0-based `step` out of `total`.
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if total == 0 => 1.0,
            LrSchedule::Cosine => {
                let progress = (step.min(total) as f64) / total as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Initial learning rate; `schedule` scales it per step.
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-4,
            schedule: LrSchedule::Cosine,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive; weight decay and clip norm nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct Optimizer {
    pub config: OptimizerConfig,
    steps: u64,
    /// Steps the schedule spans; 0 keeps the initial rate.
    planned_steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            steps: 0,
            planned_steps: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Sets the step count the learning-rate schedule spans.
    pub fn plan(&mut self, total_steps: u64) {
        self.planned_steps = total_steps;
    }

    /// Learning rate the next step will use.
    pub fn current_learning_rate(&self) -> f64 {
        self.config.learning_rate * self.config.schedule.factor(self.steps, self.planned_steps)
    }

    /// Applies one update to every parameter that has a gradient. Returns
    /// the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let scale = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.current_learning_rate();
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (name, g) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter `{name}`")))?;
            if param.len() != g.len() {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    lhs: param.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let w = param.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g.data()) {
                        *w -= lr * (g * scale + c.weight_decay * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    for i in 0..w.len() {
                        let gi = g.data()[i] * scale;
                        mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                        mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                        let update = (mom.m[i] / bc1) / ((mom.v[i] / bc2).sqrt() + c.eps);
                        w[i] -= lr * (update + c.weight_decay * w[i]);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.step(&mut store, &one("x", 3.0)).unwrap();
        let x = store.get("x").unwrap().item();
        assert!((x - 0.9).abs() < 1e-8);
    }

    #[test]
    fn cosine_schedule_decays_from_initial_rate() {
        let f = |step, total| LrSchedule::Cosine.factor(step, total);
        assert_eq!(f(0, 10), 1.0);
        assert!((f(5, 10) - 0.5).abs() < 1e-15);
        assert!(f(9, 10) > 0.0 && f(9, 10) < 0.03);
        assert_eq!(f(3, 0), 1.0);
        assert_eq!(LrSchedule::Constant.factor(9, 10), 1.0);

        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(0.0));
        let mut opt = Optimizer::new(OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.plan(2);
        opt.step(&mut store, &one("x", 1.0)).unwrap();
        assert!((opt.current_learning_rate() - 0.05).abs() < 1e-15);
        opt.step(&mut store, &one("x", 1.0)).unwrap();
        // Adam's first two updates are unit-sized: 0.1 + 0.05
        assert!((store.get("x").unwrap().item() + 0.15).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(2.0));
        let mut opt = Optimizer::new(OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        })
        .unwrap();
        opt.step(&mut store, &one("x", 0.0)).unwrap();
        assert!((store.get("x").unwrap().item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(5.0));
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        for _ in 0..200 {
            let x = store.get("x").unwrap().item();
            opt.step(&mut store, &one("x", 2.0 * x)).unwrap();
        }
        assert!(store.get("x").unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_step() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(0.0));
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1.0,
            weight_decay: 0.0,
            clip_norm: 1.0,
            ..OptimizerConfig::default()
        })
        .unwrap();
        let norm = opt.step(&mut store, &one("x", 10.0)).unwrap();
        assert_eq!(norm, 10.0);
        assert!((store.get("x").unwrap().item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let mut store = ParamStore::new();
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert!(opt.step(&mut store, &one("missing", 1.0)).is_err());
    }
}
