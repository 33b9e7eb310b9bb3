//! SGD with classical momentum and coupled L2 weight decay, plus the
//! per-epoch cosine-annealing schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVisitor;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub t_max: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale protocol: 20 epochs, cosine to zero over 20 epochs,
    /// LR 0.1, momentum 0.9, weight decay 5e-4, batch 64.
    fn default() -> Self {
        Self {
            epochs: 20,
            lr0: 0.1,
            t_max: 20,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::config(format!("train.lr0 must be positive, got {}", self.lr0)));
        }
        if self.t_max == 0 {
            return Err(Error::config("train.t_max must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi * min(epoch, t_max) / t_max)) / 2`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let t = epoch.min(cfg.t_max) as f64 / cfg.t_max as f64;
    cfg.lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// One in-place update of a parameter slice:
/// `v = momentum * v + (g + weight_decay * p); p -= lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    assert_eq!(params.len(), grads.len(), "sgd_step: param/grad length");
    assert_eq!(params.len(), velocity.len(), "sgd_step: param/velocity length");
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one step to every parameter reachable through `visit`.
    pub fn step(&mut self, lr: f64, visit: impl FnOnce(&mut ParamVisitor<'_>)) {
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        visit(&mut |name: &str, param: &mut Tensor, grad: &mut Tensor| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; param.len()]);
            if v.len() != param.len() {
                *v = vec![0.0; param.len()];
            }
            sgd_step(param.data_mut(), grad.data(), v, lr, momentum, wd);
        });
    }

    /// Drops the momentum of every parameter under `layer` (`layer.*`).
    pub fn reset_layer(&mut self, layer: &str) {
        let prefix = format!("{layer}.");
        self.velocity.retain(|k, _| !k.starts_with(&prefix));
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_step() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = [2.0];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = TrainConfig {
            t_max: 90,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(0, &cfg), 0.1);
        assert!((cosine_lr(45, &cfg) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(90, &cfg).abs() < 1e-15);
        assert!(cosine_lr(120, &cfg).abs() < 1e-15);
    }

    #[test]
    fn reset_layer_only_touches_prefix() {
        let mut opt = Sgd::new(0.9, 0.0);
        let mut a = Tensor::full(&[1], 1.0);
        let mut ga = Tensor::full(&[1], 1.0);
        let mut b = Tensor::full(&[1], 1.0);
        let mut gb = Tensor::full(&[1], 1.0);
        opt.step(0.1, |f| {
            f("conv1.weight", &mut a, &mut ga);
            f("conv10.weight", &mut b, &mut gb);
        });
        opt.reset_layer("conv1");
        assert!(opt.velocity("conv1.weight").is_none());
        assert!(opt.velocity("conv10.weight").is_some());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
