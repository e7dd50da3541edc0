use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GnsnError, Result};
use crate::tensor::{Matrix, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 0.005,
            weight_decay: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(GnsnError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(GnsnError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GnsnError::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(GnsnError::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: i32,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| GnsnError::Config(format!("gradient for unknown parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(GnsnError::shape("AdamW::step", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let (pm, mm, vm) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
            for (k, &gk) in g.as_slice().iter().enumerate() {
                mm[k] = c.beta1 * mm[k] + (1.0 - c.beta1) * gk;
                vm[k] = c.beta2 * vm[k] + (1.0 - c.beta2) * gk * gk;
                let update = (mm[k] / bc1) / ((vm[k] / bc2).sqrt() + c.eps);
                pm[k] -= c.learning_rate * (update + c.weight_decay * pm[k]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr * sign(g) when eps is negligible
        let mut p = ParameterStore::new();
        p.insert("w", Matrix::column(&[1.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        })
        .unwrap();
        let g = BTreeMap::from([("w".to_string(), Matrix::column(&[3.0, -0.5]))]);
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().as_slice();
        assert!((w[0] - (1.0 - 0.005)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 0.005)).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = ParameterStore::new();
        p.insert("w", Matrix::scalar(2.0));
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg).unwrap();
        opt.step(&mut p, &BTreeMap::from([("w".to_string(), Matrix::scalar(0.0))])).unwrap();
        assert!((p.get("w").unwrap().item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = ParameterStore::new();
        p.insert("w", Matrix::column(&[3.0, -4.0]));
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..2000 {
            let g = p.get("w").unwrap().scaled(2.0);
            opt.step(&mut p, &BTreeMap::from([("w".to_string(), g)])).unwrap();
        }
        assert!(p.get("w").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamW::new(AdamWConfig {
            learning_rate: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(AdamW::new(AdamWConfig {
            beta2: 1.0,
            ..Default::default()
        })
        .is_err());
    }
}
