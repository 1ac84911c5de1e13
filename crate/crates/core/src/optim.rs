//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: first and second moments per parameter name and a shared
/// step counter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that holds a gradient.
    /// Frozen parameters and parameters without gradients are left alone.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params {
            if p.frozen() {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let n = p.tensor.len();
            let state = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if state.m.len() != n || grad.len() != n {
                return Err(Error::Dimension(format!(
                    "adamw: state for {} has {} entries, parameter {n}",
                    p.name,
                    state.m.len()
                )));
            }
            let w = p.tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
                state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                w[i] -= c.lr * c.weight_decay * w[i];
                w[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Param>) {
    for p in params {
        p.tensor.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(w: f64, g: f64) -> Param {
        let mut p = Param::new("w", Tensor::vector(vec![w]));
        p.tensor.accumulate_grad(&[g]).unwrap();
        p
    }

    #[test]
    fn closed_form_first_step() {
        let mut p = param(0.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step([&mut p]).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p.tensor.data()[0] - expected).abs() < 1e-18);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = Param::new("w", Tensor::vector(vec![0.3, -2.0, 7.5]));
        p.tensor.accumulate_grad(&[0.0, 0.0, 0.0]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..10 {
            opt.step([&mut p]).unwrap();
        }
        assert_eq!(p.tensor.data(), before.tensor.data());
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = param(1.0, 1.0);
        p.set_frozen(true);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step([&mut p]).unwrap();
        assert_eq!(p.tensor.data(), &[1.0]);
    }

    #[test]
    fn quadratic_descends_in_windows() {
        let mut p = Param::new("w", Tensor::vector(vec![0.0]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut dist = vec![];
        for _ in 0..100 {
            let w = p.tensor.data()[0];
            p.tensor.zero_grad();
            p.tensor.accumulate_grad(&[2.0 * (w - 3.0)]).unwrap();
            opt.step([&mut p]).unwrap();
            dist.push((p.tensor.data()[0] - 3.0).abs());
        }
        // Mean |w - 3| per 10-step window. Adam approaches monotonically, then
        // oscillates around the optimum with amplitude on the order of lr.
        let windows: Vec<f64> = dist.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        for w in windows[..5].windows(2) {
            assert!(w[1] < w[0], "{windows:?}");
        }
        assert!(windows[5..].iter().all(|&w| w < 0.15), "{windows:?}");
    }
}
