//! Adam with decoupled weight decay and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm ceiling applied to all gradients before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    /// Segmentation settings: lr 2e-4, weight decay 1e-4, clipping at 1.0.
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// L2 norm over every gradient in the store.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let k = max_norm / norm;
        for t in store.tensors_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients stored on each parameter.
    /// Returns the gradient norm seen before clipping.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if store.len() != self.m.len() {
            return Err(Error::config(
                "optimizer",
                format!("state tracks {} tensors, store has {}", self.m.len(), store.len()),
            ));
        }
        let norm = match self.config.clip_norm {
            Some(c) => clip_grad_norm(store, c),
            None => global_grad_norm(store),
        };
        if !norm.is_finite() {
            return Err(Error::NumericInstability {
                op: "adam".into(),
                detail: format!("gradient norm is {norm}"),
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t.grad.take().unwrap_or_else(|| vec![0.0; t.numel()]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_applies_only_weight_decay() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        s.get_mut(id).grad = Some(vec![0.0; 3]);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &s);
        adam.step(&mut s).unwrap();
        let k = 1.0 - cfg.lr * cfg.weight_decay;
        for (got, orig) in s.get(id).data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((got - orig * k).abs() < 1e-18, "{got} vs {}", orig * k);
        }
    }

    #[test]
    fn clipping_to_unit_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]));
        let b = s.add("b", Tensor::zeros(&[1]));
        // norm sqrt(36 + 64 + 0) = 10
        s.get_mut(a).grad = Some(vec![6.0, 8.0]);
        s.get_mut(b).grad = Some(vec![0.0]);
        let before = clip_grad_norm(&mut s, 1.0);
        assert_eq!(before, 10.0);
        assert!((global_grad_norm(&s) - 1.0).abs() < 1e-15);
        let g = s.get(a).grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn small_gradients_are_not_clipped() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]));
        s.get_mut(a).grad = Some(vec![0.3, 0.4]);
        clip_grad_norm(&mut s, 1.0);
        assert_eq!(s.get(a).grad.as_deref(), Some(&[0.3, 0.4][..]));
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[1]));
        s.get_mut(a).grad = Some(vec![f64::INFINITY]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        assert!(adam.step(&mut s).unwrap_err().is_numeric());
    }
}
