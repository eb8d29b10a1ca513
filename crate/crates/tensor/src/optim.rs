//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub trait Optimizer<T: Real> {
    /// Apply one update from `(name, gradient)` pairs.
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, AdamSlot<T>>,
}

#[derive(Debug, Clone)]
struct AdamSlot<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, state: BTreeMap::new() }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, g) in grads {
            let p = store.param_mut(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err("adam", format!("{name}: param {:?} grad {:?}", p.shape(), g.shape())));
            }
            let slot = self.state.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![T::zero(); g.numel()],
                v: vec![T::zero(); g.numel()],
                t: 0,
            });
            slot.t += 1;
            let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
            let bc1 = 1.0 - self.beta1.powi(slot.t);
            let bc2 = 1.0 - self.beta2.powi(slot.t);
            let step = T::from_f64_lossy(self.lr / bc1);
            let bc2 = T::from_f64_lossy(bc2);
            let eps = T::from_f64_lossy(self.eps);
            for (((w, &gv), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                *m = b1 * *m + (T::one() - b1) * gv;
                *v = b2 * *v + (T::one() - b2) * gv * gv;
                *w -= step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Stochastic gradient descent with heavy-ball momentum
/// (`v = mu * v + g; w -= lr * v`) and optional global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, clip_norm: None, velocity: BTreeMap::new() }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }
}

/// Global L2 norm over a gradient set.
pub fn global_norm<T: Real>(grads: &[(String, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

impl<T: Real> Optimizer<T> for Sgd<T> {
    fn step(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        let scale = match self.clip_norm {
            Some(c) => {
                let n = global_norm(grads);
                if n > c && n > 0.0 {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (mu, lr, scale) = (T::from_f64_lossy(self.momentum), T::from_f64_lossy(self.lr), T::from_f64_lossy(scale));
        for (name, g) in grads {
            let p = store.param_mut(name)?;
            if p.shape() != g.shape() {
                return Err(shape_err("sgd", format!("{name}: param {:?} grad {:?}", p.shape(), g.shape())));
            }
            let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *v = mu * *v + gv * scale;
                *w -= lr * *v;
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(store: &ParamStore<f64>) -> Vec<(String, Tensor<f64>)> {
        // f(w) = sum (w - 3)^2
        let w = store.param("w").unwrap();
        vec![("w".into(), w.map(|v| 2.0 * (v - 3.0)))]
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert_param("w", Tensor::from_f64(&[2], &[0.0, 10.0]).unwrap());
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..2000 {
            let g = quadratic_grad(&store);
            opt.step(&mut store, &g).unwrap();
        }
        for v in store.param("w").unwrap().data() {
            assert!((v - 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sgd_momentum_first_steps() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("w", Tensor::from_f64(&[1], &[0.0]).unwrap());
        let mut opt = Sgd::new(0.1, 0.9);
        let g = vec![("w".to_string(), Tensor::from_f64(&[1], &[1.0]).unwrap())];
        opt.step(&mut store, &g).unwrap();
        assert!((store.param("w").unwrap().data()[0] + 0.1).abs() < 1e-12);
        opt.step(&mut store, &g).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((store.param("w").unwrap().data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged_under_adam() {
        let mut store = ParamStore::<f64>::new();
        store.insert_param("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let before = store.fingerprint();
        let mut opt = Adam::new(2e-4, 0.0, 0.9);
        opt.step(&mut store, &[("w".into(), Tensor::zeros(&[3]))]).unwrap();
        assert_eq!(store.fingerprint(), before);
    }
}
