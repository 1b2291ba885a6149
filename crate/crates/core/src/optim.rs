use std::f64::consts::PI;

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) {
        self.velocity = velocity;
    }

    /// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        for (id, vel) in store.ids().collect::<Vec<_>>().into_iter().zip(&mut self.velocity) {
            let p = store.get_mut(id);
            let grad = p.grad.data().to_vec();
            for ((theta, v), g) in p.value.data_mut().iter_mut().zip(vel.data_mut()).zip(grad) {
                *v = self.momentum * *v + g + self.weight_decay * *theta;
                *theta -= lr * *v;
            }
        }
    }
}

/// Cosine-annealed learning rate for 0-based `step` out of `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Step decay by 10x at 60% and 80% of the epoch budget.
pub fn step_decay_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let e = epoch as f64;
    let n = epochs as f64;
    if e >= 0.8 * n {
        base * 0.01
    } else if e >= 0.6 * n {
        base * 0.1
    } else {
        base
    }
}
