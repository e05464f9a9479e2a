//! Adam, global-norm clipping, and the staircase learning-rate schedule.

use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Self { t: 0, m: shapes.iter().map(|s| Tensor::zeros(s)).collect(), v: shapes.iter().map(|s| Tensor::zeros(s)).collect() }
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match parameters");
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((x, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// `max(lr_min, lr0 * decay^floor(step / interval))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub interval: usize,
    pub lr_min: f64,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        (self.lr0 * self.decay.powi((step / self.interval) as i32)).max(self.lr_min)
    }
}
