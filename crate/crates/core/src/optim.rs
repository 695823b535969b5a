//! Adam with L2 weight decay, and a step-decay learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// `lr(epoch) = lr0 · factor^⌊epoch / every⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub every: usize,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            return self.lr0;
        }
        let mut lr = self.lr0;
        for _ in 0..epoch / self.every {
            lr *= self.factor;
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    /// Zeroed moments for parameters of the given lengths.
    pub fn new(lens: &[usize], beta1: f64, beta2: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        if !(weight_decay >= 0.0) {
            return Err(invalid("weight decay must be nonnegative"));
        }
        Ok(Adam {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        })
    }

    /// One update of every parameter. `decay[i]` selects whether the L2
    /// penalty applies to parameter `i`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::LengthMismatch {
                op: "Adam::update",
                expected: self.m.len(),
                actual: params.len(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - math::powi(self.beta1, self.step as i32);
        let bc2 = 1.0 - math::powi(self.beta2, self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::LengthMismatch {
                    op: "Adam::update",
                    expected: p.len(),
                    actual: g.len(),
                });
            }
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + wd * *x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= lr * mh / (math::sqrt(vh) + self.eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("Adam::update"));
            }
        }
        Ok(())
    }
}
