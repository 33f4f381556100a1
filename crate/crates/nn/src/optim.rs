//! First-order optimizers, learning-rate schedules and gradient clipping.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. State is keyed by parameter name so it can be
/// checkpointed independently of parameter order.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed [`Adam::begin_step`] calls.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once before updating the
    /// parameters of one iteration.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
        assert!(self.step > 0, "begin_step() must precede update()");
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let eps = T::from_f64_lossy(self.eps);
        let lr = T::from_f64_lossy(lr);
        let one = T::one();
        for (((p, &g), mm), vv) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mm = b1 * *mm + (one - b1) * g;
            *vv = b2 * *vv + (one - b2) * g * g;
            let mhat = *mm / c1;
            let vhat = *vv / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor<T>, Tensor<T>)> {
        &self.moments
    }

    /// Restores a saved optimizer state.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>) {
        self.step = step;
        self.moments = moments;
    }
}

/// Plain gradient descent step `p -= lr * g`.
pub fn sgd_update<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
    assert_eq!(param.shape(), grad.shape(), "sgd gradient shape");
    let lr = T::from_f64_lossy(lr);
    param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .for_each(|(p, &g)| *p = *p - lr * g);
}

/// Rescales all gradients so that their joint max-abs norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_inf_norm<T: Scalar>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> f64 {
    let total = grads.iter().map(|g| g.max_abs().as_f64()).fold(0.0, f64::max);
    if total > max_norm {
        let s = T::from_f64_lossy(max_norm / (total + 1e-6));
        for g in grads.iter_mut() {
            g.scale_inplace(s);
        }
    }
    total
}

/// Cosine annealing with warm restarts whose period doubles after every
/// restart until it reaches `max_period`, after which it stays constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub min_lr: f64,
    pub first_period: u64,
    pub max_period: u64,
}

impl CosineRestarts {
    pub fn new(base_lr: f64, first_period: u64, max_period: u64) -> Self {
        assert!(
            first_period > 0 && max_period >= first_period,
            "invalid restart periods"
        );
        Self {
            base_lr,
            min_lr: 0.0,
            first_period,
            max_period,
        }
    }

    /// Start of the period containing `step` and that period's length.
    pub fn period_of(&self, step: u64) -> (u64, u64) {
        let mut start = 0;
        let mut period = self.first_period;
        while step >= start + period {
            start += period;
            period = (period * 2).min(self.max_period);
        }
        (start, period)
    }

    /// Steps at which the learning rate jumps back to `base_lr`, below `limit`.
    pub fn restarts(&self, limit: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut period = self.first_period;
        while start < limit {
            out.push(start);
            start += period;
            period = (period * 2).min(self.max_period);
        }
        out
    }

    pub fn lr(&self, step: u64) -> f64 {
        let (start, period) = self.period_of(step);
        let t = (step - start) as f64 / period as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let mut adam = Adam::<f64>::default();
        let mut p = Tensor::new([1, 1, 1, 3], vec![1.0, 1.0, 1.0]);
        let g = Tensor::new([1, 1, 1, 3], vec![0.5, -2.0, 0.0]);
        adam.begin_step();
        adam.update("p", &mut p, &g, 0.1);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn full_scale_schedule_ends_after_256k_period() {
        let s = CosineRestarts::new(5e-4, 1000, 256_000);
        let r = s.restarts(511_000);
        assert_eq!(r.len(), 9);
        assert_eq!(*r.last().unwrap(), 255_000);
        assert_eq!(s.period_of(510_999), (255_000, 256_000));
    }

    #[test]
    fn lr_returns_to_base_at_restarts_and_decays_within_period() {
        let s = CosineRestarts::new(5e-4, 250, 2000);
        let restarts = s.restarts(10_000);
        assert_eq!(&restarts[..6], &[0, 250, 750, 1750, 3750, 5750]);
        for &r in &restarts {
            assert_eq!(s.lr(r), 5e-4);
            if r > 0 {
                assert!(s.lr(r - 1) < 1e-6);
            }
        }
        assert!((s.lr(125) - 2.5e-4).abs() < 1e-12);
    }

    #[test]
    fn inf_norm_clip_rescales_jointly() {
        let mut a = Tensor::new([1, 1, 1, 2], vec![40.0f64, -10.0]);
        let mut b = Tensor::new([1, 1, 1, 1], vec![5.0f64]);
        let n = clip_grad_inf_norm(&mut [&mut a, &mut b], 20.0);
        assert_eq!(n, 40.0);
        assert!((a.data()[0] - 20.0).abs() < 1e-5);
        assert!((b.data()[0] - 2.5).abs() < 1e-5);
    }
}
