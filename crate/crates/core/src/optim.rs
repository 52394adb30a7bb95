//! AdamW with decoupled weight decay, plus the cosine schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Optimizer hyperparameters. Echoed into every RunRecord so no run can hide
/// behind implicit defaults.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        crate::defaults::OPTIMIZER
    }
}

/// Cosine decay from `base` to 0 across `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Per-parameter first/second moments. Parameter order must stay fixed across
/// steps; the trainer feeds the model registry in declaration order.
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i] = None` means "no gradient this step" (parameter
    /// untouched by the loss); decay still applies. `lr_now` is the scheduled
    /// rate; the weight-decay factor uses it too (decoupled decay scales with
    /// the schedule).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>], lr_now: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
        }
        if params.len() != self.m.len() || params.len() != grads.len() {
            return Err(Error::shape("adamw", format!("{} params vs {} states", params.len(), self.m.len())));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.cfg.beta1.powi(t);
        let bias2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.cfg.beta1), T::from_f64(self.cfg.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.cfg.beta1), T::from_f64(1.0 - self.cfg.beta2));
        let eps = T::from_f64(self.cfg.eps);
        let lr = T::from_f64(lr_now);
        let inv_bias1 = T::from_f64(1.0 / bias1);
        let inv_bias2 = T::from_f64(1.0 / bias2);
        let decay = T::from_f64(1.0 - lr_now * self.cfg.weight_decay);

        for (i, p) in params.iter_mut().enumerate() {
            let g = match grads[i] {
                Some(g) => g,
                None => {
                    // Decay-only path keeps the decoupled-decay contract even
                    // for parameters outside this step's graph.
                    if self.cfg.weight_decay != 0.0 {
                        for pv in p.data_mut() {
                            *pv *= decay;
                        }
                    }
                    continue;
                }
            };
            if g.numel() != p.numel() {
                return Err(Error::shape("adamw", format!("param {i}: {} elems vs grad {}", p.numel(), g.numel())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { context: format!("gradient of parameter {i} at step {}", self.step) });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                // Decoupled decay first, then the moment update.
                *pv *= decay;
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let mhat = *mv * inv_bias1;
                let vhat = *vv * inv_bias2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> OptimConfig {
        OptimConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_grad_with_decay_scales_exactly() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut opt = AdamW::new(cfg(0.1, 0.5));
        opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        let f = 1.0 - 0.1 * 0.5;
        assert_eq!(p.data(), &[f, -2.0 * f]);
    }

    #[test]
    fn quadratic_loss_strictly_decreases_100_steps() {
        // loss = p^2, grad = 2p, started far from the minimum so the ~lr-sized
        // adaptive steps stay monotone for the whole window.
        let mut p = Tensor::from_vec(&[1], vec![50.0f64]).unwrap();
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        let mut prev = p.data()[0] * p.data()[0];
        for _ in 0..100 {
            let g = Tensor::from_vec(&[1], vec![2.0 * p.data()[0]]).unwrap();
            opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
            let loss = p.data()[0] * p.data()[0];
            assert!(loss < prev, "loss must strictly decrease: {loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn quadratic_converges_in_100_steps() {
        // Near the minimum Adam overshoots and oscillates, so from a close
        // start assert overall convergence rather than per-step decrease.
        let mut p = Tensor::from_vec(&[1], vec![3.0f64]).unwrap();
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        for _ in 0..100 {
            let g = Tensor::from_vec(&[1], vec![2.0 * p.data()[0]]).unwrap();
            opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap();
        }
        let loss = p.data()[0] * p.data()[0];
        assert!(loss < 1e-2, "loss after 100 steps: {loss}");
    }

    #[test]
    fn nan_grad_aborts() {
        let mut p = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let g = Tensor::from_vec(&[1], vec![f64::NAN]).unwrap();
        let mut opt = AdamW::new(cfg(0.1, 0.0));
        let err = opt.step(&mut [&mut p], &[Some(&g)], 0.1).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-12);
    }
}
