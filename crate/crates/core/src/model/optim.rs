use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::arg("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::arg("adam eps must be positive and weight decay nonnegative"));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros_like(p: &Matrix) -> Self {
        Moments {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// One decoupled-weight-decay Adam update of `param` for optimizer step `t` (1-based).
pub fn adamw_update(param: &mut Matrix, grad: &Matrix, moments: &mut Moments, t: u64, lr: f64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let p = param.as_mut_slice();
    let m = moments.m.as_mut_slice();
    let v = moments.v.as_mut_slice();
    for (k, &g) in grad.as_slice().iter().enumerate() {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        p[k] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[k]);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            peak_lr: 5e-6,
            warmup_epochs: 2,
            total_epochs: 100,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::arg(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        // zero total epochs is an allowed no-op schedule
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::arg(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then half-cosine decay reaching zero at `total_epochs`.
pub fn lr_at(schedule: &ScheduleConfig, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::arg(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    if steps_per_epoch == 0 || step_in_epoch >= steps_per_epoch {
        return Err(Error::arg(format!(
            "step {step_in_epoch} outside epoch of {steps_per_epoch} steps"
        )));
    }
    let progress = epoch as f64 + step_in_epoch as f64 / steps_per_epoch as f64;
    let warmup = schedule.warmup_epochs as f64;
    if progress < warmup {
        return Ok(schedule.peak_lr * progress / warmup);
    }
    let decay_span = schedule.total_epochs as f64 - warmup;
    let t = ((progress - warmup) / decay_span).clamp(0.0, 1.0);
    Ok(schedule.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> ScheduleConfig {
        ScheduleConfig {
            peak_lr: 5e-6,
            warmup_epochs: 2,
            total_epochs: 10,
        }
    }

    #[test]
    fn schedule_landmarks() {
        let s = sched();
        assert_eq!(lr_at(&s, 0, 0, 4).unwrap(), 0.0);
        assert!((lr_at(&s, 1, 2, 4).unwrap() - 0.75 * 5e-6).abs() < 1e-20);
        assert!((lr_at(&s, 2, 0, 4).unwrap() - 5e-6).abs() < 1e-20);
        // decay spans epochs 2..10, midpoint at 6
        assert!((lr_at(&s, 6, 0, 4).unwrap() - 2.5e-6).abs() < 1e-18);
        assert!(lr_at(&s, 10, 0, 4).is_err());
        assert!(lr_at(&s, 3, 4, 4).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_nonnegative() {
        let s = sched();
        let steps = 50;
        let mut prev: Option<f64> = None;
        for epoch in 0..s.total_epochs {
            for step in 0..steps {
                let lr = lr_at(&s, epoch, step, steps).unwrap();
                assert!(lr >= 0.0 && lr <= s.peak_lr);
                if let Some(p) = prev {
                    assert!((lr - p).abs() <= s.peak_lr / (steps as f64) * 1.01);
                }
                prev = Some(lr);
            }
        }
        let before = lr_at(&s, 1, steps - 1, steps).unwrap();
        let at = lr_at(&s, 2, 0, steps).unwrap();
        assert!((at - before - s.peak_lr / (2.0 * steps as f64)).abs() < 1e-18);
    }

    #[test]
    fn schedule_validation() {
        assert!(ScheduleConfig { warmup_epochs: 10, ..sched() }.validate().is_err());
        assert!(ScheduleConfig { peak_lr: 0.0, ..sched() }.validate().is_err());
        assert!(ScheduleConfig { warmup_epochs: 2, total_epochs: 0, ..sched() }.validate().is_ok());
    }

    #[test]
    fn zero_gradient_fixed_point_and_pure_decay() {
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = Matrix::from_rows(&[[1.5, -2.0]]);
        let zero = Matrix::zeros(1, 2);
        let mut mom = Moments::zeros_like(&p);
        adamw_update(&mut p, &zero, &mut mom, 1, 0.1, &cfg);
        assert_eq!(p, Matrix::from_rows(&[[1.5, -2.0]]));

        let cfg = AdamConfig { weight_decay: 0.01, ..Default::default() };
        adamw_update(&mut p, &zero, &mut mom, 2, 0.1, &cfg);
        assert_eq!(p.as_slice(), &[1.5 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn three_steps_match_hand_unrolled_recursion() {
        let cfg = AdamConfig::default();
        let (g, lr, theta0) = (0.3, 1e-2, 0.7);
        let mut p = Matrix::from_rows(&[[theta0]]);
        let grad = Matrix::from_rows(&[[g]]);
        let mut mom = Moments::zeros_like(&p);
        for t in 1..=3 {
            adamw_update(&mut p, &grad, &mut mom, t, lr, &cfg);
        }

        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 1e-6);
        let mut theta = theta0;
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        theta -= lr * ((m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps) + wd * theta);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        theta -= lr * ((m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps) + wd * theta);
        let m3 = b1 * m2 + (1.0 - b1) * g;
        let v3 = b2 * v2 + (1.0 - b2) * g * g;
        theta -= lr * ((m3 / (1.0 - b1.powi(3))) / ((v3 / (1.0 - b2.powi(3))).sqrt() + eps) + wd * theta);

        assert!((p[(0, 0)] - theta).abs() < 1e-15, "{} vs {theta}", p[(0, 0)]);
        // constant gradients make every bias-corrected step ≈ lr
        assert!((theta0 - theta - 3.0 * lr).abs() < 1e-5);
    }
}
