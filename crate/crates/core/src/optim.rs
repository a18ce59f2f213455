//! AdamW with a linear warmup / linear decay learning-rate schedule.

use crate::params::ParamStore;

/// Piecewise-linear schedule: 0 at step 0, `peak_lr` at
/// `warmup_fraction * total_steps`, back to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub weight_decay: f64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps as f64;
        let warm = self.warmup_fraction * total;
        let s = step as f64;
        if s >= total {
            return 0.0;
        }
        if s < warm {
            self.peak_lr * s / warm
        } else {
            self.peak_lr * (total - s) / (total - warm)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One decoupled-weight-decay Adam update over every parameter with a
/// populated gradient. Gradients are cleared afterwards.
pub fn adamw_step(store: &mut ParamStore, adam: &AdamConfig, schedule: &Schedule, step: u64) {
    let lr = schedule.lr_at(step);
    for p in store.iter_mut() {
        let Some(grad) = p.tensor.grad.take() else {
            continue;
        };
        p.step += 1;
        let t = p.step as f64;
        let bc1 = 1.0 - adam.beta1.powf(t);
        let bc2 = 1.0 - adam.beta2.powf(t);
        for i in 0..grad.len() {
            let g = grad[i];
            p.m[i] = adam.beta1 * p.m[i] + (1.0 - adam.beta1) * g;
            p.v[i] = adam.beta2 * p.v[i] + (1.0 - adam.beta2) * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            p.tensor.data[i] -=
                lr * (m_hat / (v_hat.sqrt() + adam.eps) + schedule.weight_decay * p.tensor.data[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn schedule(peak: f64, decay: f64) -> Schedule {
        Schedule {
            total_steps: 100,
            warmup_fraction: 0.1,
            peak_lr: peak,
            weight_decay: decay,
        }
    }

    #[test]
    fn lr_endpoints_and_peak() {
        let s = schedule(0.5, 0.0);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 0.5);
        assert_eq!(s.lr_at(100), 0.0);
        // piecewise linear in between
        assert!((s.lr_at(5) - 0.25).abs() < 1e-15);
        assert!((s.lr_at(55) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut ps = ParamStore::new();
        ps.register("w", Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap())
            .unwrap();
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[0.0, 0.0]);
        adamw_step(&mut ps, &AdamConfig::default(), &schedule(0.1, 0.0), 50);
        assert_eq!(ps.get("w").unwrap().tensor.data, vec![3.0, -1.0]);
    }

    #[test]
    fn warmup_step_zero_is_identity() {
        let mut ps = ParamStore::new();
        ps.register("w", Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .unwrap();
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[2.5]);
        adamw_step(&mut ps, &AdamConfig::default(), &schedule(0.1, 0.01), 0);
        assert_eq!(ps.get("w").unwrap().tensor.data, vec![1.0]);
        // grads are consumed by the step regardless
        assert!(ps.get("w").unwrap().tensor.grad.is_none());
    }

    #[test]
    fn single_adam_update_matches_hand_arithmetic() {
        // g = 1, betas (0.9, 0.999), lr = 0.1, no decay:
        // m_hat = 1, v_hat = 1, delta = -0.1 / (1 + 1e-8)
        let mut ps = ParamStore::new();
        ps.register("w", Tensor::new(vec![1, 1], vec![0.0]).unwrap())
            .unwrap();
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[1.0]);
        let s = Schedule {
            total_steps: 100,
            warmup_fraction: 0.1,
            peak_lr: 0.1,
            weight_decay: 0.0,
        };
        adamw_step(&mut ps, &AdamConfig::default(), &s, 10); // lr exactly at peak
        let w = ps.get("w").unwrap().tensor.data[0];
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert!((w + 0.1).abs() < 1e-8);
    }
}
