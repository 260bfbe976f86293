use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// AdamW hyperparameters plus the learning-rate schedule: linear warmup from 0 to
/// `base_lr` over `warmup_steps`, then cosine decay reaching 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            total_steps: 2_000,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.warmup_steps <= self.total_steps;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid optimizer config {self:?}"
            )))
        }
    }

    /// Effective learning rate at (0-based) `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.base_lr * (1.0 + libm::cos(std::f64::consts::PI * progress))
    }
}

/// Optimizer state: moment accumulators aligned with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub config: AdamWConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptState {
    pub fn new(config: AdamWConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step: 0,
        })
    }

    pub fn from_parts(
        config: AdamWConfig,
        first_moment: Vec<f64>,
        second_moment: Vec<f64>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        ensure_len("optimizer moments", first_moment.len(), second_moment.len())?;
        Ok(Self {
            config,
            first_moment,
            second_moment,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate(self.step)
    }

    /// AdamW update with bias correction and decoupled weight decay.
    ///
    /// A non-finite gradient rejects the whole step: parameters and state are left untouched.
    /// Returns the learning rate that was applied.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<f64> {
        ensure_len("optimizer params", self.first_moment.len(), params.len())?;
        ensure_len("optimizer grads", self.first_moment.len(), grads.len())?;
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(warmup: u64, total: u64) -> AdamWConfig {
        AdamWConfig {
            warmup_steps: warmup,
            total_steps: total,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn warmup_start_leaves_params_unchanged() {
        let mut st = OptState::new(cfg(10, 100), 2).unwrap();
        let mut p = vec![1.0, -2.0];
        let lr = st.step(&mut p, &[0.5, 0.5]).unwrap();
        assert_eq!(lr, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(10, 100);
        assert_eq!(c.learning_rate(0), 0.0);
        assert!((c.learning_rate(5) - 0.5 * c.base_lr).abs() < 1e-15);
        assert!((c.learning_rate(10) - c.base_lr).abs() < 1e-15);
        assert!((c.learning_rate(55) - 0.5 * c.base_lr).abs() < 1e-15);
        assert_eq!(c.learning_rate(100), 0.0);
        assert_eq!(c.learning_rate(1000), 0.0);
        // no warmup: starts at the base rate
        assert_eq!(cfg(0, 10).learning_rate(0), c.base_lr);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let c = cfg(20, 200);
        let mut prev = f64::INFINITY;
        for s in 20..=200 {
            let lr = c.learning_rate(s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_betas_reduce_to_weighted_gradient_descent() {
        // β1 = β2 = 0: m̂ = g, v̂ = g², so p ← p − lr·(g / (|g| + ε) + λ p)
        let config = AdamWConfig {
            base_lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            total_steps: 1_000_000,
        };
        let mut st = OptState::new(config, 1).unwrap();
        let mut p = vec![2.0];
        let g = 0.5;
        let mut expected = 2.0;
        for _ in 0..3 {
            let lr = config.learning_rate(st.step_count());
            expected -= lr * (g / (g + 1e-8) + 0.01 * expected);
            st.step(&mut p, &[g]).unwrap();
            assert_eq!(p[0], expected);
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let config = AdamWConfig {
            weight_decay: 0.0,
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut st = OptState::new(config, 3).unwrap();
        let mut p = vec![0.3, -1.0, 7.0];
        for _ in 0..5 {
            st.step(&mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.0, 7.0]);
    }

    #[test]
    fn zero_grad_with_decay_only_shrinks() {
        let config = AdamWConfig {
            warmup_steps: 0,
            ..AdamWConfig::default()
        };
        let mut st = OptState::new(config, 1).unwrap();
        let mut p = vec![4.0];
        let lr = st.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p[0], 4.0 - lr * config.weight_decay * 4.0);
    }

    #[test]
    fn non_finite_gradient_rejects_the_step() {
        let mut st = OptState::new(cfg(0, 10), 2).unwrap();
        let mut p = vec![1.0, 1.0];
        let err = st.step(&mut p, &[0.1, f64::NAN]).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient { index: 1 });
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st.step_count(), 0);
        assert_eq!(st.moments().0, &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut st = OptState::new(cfg(0, 10), 2).unwrap();
        assert!(st.step(&mut [1.0], &[1.0]).is_err());
    }
}
