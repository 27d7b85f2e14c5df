use serde::{Deserialize, Serialize};

use super::{Param, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Bias-corrected Adam with moment estimates kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` using the gradients stored
    /// in the parameters. Fails without modifying anything if a gradient is
    /// not finite.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::Training(format!("non-finite gradient in `{}`", p.name)));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.grad.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.grad.len()) {
            return Err(Error::Training("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

/// Step decay: the learning rate is multiplied by `gamma` once for every
/// milestone the step counter has reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepLr {
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn new(base_lr: f64, milestones: Vec<u64>, gamma: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing: {milestones:?}"
            )));
        }
        if !(gamma > 0.0) || !(base_lr > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        Ok(MultiStepLr {
            base_lr,
            milestones,
            gamma,
        })
    }

    /// Learning rate used for the update at zero-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_adam_step_moves_by_lr() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut p = Param::new("w", Tensor::<f64>::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        p.grad = vec![0.5, -3.0];
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.value.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = Param::new("w", Tensor::<f64>::from_vec(&[1], vec![3.0]).unwrap());
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..500 {
            p.grad = vec![2.0 * p.value.data()[0]];
            adam.step(&mut [&mut p], 0.05).unwrap();
        }
        assert!(p.value.data()[0].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = Param::new("w", Tensor::<f32>::from_vec(&[1], vec![1.0]).unwrap());
        p.grad = vec![f64::NAN];
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        assert!(matches!(adam.step(&mut [&mut p], 0.1), Err(Error::Training(_))));
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn multistep_schedule() {
        let s = MultiStepLr::new(2e-4, vec![4000], 0.1).unwrap();
        assert_eq!(s.lr_at(0), 2e-4);
        assert_eq!(s.lr_at(3999), 2e-4);
        assert!((s.lr_at(4000) - 2e-5).abs() < 1e-18);
        let two = MultiStepLr::new(1.0, vec![2, 5], 0.5).unwrap();
        assert_eq!(two.lr_at(6), 0.25);
        assert!(MultiStepLr::new(1.0, vec![5, 5], 0.1).is_err());
        assert!(AdamConfig {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
