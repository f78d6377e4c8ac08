use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` at each milestone epoch (0-based).
    StepDecay { factor: f64, milestones: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { lr, momentum: 0.0, weight_decay: 0.0, schedule: LrSchedule::Constant }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("optimizer.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("optimizer.weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let LrSchedule::StepDecay { factor, .. } = self.schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::Config(format!("optimizer.decay_factor must be in (0, 1], got {factor}")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::StepDecay { factor, milestones } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.lr * factor.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// `v ← μ·v + g + wd·ω; ω ← ω − lr·v`.
///
/// With `μ = 0` and `wd = 0` the update is exactly `ω − lr·g`. On a
/// non-finite update the parameters are left untouched.
pub fn sgd_step(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, opt: &OptimizerConfig, lr: f64) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Shape(format!("gradient has {} entries, parameters {}", grad.len(), params.len())));
    }
    let mut update: Vec<f64> = if opt.weight_decay != 0.0 {
        grad.iter().zip(params.iter()).map(|(g, w)| g + opt.weight_decay * w).collect()
    } else {
        grad.to_vec()
    };
    if opt.momentum != 0.0 {
        if state.velocity.len() != params.len() {
            state.velocity = vec![0.0; params.len()];
        }
        for (u, v) in update.iter_mut().zip(&state.velocity) {
            *u += opt.momentum * v;
        }
    }
    let next: Vec<f64> = params.iter().zip(&update).map(|(w, u)| w - lr * u).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite parameter update".into()));
    }
    params.copy_from_slice(&next);
    if opt.momentum != 0.0 {
        state.velocity = update;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut w = [1.0];
        sgd_step(&mut w, &[0.5], &mut OptimizerState::default(), &OptimizerConfig::sgd(0.1), 0.1).unwrap();
        assert_eq!(w, [0.95]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut w = [0.3, -2.0];
        sgd_step(&mut w, &[0.0, 0.0], &mut OptimizerState::default(), &OptimizerConfig::sgd(0.1), 0.1).unwrap();
        assert_eq!(w, [0.3, -2.0]);
    }

    #[test]
    fn momentum_unrolls_by_hand() {
        let opt = OptimizerConfig { momentum: 0.9, ..OptimizerConfig::sgd(0.1) };
        let mut state = OptimizerState::default();
        let mut w = [0.0];
        sgd_step(&mut w, &[1.0], &mut state, &opt, 0.1).unwrap();
        sgd_step(&mut w, &[1.0], &mut state, &opt, 0.1).unwrap();
        assert!((w[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_the_update() {
        let opt = OptimizerConfig { weight_decay: 0.5, ..OptimizerConfig::sgd(0.1) };
        let mut w = [2.0];
        sgd_step(&mut w, &[0.0], &mut OptimizerState::default(), &opt, 0.1).unwrap();
        assert!((w[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_update_leaves_params() {
        let mut w = [1.0];
        let err = sgd_step(&mut w, &[f64::INFINITY], &mut OptimizerState::default(), &OptimizerConfig::sgd(0.1), 0.1);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(w, [1.0]);
    }

    #[test]
    fn schedule_and_validation() {
        let opt = OptimizerConfig {
            schedule: LrSchedule::StepDecay { factor: 0.1, milestones: vec![2, 4] },
            ..OptimizerConfig::sgd(1.0)
        };
        assert_eq!(opt.lr_at(1), 1.0);
        assert!((opt.lr_at(2) - 0.1).abs() < 1e-15);
        assert!((opt.lr_at(9) - 0.01).abs() < 1e-15);
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        assert!(OptimizerConfig { momentum: 1.0, ..OptimizerConfig::sgd(0.1) }.validate().is_err());
        assert!(OptimizerConfig { weight_decay: -1.0, ..OptimizerConfig::sgd(0.1) }.validate().is_err());
    }
}
