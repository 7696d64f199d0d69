use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with Nesterov momentum, L2 weight decay and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch_fraction, multiplier)` points; the multiplier of the last point
    /// at or before the current fraction applies.
    pub lr_schedule: Vec<(f64, f64)>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: vec![(0.5, 0.1), (0.75, 0.01)],
        }
    }
}

impl OptimConfig {
    pub fn plain_sgd(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_schedule: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        let mut prev_at = f64::NEG_INFINITY;
        let mut prev_mult = f64::INFINITY;
        for &(at, mult) in &self.lr_schedule {
            if !(mult.is_finite() && mult > 0.0) {
                return Err(Error::Config(format!("schedule multiplier must be positive, got {mult}")));
            }
            if mult > prev_mult {
                return Err(Error::Config("schedule multipliers must be non-increasing".into()));
            }
            if !at.is_finite() || at < prev_at {
                return Err(Error::Config("schedule points must be sorted by epoch fraction".into()));
            }
            prev_at = at;
            prev_mult = mult;
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch_fraction: f64) -> f64 {
        let mult = self
            .lr_schedule
            .iter()
            .take_while(|(at, _)| *at <= epoch_fraction)
            .last()
            .map_or(1.0, |&(_, m)| m);
        self.learning_rate * mult
    }
}

/// `g ← g + λθ; v ← μv − γg; θ ← θ + μv − γg`.
///
/// Gradients are checked for finiteness before anything is mutated; the error
/// string names the offending tensor.
pub(crate) fn nesterov_step(
    params: &mut [Tensor],
    slots: &mut [Tensor],
    grads: &[Tensor],
    cfg: &OptimConfig,
    lr: f64,
) -> std::result::Result<(), String> {
    if grads.len() != params.len() {
        return Err(format!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(format!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(format!("non-finite gradient in parameter tensor {i}"));
        }
    }
    let mu = cfg.momentum;
    let decay = cfg.weight_decay;
    for ((p, v), g) in params.iter_mut().zip(slots.iter_mut()).zip(grads) {
        for ((theta, vel), &grad) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let grad = grad + decay * *theta;
            *vel = mu * *vel - lr * grad;
            *theta = *theta + mu * *vel - lr * grad;
        }
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(format!("parameter tensor {i} became non-finite"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, NetworkState};

    #[test]
    fn default_schedule_matches_step_rule() {
        let cfg = OptimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr_at(0.0), 0.1);
        assert_eq!(cfg.lr_at(0.49), 0.1);
        assert!((cfg.lr_at(0.5) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(0.9) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn increasing_multipliers_are_rejected() {
        let cfg = OptimConfig {
            lr_schedule: vec![(0.5, 0.1), (0.75, 0.5)],
            ..OptimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plain_sgd_is_exact() {
        let mut net = NetworkState::init(&ArchSpec::mlp(3, &[4], 2), 9, 0).unwrap();
        let before = net.clone();
        let grads: Vec<Tensor> = net.params.iter().map(|p| p.map(|v| 0.5 * v + 0.1)).collect();
        net.sgd_step(&grads, &OptimConfig::plain_sgd(0.1), 0.0, 0).unwrap();
        for ((p, b), g) in net.params.iter().zip(&before.params).zip(&grads) {
            for ((&after, &was), &gv) in p.data().iter().zip(b.data()).zip(g.data()) {
                assert_eq!(after, was - 0.1 * gv);
            }
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut net = NetworkState::init(&ArchSpec::mlp(3, &[4], 2), 9, 0).unwrap();
        let before = net.clone();
        let grads: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        net.sgd_step(&grads, &cfg, 0.0, 0).unwrap();
        assert_eq!(net.params, before.params);
    }

    #[test]
    fn nesterov_matches_hand_computation() {
        let mut net = NetworkState::init(&ArchSpec::mlp(1, &[1], 2), 0, 0).unwrap();
        let cfg = OptimConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_schedule: vec![],
        };
        let theta0 = net.params[0].data()[0];
        let grads: Vec<Tensor> = net.params.iter().map(|p| Tensor::full(p.shape(), 1.0)).collect();
        net.sgd_step(&grads, &cfg, 0.0, 0).unwrap();
        // v1 = -0.1; θ1 = θ0 + 0.9·(-0.1) - 0.1
        assert!((net.params[0].data()[0] - (theta0 - 0.19)).abs() < 1e-15);
        net.sgd_step(&grads, &cfg, 0.0, 1).unwrap();
        // v2 = 0.9·(-0.1) - 0.1 = -0.19; θ2 = θ1 + 0.9·(-0.19) - 0.1
        assert!((net.params[0].data()[0] - (theta0 - 0.19 - 0.271)).abs() < 1e-14);
    }

    #[test]
    fn identical_nets_stay_identical() {
        let mut a = NetworkState::init(&ArchSpec::mlp(3, &[4], 2), 2, 0).unwrap();
        let mut b = a.clone();
        let grads: Vec<Tensor> = a.params.iter().map(|p| p.map(f64::sin)).collect();
        let cfg = OptimConfig::default();
        a.sgd_step(&grads, &cfg, 0.3, 0).unwrap();
        b.sgd_step(&grads, &cfg, 0.3, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_reports_net_and_iteration() {
        let mut net = NetworkState::init(&ArchSpec::mlp(3, &[4], 2), 2, 7).unwrap();
        let before = net.clone();
        let mut grads: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        grads[1].data_mut()[0] = f64::NAN;
        let err = net.sgd_step(&grads, &OptimConfig::default(), 0.0, 42).unwrap_err();
        assert!(matches!(err, Error::Diverged { net: 7, iteration: 42, .. }), "{err}");
        assert_eq!(net, before);
    }
}
