//! Finite-difference audit of the analytic gradients of the three training
//! losses, taken all the way through randomly drawn networks.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cohort::Adapter;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, feature_l2, kl_distill, LabelDist};
use crate::nn::{ArchSpec, NetworkState};
use crate::rng::{self, Stream};
use crate::tensor::{relative_error, softmax_rows, Tensor};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;
pub const PROBES_PER_PROBLEM: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Distillation,
    Feature,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Classification, LossKind::Distillation, LossKind::Feature];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Classification => "L_C",
            LossKind::Distillation => "L_D",
            LossKind::Feature => "L_F",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One randomly drawn network with a batch and constant teacher targets.
#[derive(Debug, Clone)]
pub struct Problem {
    pub net: NetworkState,
    pub adapter: Option<Adapter>,
    pub inputs: Tensor,
    pub labels: LabelDist,
    pub teacher_probs: Tensor,
    pub teacher_feature: Tensor,
}

fn normal(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .expect("non-empty shape")
}

impl Problem {
    /// `teacher_width` different from the net's feature width routes the
    /// feature loss through an adapter.
    pub fn random(arch: &ArchSpec, batch: usize, teacher_width: Option<usize>, soft_labels: bool, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(Stream::Data, seed, 0x6c);
        let mut net = NetworkState::init(arch, seed, 0)?;
        for p in net.params.iter_mut() {
            for v in p.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut shape = vec![batch];
        shape.extend(&arch.input_shape);
        let inputs = normal(&shape, 1.0, &mut rng);
        let k = arch.num_classes;
        let labels = if soft_labels {
            LabelDist::new(softmax_rows(&normal(&[batch, k], 1.5, &mut rng))?)?
        } else {
            let classes: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
            LabelDist::one_hot(&classes, k)?
        };
        let teacher_probs = softmax_rows(&normal(&[batch, k], 2.0, &mut rng))?;
        let own = arch.feature_dim();
        let width = teacher_width.unwrap_or(own);
        let teacher_feature = normal(&[batch, width], 1.0, &mut rng);
        let adapter = (width != own).then(|| Adapter::new(own, width, seed, 0xada)).transpose()?;
        Ok(Self {
            net,
            adapter,
            inputs,
            labels,
            teacher_probs,
            teacher_feature,
        })
    }

    /// Every differentiable tensor: network parameters, then adapter parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.net.params.iter().collect();
        if let Some(a) = &self.adapter {
            v.extend(a.params.iter());
        }
        v
    }

    fn param_mut(&mut self, i: usize) -> &mut Tensor {
        let n = self.net.params.len();
        if i < n {
            &mut self.net.params[i]
        } else {
            &mut self.adapter.as_mut().expect("adapter parameter index").params[i - n]
        }
    }

    pub fn loss(&self, kind: LossKind) -> Result<f64> {
        let rec = self.net.forward(&self.inputs)?;
        Ok(match kind {
            LossKind::Classification => cross_entropy(&rec.probs, &self.labels)?.value,
            LossKind::Distillation => kl_distill(&self.teacher_probs, &rec.probs)?.value,
            LossKind::Feature => {
                let f = match &self.adapter {
                    Some(a) => a.forward(&rec.feature)?,
                    None => rec.feature,
                };
                feature_l2(&f, &self.teacher_feature)?.value
            }
        })
    }

    /// Analytic gradients, in the order of [`Problem::params`].
    pub fn analytic_grads(&self, kind: LossKind) -> Result<Vec<Tensor>> {
        let rec = self.net.forward(&self.inputs)?;
        let zero_logits = Tensor::zeros(rec.logits.shape());
        // The adapter only sees the feature loss.
        let with_idle_adapter = |mut g: Vec<Tensor>| {
            if let Some(a) = &self.adapter {
                g.extend(a.params.iter().map(|p| Tensor::zeros(p.shape())));
            }
            g
        };
        match kind {
            LossKind::Classification => {
                let l = cross_entropy(&rec.probs, &self.labels)?;
                self.net.backward(&rec, &l.grad, None).map(with_idle_adapter)
            }
            LossKind::Distillation => {
                let l = kl_distill(&self.teacher_probs, &rec.probs)?;
                self.net.backward(&rec, &l.grad, None).map(with_idle_adapter)
            }
            LossKind::Feature => match &self.adapter {
                None => {
                    let l = feature_l2(&rec.feature, &self.teacher_feature)?;
                    self.net.backward(&rec, &zero_logits, Some(&l.grad))
                }
                Some(a) => {
                    let mapped = a.forward(&rec.feature)?;
                    let l = feature_l2(&mapped, &self.teacher_feature)?;
                    let (adapter_grads, grad_feature) = a.backward(&rec.feature, &l.grad)?;
                    let mut grads = self.net.backward(&rec, &zero_logits, Some(&grad_feature))?;
                    grads.extend(adapter_grads);
                    Ok(grads)
                }
            },
        }
    }

    fn relu_pattern(&self) -> Result<Vec<bool>> {
        Ok(self.net.forward(&self.inputs)?.relu_pattern())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub kind: LossKind,
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes redrawn because a ReLU changed state within ±eps.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < TOLERANCE)
    }

    /// `Err` naming the first loss over tolerance.
    pub fn into_result(self) -> Result<Self> {
        if let Some(bad) = self.checks.iter().find(|c| c.max_rel_err.is_nan() || c.max_rel_err >= TOLERANCE) {
            return Err(Error::Gradcheck {
                op: bad.kind.name().to_string(),
                max_rel_err: bad.max_rel_err,
                tolerance: TOLERANCE,
            });
        }
        Ok(self)
    }
}

/// The fixed family of problems audited for a seed: MLPs of several depths,
/// one feature tap below the penultimate layer, soft labels, adapters, and a small CNN.
pub fn problems(seed: u64) -> Result<Vec<Problem>> {
    let s = |k: u64| seed.wrapping_mul(0x9E37_79B9).wrapping_add(k);
    Ok(vec![
        Problem::random(&ArchSpec::mlp(8, &[16], 4), 5, None, false, s(1))?,
        Problem::random(&ArchSpec::mlp(8, &[16], 4), 4, Some(6), true, s(2))?,
        Problem::random(&ArchSpec::mlp(6, &[10, 7], 3), 4, Some(12), false, s(3))?,
        Problem::random(&ArchSpec::mlp(6, &[10, 7], 5).with_feature_layer(0), 3, None, true, s(4))?,
        Problem::random(&ArchSpec::small_cnn([1, 4, 4], [2, 3], 5, 3), 2, Some(4), false, s(5))?,
    ])
}

/// Gradient source under audit; the default is [`Problem::analytic_grads`].
pub type GradSource<'a> = &'a dyn Fn(&Problem, LossKind) -> Result<Vec<Tensor>>;

pub fn check_loss(kind: LossKind, problems: &[Problem], seed: u64, grad_source: GradSource) -> Result<LossCheck> {
    let mut rng = rng::stream(Stream::Data, seed, 0x9c + kind as u64);
    let mut max_rel_err = 0.0f64;
    let (mut probes, mut skipped) = (0, 0);
    for problem in problems {
        let analytic = grad_source(problem, kind)?;
        let sizes: Vec<usize> = problem.params().iter().map(|t| t.len()).collect();
        if analytic.len() != sizes.len() {
            return Err(Error::Gradcheck {
                op: kind.name().into(),
                max_rel_err: f64::INFINITY,
                tolerance: TOLERANCE,
            });
        }
        let base_pattern = problem.relu_pattern()?;
        let mut done = 0;
        let mut attempts = 0;
        while done < PROBES_PER_PROBLEM && attempts < 20 * PROBES_PER_PROBLEM {
            attempts += 1;
            let t = rng.random_range(0..sizes.len());
            let e = rng.random_range(0..sizes[t]);
            let mut p = problem.clone();
            let orig = p.param_mut(t).data()[e];
            p.param_mut(t).data_mut()[e] = orig + EPS;
            let plus_pattern = p.relu_pattern()?;
            let plus = p.loss(kind)?;
            p.param_mut(t).data_mut()[e] = orig - EPS;
            let minus_pattern = p.relu_pattern()?;
            let minus = p.loss(kind)?;
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * EPS);
            let err = relative_error(analytic[t].data()[e], numeric, REL_FLOOR);
            max_rel_err = max_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
            done += 1;
        }
        probes += done;
    }
    Ok(LossCheck {
        kind,
        max_rel_err,
        probes,
        skipped,
    })
}

/// Audits all three losses with the supplied gradient source.
pub fn run_with(seed: u64, grad_source: GradSource) -> Result<GradcheckReport> {
    let problems = problems(seed)?;
    let checks = LossKind::ALL
        .iter()
        .map(|&k| check_loss(k, &problems, seed, grad_source))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { seed, checks })
}

pub fn run(seed: u64) -> Result<GradcheckReport> {
    run_with(seed, &|p, k| p.analytic_grads(k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes() {
        let report = run(0).unwrap();
        for c in &report.checks {
            assert!(c.probes >= 100, "{c:?}");
            assert!(c.max_rel_err < TOLERANCE, "{c:?}");
        }
        assert!(report.into_result().is_ok());
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let corrupt = |p: &Problem, k: LossKind| -> Result<Vec<Tensor>> {
            let mut g = p.analytic_grads(k)?;
            if k == LossKind::Distillation {
                g[0] = g[0].scale(1.01);
            }
            Ok(g)
        };
        let report = run_with(1, &corrupt).unwrap();
        assert!(!report.passed());
        match report.into_result() {
            Err(Error::Gradcheck { op, .. }) => assert_eq!(op, "L_D"),
            other => panic!("expected gradcheck failure, got {other:?}"),
        }
    }
}
