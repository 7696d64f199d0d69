//! Classification, distillation and feature-imitation losses.
//!
//! Every loss is a mean over the batch and returns its gradient with respect
//! to the student-side input (logits or feature). Teacher-side arguments are
//! constants: no gradient is produced for them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-stochastic label matrix: one-hot for clean samples, mixed after
/// fusion or splicing.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDist(Tensor);

impl LabelDist {
    pub fn new(dist: Tensor) -> Result<Self> {
        if dist.shape().len() != 2 {
            return Err(Error::dim("label_dist", dist.shape(), &[0, 0]));
        }
        for r in 0..dist.rows() {
            let row = dist.row(r);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| v.is_nan() || v < 0.0) || (total - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("label row {r} is not a distribution: {row:?}")));
            }
        }
        Ok(Self(dist))
    }

    pub fn one_hot(classes: &[usize], num_classes: usize) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!("class id {bad} out of range for {num_classes} classes")));
        }
        let mut t = Tensor::zeros(&[classes.len(), num_classes]);
        for (r, &c) in classes.iter().enumerate() {
            t.row_mut(r)[c] = 1.0;
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self(self.0.select_rows(indices))
    }

    /// Index of the largest entry of each row.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.0.rows()).map(|r| argmax(self.0.row(r))).collect()
    }

    pub(crate) fn from_trusted(t: Tensor) -> Self {
        Self(t)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the distillation term.
    pub alpha: f64,
    /// Weight of the feature term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss value with the gradient on the student-side input.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

/// Mean of `−Σ y log p` with the fused softmax–CE gradient `(p − y)/B` on logits.
pub fn cross_entropy(probs: &Tensor, labels: &LabelDist) -> Result<LossGrad> {
    probs.check_same_shape("cross_entropy", labels.tensor())?;
    let b = probs.rows() as f64;
    let mut total = 0.0;
    for (&p, &y) in probs.data().iter().zip(labels.tensor().data()) {
        if y != 0.0 {
            total -= y * p.max(PROB_FLOOR).ln();
        }
    }
    let grad = probs.sub(labels.tensor())?.scale(1.0 / b);
    Ok(LossGrad { value: total / b, grad })
}

/// Mean of `KL(p_t ‖ p_s) = Σ p_t log(p_t / p_s)`; gradient on student logits `(p_s − p_t)/B`.
pub fn kl_distill(teacher_probs: &Tensor, student_probs: &Tensor) -> Result<LossGrad> {
    teacher_probs.check_same_shape("kl_distill", student_probs)?;
    let b = student_probs.rows() as f64;
    Ok(LossGrad {
        value: kl_sum(teacher_probs, student_probs) / b,
        grad: student_probs.sub(teacher_probs)?.scale(1.0 / b),
    })
}

fn kl_sum(p: &Tensor, q: &Tensor) -> f64 {
    p.data()
        .iter()
        .zip(q.data())
        .filter(|(&pt, _)| pt > 0.0)
        .map(|(&pt, &ps)| pt * (pt.ln() - ps.max(PROB_FLOOR).ln()))
        .sum()
}

/// Temperature-softened distillation on raw logits: `T² · KL(softmax(z_t/T) ‖ softmax(z_s/T))`.
///
/// At `T = 1` this is exactly [`kl_distill`] on the probabilities.
pub fn kl_distill_tempered(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<LossGrad> {
    if temperature == 1.0 {
        return kl_distill(&softmax_rows(teacher_logits)?, &softmax_rows(student_logits)?);
    }
    let pt = softmax_rows(&teacher_logits.scale(1.0 / temperature))?;
    let ps = softmax_rows(&student_logits.scale(1.0 / temperature))?;
    let inner = kl_distill(&pt, &ps)?;
    Ok(LossGrad {
        value: temperature * temperature * inner.value,
        grad: inner.grad.scale(temperature),
    })
}

/// Mean squared Euclidean distance between feature rows; gradient `2(F_s − F_t)/B`.
pub fn feature_l2(student_feat: &Tensor, teacher_feat: &Tensor) -> Result<LossGrad> {
    if student_feat.shape() != teacher_feat.shape() {
        return Err(Error::Config(format!(
            "feature widths differ ({:?} vs {:?}) and no adapter maps between them",
            student_feat.shape(),
            teacher_feat.shape()
        )));
    }
    let b = student_feat.rows() as f64;
    let diff = student_feat.sub(teacher_feat)?;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / b;
    Ok(LossGrad {
        value,
        grad: diff.scale(2.0 / b),
    })
}

/// `L_C + α·L_D + β·L_F`.
pub fn student_loss(classification: f64, distill: f64, feature: f64, w: LossWeights) -> f64 {
    classification + w.alpha * distill + w.beta * feature
}

/// The teacher learns from labels only.
pub fn teacher_loss(classification: f64) -> f64 {
    classification
}
