//! Joint training of a cohort of networks.
//!
//! Three strategies share one driver:
//!
//! * **competitive** – every mini-batch the network with the lowest
//!   classification loss is elected teacher. The teacher is updated on its
//!   classification loss alone; every other network (a student) is updated on
//!   `L_C + α·L_D + β·L_F`, with the teacher's outputs recomputed on the
//!   student's own batch and held constant.
//! * **dml** – every network distils from the average of all others.
//! * **independent** – classification loss only.
//!
//! All forwards and gradients of an iteration are computed against the
//! pre-step parameters; parameter updates happen after every gradient is known.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Provenance};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, feature_l2, kl_distill, kl_distill_tempered, LossGrad, LossWeights};
use crate::nn::{ArchSpec, ForwardRecord, NetworkState};
use crate::optim::{self, OptimConfig};
use crate::perturb::PerturbEvent;
use crate::rng::{self, Stream};
use crate::tensor::{add_row_bias, column_sums, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Competitive,
    Dml,
    Independent,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Competitive => "competitive",
            StrategyKind::Dml => "dml",
            StrategyKind::Independent => "independent",
        }
    }

    pub fn min_cohort(self) -> usize {
        match self {
            StrategyKind::Independent => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
    Independent,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Independent => "independent",
        }
    }
}

/// Per-network slice of a [`CohortStep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetStep {
    pub role: Role,
    pub classification: f64,
    pub distill: f64,
    pub feature: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub perturbed: bool,
}

/// Record of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStep {
    pub iteration: u64,
    pub epoch: u64,
    pub teacher: Option<usize>,
    pub nets: Vec<NetStep>,
    pub event: Option<PerturbEvent>,
}

impl CohortStep {
    pub fn classification_losses(&self) -> Vec<f64> {
        self.nets.iter().map(|n| n.classification).collect()
    }
}

/// Index of the smallest loss; ties go to the lowest index.
pub fn elect_teacher(losses: &[f64]) -> Result<usize> {
    if losses.len() < 2 {
        return Err(Error::Config(format!(
            "teacher election needs at least 2 networks, got {}",
            losses.len()
        )));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Diverged {
            net: i,
            iteration: 0,
            reason: format!("non-finite classification loss {}", losses[i]),
        });
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Student-owned linear map from its feature width to another width, trained
/// only by the feature loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub params: Vec<Tensor>,
    pub momentum: Vec<Tensor>,
}

impl Adapter {
    pub(crate) fn new(d_in: usize, d_out: usize, seed: u64, key: u64) -> Result<Self> {
        let mut rng = rng::stream(Stream::Init, seed, key);
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect();
        let params = vec![Tensor::new(vec![d_in, d_out], w)?, Tensor::zeros(&[d_out])];
        let momentum = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self { params, momentum })
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.params[0].shape()[1]
    }

    pub fn forward(&self, feature: &Tensor) -> Result<Tensor> {
        add_row_bias(&matmul(feature, &self.params[0])?, &self.params[1])
    }

    /// `(parameter grads, grad on the input feature)`.
    pub fn backward(&self, feature: &Tensor, grad_out: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let grads = vec![matmul_tn(feature, grad_out)?, column_sums(grad_out)?];
        Ok((grads, matmul_nt(grad_out, &self.params[0])?))
    }
}

/// Everything a step needs besides the networks and batches.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub optim: &'a OptimConfig,
    pub weights: LossWeights,
    pub temperature: f64,
    pub use_feature_loss: bool,
    pub iteration: u64,
    pub epoch: u64,
    pub epoch_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub nets: Vec<NetworkState>,
    /// Per network: adapters keyed by target feature width.
    pub adapters: Vec<BTreeMap<usize, Adapter>>,
}

struct Pending {
    net_grads: Vec<Vec<Tensor>>,
    adapter_grads: Vec<Vec<(usize, Vec<Tensor>)>>,
}

impl Cohort {
    /// Initializes network `i` from the init stream keyed by `i`. Adapters are
    /// created only when feature widths differ and the feature loss is on.
    pub fn new(archs: &[ArchSpec], init_seed: u64, use_feature_loss: bool) -> Result<Self> {
        if archs.is_empty() {
            return Err(Error::Config("cohort is empty".into()));
        }
        let nets = archs
            .iter()
            .enumerate()
            .map(|(i, a)| NetworkState::init(a, init_seed, i))
            .collect::<Result<Vec<_>>>()?;
        Self::from_nets(nets, init_seed, use_feature_loss)
    }

    pub fn from_nets(nets: Vec<NetworkState>, init_seed: u64, use_feature_loss: bool) -> Result<Self> {
        let classes = nets[0].arch.num_classes;
        if let Some(bad) = nets.iter().find(|n| n.arch.num_classes != classes) {
            return Err(Error::Config(format!(
                "cohort members disagree on num_classes ({} vs {})",
                classes, bad.arch.num_classes
            )));
        }
        let widths: Vec<usize> = nets.iter().map(|n| n.arch.feature_dim()).collect();
        let mut adapters = Vec::with_capacity(nets.len());
        for (i, &own) in widths.iter().enumerate() {
            let mut bank = BTreeMap::new();
            if use_feature_loss {
                for &target in &widths {
                    if target != own && !bank.contains_key(&target) {
                        let key = (1u64 << 32) | ((i as u64) << 20) | target as u64;
                        bank.insert(target, Adapter::new(own, target, init_seed, key)?);
                    }
                }
            }
            adapters.push(bank);
        }
        Ok(Self { nets, adapters })
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn step(
        &mut self,
        strategy: StrategyKind,
        batches: &[Batch],
        event: Option<PerturbEvent>,
        ctx: &StepContext,
    ) -> Result<CohortStep> {
        match strategy {
            StrategyKind::Competitive => self.competitive_step(batches, event, ctx),
            StrategyKind::Dml => self.dml_step(batches, event, ctx),
            StrategyKind::Independent => self.independent_step(batches, event, ctx),
        }
    }

    /// Competitive distillation iteration over per-network batches.
    pub fn competitive_step(
        &mut self,
        batches: &[Batch],
        event: Option<PerturbEvent>,
        ctx: &StepContext,
    ) -> Result<CohortStep> {
        let n = self.check_batches(batches, StrategyKind::Competitive)?;
        let (records, ce) = self.classify(batches, ctx.iteration)?;
        let losses: Vec<f64> = ce.iter().map(|l| l.value).collect();
        let teacher = elect_teacher(&losses).map_err(|e| with_iteration(e, ctx.iteration))?;

        let mut pending = Pending::new(n);
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let perturbed = batches[i].provenance == Provenance::Perturbed;
            if i == teacher {
                pending.net_grads[i] = self.nets[i].backward(&records[i], &ce[i].grad, None)?;
                steps.push(NetStep {
                    role: Role::Teacher,
                    classification: ce[i].value,
                    distill: 0.0,
                    feature: 0.0,
                    total: ce[i].value,
                    grad_norm: grad_norm(&pending.net_grads[i]),
                    perturbed,
                });
                continue;
            }
            let teacher_view = if shares_input(teacher, i, event.as_ref()) {
                records[teacher].clone()
            } else {
                self.nets[teacher].forward(&batches[i].inputs)?
            };
            let kd = distill(&teacher_view, &records[i], ctx.temperature)?;
            let mut grad_logits = ce[i].grad.clone();
            grad_logits.add_scaled(&kd.grad, ctx.weights.alpha)?;

            let (feature_value, grad_feature) = if ctx.use_feature_loss {
                let (value, grad_feature, adapter_grads) =
                    self.feature_term(i, &records[i].feature, &teacher_view.feature, ctx.weights.beta)?;
                pending.adapter_grads[i].extend(adapter_grads);
                (value, Some(grad_feature))
            } else {
                (0.0, None)
            };
            pending.net_grads[i] = self.nets[i].backward(&records[i], &grad_logits, grad_feature.as_ref())?;
            steps.push(NetStep {
                role: Role::Student,
                classification: ce[i].value,
                distill: kd.value,
                feature: feature_value,
                total: crate::losses::student_loss(
                    ce[i].value,
                    kd.value,
                    feature_value,
                    ctx.weights,
                ),
                grad_norm: grad_norm(&pending.net_grads[i]),
                perturbed,
            });
        }
        self.apply(pending, ctx)?;
        Ok(CohortStep {
            iteration: ctx.iteration,
            epoch: ctx.epoch,
            teacher: Some(teacher),
            nets: steps,
            event,
        })
    }

    /// Deep mutual learning: each network distils from the mean of all peers.
    pub fn dml_step(&mut self, batches: &[Batch], event: Option<PerturbEvent>, ctx: &StepContext) -> Result<CohortStep> {
        let n = self.check_batches(batches, StrategyKind::Dml)?;
        let (records, ce) = self.classify(batches, ctx.iteration)?;
        let peer_weight = 1.0 / (n - 1) as f64;
        let mut pending = Pending::new(n);
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let mut grad_logits = ce[i].grad.clone();
            let mut grad_feature = ctx.use_feature_loss.then(|| Tensor::zeros(records[i].feature.shape()));
            let (mut kd_total, mut feat_total) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let peer = if shares_input(j, i, event.as_ref()) {
                    records[j].clone()
                } else {
                    self.nets[j].forward(&batches[i].inputs)?
                };
                let kd = distill(&peer, &records[i], ctx.temperature)?;
                kd_total += peer_weight * kd.value;
                grad_logits.add_scaled(&kd.grad, ctx.weights.alpha * peer_weight)?;
                if let Some(gf) = grad_feature.as_mut() {
                    let (value, g, adapter_grads) =
                        self.feature_term(i, &records[i].feature, &peer.feature, ctx.weights.beta * peer_weight)?;
                    feat_total += peer_weight * value;
                    gf.add_scaled(&g, 1.0)?;
                    pending.add_adapter_grads(i, adapter_grads)?;
                }
            }
            pending.net_grads[i] = self.nets[i].backward(&records[i], &grad_logits, grad_feature.as_ref())?;
            steps.push(NetStep {
                role: Role::Student,
                classification: ce[i].value,
                distill: kd_total,
                feature: feat_total,
                total: crate::losses::student_loss(ce[i].value, kd_total, feat_total, ctx.weights),
                grad_norm: grad_norm(&pending.net_grads[i]),
                perturbed: batches[i].provenance == Provenance::Perturbed,
            });
        }
        self.apply(pending, ctx)?;
        Ok(CohortStep {
            iteration: ctx.iteration,
            epoch: ctx.epoch,
            teacher: None,
            nets: steps,
            event,
        })
    }

    /// Classification loss only; the weights and feature flag are ignored.
    pub fn independent_step(
        &mut self,
        batches: &[Batch],
        event: Option<PerturbEvent>,
        ctx: &StepContext,
    ) -> Result<CohortStep> {
        let n = self.check_batches(batches, StrategyKind::Independent)?;
        let (records, ce) = self.classify(batches, ctx.iteration)?;
        let mut pending = Pending::new(n);
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            pending.net_grads[i] = self.nets[i].backward(&records[i], &ce[i].grad, None)?;
            steps.push(NetStep {
                role: Role::Independent,
                classification: ce[i].value,
                distill: 0.0,
                feature: 0.0,
                total: ce[i].value,
                grad_norm: grad_norm(&pending.net_grads[i]),
                perturbed: batches[i].provenance == Provenance::Perturbed,
            });
        }
        self.apply(pending, ctx)?;
        Ok(CohortStep {
            iteration: ctx.iteration,
            epoch: ctx.epoch,
            teacher: None,
            nets: steps,
            event,
        })
    }

    fn check_batches(&self, batches: &[Batch], strategy: StrategyKind) -> Result<usize> {
        let n = self.nets.len();
        if n < strategy.min_cohort() {
            return Err(Error::Config(format!(
                "{strategy} needs at least {} networks, cohort has {n}",
                strategy.min_cohort()
            )));
        }
        if batches.len() != n {
            return Err(Error::Config(format!("{} batches for {n} networks", batches.len())));
        }
        if batches.iter().any(Batch::is_empty) {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(n)
    }

    fn classify(&self, batches: &[Batch], iteration: u64) -> Result<(Vec<ForwardRecord>, Vec<LossGrad>)> {
        let mut records = Vec::with_capacity(batches.len());
        let mut losses = Vec::with_capacity(batches.len());
        for (net, batch) in self.nets.iter().zip(batches) {
            let rec = net.forward(&batch.inputs)?;
            let ce = cross_entropy(&rec.probs, &batch.labels)?;
            if !ce.value.is_finite() || !rec.logits.is_finite() {
                return Err(Error::Diverged {
                    net: net.net_id,
                    iteration,
                    reason: format!("classification loss {}", ce.value),
                });
            }
            records.push(rec);
            losses.push(ce);
        }
        Ok((records, losses))
    }

    /// Feature loss of net `i` against a constant target, through the adapter
    /// when widths differ. Returns `(L_F, scale·∂L_F/∂F_i, adapter grads)`;
    /// adapter grads are divided by `1 + mean‖F_i‖²`.
    #[allow(clippy::type_complexity)]
    fn feature_term(
        &self,
        i: usize,
        feature: &Tensor,
        target: &Tensor,
        scale: f64,
    ) -> Result<(f64, Tensor, Vec<(usize, Vec<Tensor>)>)> {
        let width = target.shape()[1];
        if width == feature.shape()[1] {
            let l = feature_l2(feature, target)?;
            return Ok((l.value, l.grad.scale(scale), Vec::new()));
        }
        let adapter = self.adapters[i].get(&width).ok_or_else(|| {
            Error::Config(format!(
                "net {i} has feature width {} but no adapter to width {width}",
                feature.shape()[1]
            ))
        })?;
        let mapped = adapter.forward(feature)?;
        let l = feature_l2(&mapped, target)?;
        let (grads, grad_in) = adapter.backward(feature, &l.grad.scale(scale))?;
        // Normalized-LMS step: the adapter is a least-squares fit on raw
        // activations, and a plain step diverges once E‖F‖² · lr exceeds ~1.
        let energy = feature.data().iter().map(|v| v * v).sum::<f64>() / feature.rows() as f64;
        let grads = grads.into_iter().map(|g| g.scale(1.0 / (1.0 + energy))).collect();
        Ok((l.value, grad_in, vec![(width, grads)]))
    }

    fn apply(&mut self, pending: Pending, ctx: &StepContext) -> Result<()> {
        for (net, grads) in self.nets.iter_mut().zip(&pending.net_grads) {
            net.sgd_step(grads, ctx.optim, ctx.epoch_fraction, ctx.iteration)?;
        }
        let lr = ctx.optim.lr_at(ctx.epoch_fraction);
        for (i, updates) in pending.adapter_grads.into_iter().enumerate() {
            for (width, grads) in updates {
                let adapter = self.adapters[i].get_mut(&width).expect("adapter used for gradient");
                optim::nesterov_step(&mut adapter.params, &mut adapter.momentum, &grads, ctx.optim, lr).map_err(
                    |reason| Error::Diverged {
                        net: i,
                        iteration: ctx.iteration,
                        reason: format!("adapter to width {width}: {reason}"),
                    },
                )?;
            }
        }
        Ok(())
    }
}

impl Pending {
    fn new(n: usize) -> Self {
        Self {
            net_grads: vec![Vec::new(); n],
            adapter_grads: vec![Vec::new(); n],
        }
    }

    /// Accumulates into an existing entry for the same adapter.
    fn add_adapter_grads(&mut self, i: usize, grads: Vec<(usize, Vec<Tensor>)>) -> Result<()> {
        for (width, g) in grads {
            match self.adapter_grads[i].iter_mut().find(|(w, _)| *w == width) {
                Some((_, acc)) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_scaled(b, 1.0)?;
                    }
                }
                None => self.adapter_grads[i].push((width, g)),
            }
        }
        Ok(())
    }
}

fn distill(teacher: &ForwardRecord, student: &ForwardRecord, temperature: f64) -> Result<LossGrad> {
    if temperature == 1.0 {
        kl_distill(&teacher.probs, &student.probs)
    } else {
        kl_distill_tempered(&teacher.logits, &student.logits, temperature)
    }
}

/// Networks `a` and `b` saw the same inputs unless one of them was mutated.
fn shares_input(a: usize, b: usize, event: Option<&PerturbEvent>) -> bool {
    a == b || event.is_none_or(|e| e.target_net != a && e.target_net != b)
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

fn with_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::Diverged { net, reason, .. } => Error::Diverged { net, iteration, reason },
        other => other,
    }
}
