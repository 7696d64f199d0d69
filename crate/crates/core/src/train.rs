//! The epoch loop around [`Cohort`]: batching, mutation, evaluation, and
//! bookkeeping for teacher switches and convergence.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CohortStep, StepContext, StrategyKind};
use crate::config::{RunConfig, TrainData};
use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::nn::NetworkState;
use crate::perturb::{mutate_cohort, MutationRngs, PerturbEvent};

/// Receives the per-iteration and per-epoch records of a run.
pub trait MetricsSink {
    fn record_step(&mut self, step: &CohortStep) -> Result<()>;
    fn record_eval(&mut self, epoch: u64, iteration: u64, accuracies: &[f64]) -> Result<()>;
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record_step(&mut self, _: &CohortStep) -> Result<()> {
        Ok(())
    }

    fn record_eval(&mut self, _: u64, _: u64, _: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Debug, Default, Clone)]
pub struct RecordingSink {
    pub steps: Vec<CohortStep>,
    pub evals: Vec<(u64, u64, Vec<f64>)>,
}

impl MetricsSink for RecordingSink {
    fn record_step(&mut self, step: &CohortStep) -> Result<()> {
        self.steps.push(step.clone());
        Ok(())
    }

    fn record_eval(&mut self, epoch: u64, iteration: u64, accuracies: &[f64]) -> Result<()> {
        self.evals.push((epoch, iteration, accuracies.to_vec()));
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 13] = [
    "row",
    "iter",
    "epoch",
    "net",
    "role",
    "L_C",
    "L_D",
    "L_F",
    "total",
    "perturbed",
    "perturb_kind",
    "perturb_params",
    "test_acc",
];

/// Metrics CSV: one `step` row per (iteration, net) and one `eval` row per
/// (epoch, net). Columns that do not apply to a row kind are left empty.
pub struct CsvMetrics<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvMetrics<W> {
    pub fn new(inner: W) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(METRICS_HEADER).map_err(csv_err)?;
        Ok(Self { writer })
    }

    pub fn into_inner(self) -> Result<W> {
        self.writer
            .into_inner()
            .map_err(|e| Error::io("metrics.csv", std::io::Error::other(e.to_string())))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("metrics.csv", std::io::Error::other(e.to_string()))
}

impl<W: Write> MetricsSink for CsvMetrics<W> {
    fn record_step(&mut self, step: &CohortStep) -> Result<()> {
        for (i, net) in step.nets.iter().enumerate() {
            let (kind, params) = match &step.event {
                Some(e) if e.target_net == i => (e.kind().name().to_string(), e.params.summary()),
                _ => (String::new(), String::new()),
            };
            self.writer
                .write_record([
                    "step".to_string(),
                    step.iteration.to_string(),
                    step.epoch.to_string(),
                    i.to_string(),
                    net.role.name().to_string(),
                    net.classification.to_string(),
                    net.distill.to_string(),
                    net.feature.to_string(),
                    net.total.to_string(),
                    u8::from(net.perturbed).to_string(),
                    kind,
                    params,
                    String::new(),
                ])
                .map_err(csv_err)?;
        }
        Ok(())
    }

    fn record_eval(&mut self, epoch: u64, iteration: u64, accuracies: &[f64]) -> Result<()> {
        for (i, acc) in accuracies.iter().enumerate() {
            let mut row = vec![String::new(); METRICS_HEADER.len()];
            row[0] = "eval".into();
            row[1] = iteration.to_string();
            row[2] = epoch.to_string();
            row[3] = i.to_string();
            row[12] = acc.to_string();
            self.writer.write_record(&row).map_err(csv_err)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io("metrics.csv", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetReport {
    pub net: usize,
    pub arch: String,
    /// Test accuracy in percent after the last epoch.
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// First iteration whose evaluation came within 0.5 points of the final accuracy.
    pub convergence_step: u64,
    /// Accuracy after each epoch; entry 0 is before training.
    pub accuracy_history: Vec<f64>,
    pub times_teacher: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub epochs: usize,
    pub iterations: u64,
    pub teacher_switches: u64,
    pub nets: Vec<NetReport>,
    pub wall_clock_ms_per_step: f64,
    /// Per-net accuracy minus the independent baseline, when one was co-run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imp_ind: Option<Vec<f64>>,
    /// Per-net accuracy minus the DML baseline, when one was co-run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imp_dml: Option<Vec<f64>>,
}

impl RunReport {
    /// Highest final accuracy across the cohort.
    pub fn best_net_accuracy(&self) -> f64 {
        self.nets.iter().map(|n| n.final_accuracy).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Test accuracy in percent.
pub fn accuracy(net: &NetworkState, ds: &Dataset) -> Result<f64> {
    const CHUNK: usize = 512;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(CHUNK) {
        let rec = net.forward(&ds.inputs.select_rows(idx))?;
        for (r, &i) in idx.iter().enumerate() {
            if argmax(rec.logits.row(r)) == ds.classes[i] {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Step-at-a-time training driver.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a TrainData,
    pub cohort: Cohort,
    mutation: MutationRngs,
    iteration: u64,
    last_teacher: Option<usize>,
    teacher_switches: u64,
    times_teacher: Vec<u64>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a TrainData) -> Result<Self> {
        cfg.validate()?;
        for (i, arch) in cfg.cohort.iter().enumerate() {
            if arch.input_dim() != data.train.inputs.row_len() {
                return Err(Error::Config(format!(
                    "cohort[{i}] expects {} inputs, dataset samples have {}",
                    arch.input_dim(),
                    data.train.inputs.row_len()
                )));
            }
        }
        let use_features = cfg.strategy.use_feature_loss && cfg.strategy.kind != StrategyKind::Independent;
        let cohort = Cohort::new(&cfg.cohort, cfg.seeds.init, use_features)?;
        Ok(Self {
            cfg,
            data,
            times_teacher: vec![0; cohort.len()],
            cohort,
            mutation: MutationRngs::new(cfg.seeds.perturb),
            iteration: 0,
            last_teacher: None,
            teacher_switches: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn teacher_switches(&self) -> u64 {
        self.teacher_switches
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Batch> {
        batches(&self.data.train, self.cfg.batch_size, epoch, self.cfg.seeds.shuffle)
    }

    /// Per-network batches for the next iteration, mutating one of them when
    /// perturbation is enabled.
    pub fn prepare(&mut self, clean: &Batch) -> Result<(Vec<Batch>, Option<PerturbEvent>)> {
        let n = self.cohort.len();
        if self.cfg.strategy.use_perturbation {
            let (b, e) = mutate_cohort(clean, n, &self.cfg.perturbation, &mut self.mutation, self.iteration)?;
            Ok((b, Some(e)))
        } else {
            Ok((vec![clean.clone(); n], None))
        }
    }

    pub fn context(&self, epoch: u64, epoch_fraction: f64) -> StepContext<'a> {
        StepContext {
            optim: &self.cfg.optimizer,
            weights: self.cfg.weights,
            temperature: self.cfg.temperature,
            use_feature_loss: self.cfg.strategy.use_feature_loss,
            iteration: self.iteration,
            epoch,
            epoch_fraction,
        }
    }

    pub fn step(
        &mut self,
        batches: &[Batch],
        event: Option<PerturbEvent>,
        epoch: u64,
        epoch_fraction: f64,
    ) -> Result<CohortStep> {
        let ctx = self.context(epoch, epoch_fraction);
        let step = self.cohort.step(self.cfg.strategy.kind, batches, event, &ctx)?;
        if let Some(t) = step.teacher {
            if self.last_teacher.is_some_and(|prev| prev != t) {
                self.teacher_switches += 1;
            }
            self.last_teacher = Some(t);
            self.times_teacher[t] += 1;
        }
        self.iteration += 1;
        Ok(step)
    }

    pub fn evaluate(&self) -> Result<Vec<f64>> {
        self.cohort.nets.iter().map(|n| accuracy(n, &self.data.test)).collect()
    }

    /// Runs every epoch, reporting to `sink`. On error the sink is flushed
    /// before the error is returned.
    pub fn run(mut self, sink: &mut dyn MetricsSink) -> Result<(RunReport, Cohort)> {
        let result = self.run_inner(sink);
        let flushed = sink.flush();
        let report = result?;
        flushed?;
        Ok((report, self.cohort))
    }

    fn run_inner(&mut self, sink: &mut dyn MetricsSink) -> Result<RunReport> {
        let epochs = self.cfg.epochs;
        let mut history: Vec<(u64, Vec<f64>)> = vec![(0, self.evaluate()?)];
        sink.record_eval(0, 0, &history[0].1)?;
        let started = Instant::now();
        for epoch in 0..epochs as u64 {
            let epoch_batches = self.epoch_batches(epoch);
            let per_epoch = epoch_batches.len() as f64;
            for (b, clean) in epoch_batches.iter().enumerate() {
                let fraction = (epoch as f64 + b as f64 / per_epoch) / epochs as f64;
                let (batches, event) = self.prepare(clean)?;
                let step = self.step(&batches, event, epoch, fraction)?;
                sink.record_step(&step)?;
            }
            let acc = self.evaluate()?;
            sink.record_eval(epoch + 1, self.iteration, &acc)?;
            history.push((self.iteration, acc));
        }
        let elapsed = started.elapsed().as_secs_f64() * 1e3;
        Ok(self.report(&history, elapsed))
    }

    fn report(&self, history: &[(u64, Vec<f64>)], elapsed_ms: f64) -> RunReport {
        let nets = self
            .cohort
            .nets
            .iter()
            .enumerate()
            .map(|(i, net)| {
                let series: Vec<f64> = history.iter().map(|(_, a)| a[i]).collect();
                let final_accuracy = *series.last().expect("initial evaluation");
                let best_accuracy = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let convergence_step = history
                    .iter()
                    .find(|(_, a)| a[i] >= final_accuracy - 0.5)
                    .map_or(0, |(it, _)| *it);
                NetReport {
                    net: i,
                    arch: net.arch.label(),
                    final_accuracy,
                    best_accuracy,
                    convergence_step,
                    accuracy_history: series,
                    times_teacher: self.times_teacher[i],
                }
            })
            .collect();
        RunReport {
            strategy: self.cfg.strategy.label(),
            epochs: self.cfg.epochs,
            iterations: self.iteration,
            teacher_switches: self.teacher_switches,
            nets,
            wall_clock_ms_per_step: if self.iteration == 0 {
                0.0
            } else {
                elapsed_ms / self.iteration as f64
            },
            imp_ind: None,
            imp_dml: None,
        }
    }
}

/// Trains the configured strategy end to end.
pub fn train(cfg: &RunConfig, data: &TrainData, sink: &mut dyn MetricsSink) -> Result<(RunReport, Cohort)> {
    Trainer::new(cfg, data)?.run(sink)
}
