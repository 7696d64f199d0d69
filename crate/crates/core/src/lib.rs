//! Competitive distillation for cohorts of small networks.
//!
//! A cohort of networks trains jointly on the same data. Each mini-batch, the
//! network with the lowest classification loss acts as teacher for the rest;
//! one randomly chosen network sees an aggressively perturbed batch. Deep
//! mutual learning and independent training are provided as baselines.
//!
//! Everything runs on the CPU in `f64` and is reproducible from the seeds in
//! [`config::Seeds`].

pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod train;

pub use cohort::{elect_teacher, Cohort, CohortStep, Role, StrategyKind};
pub use config::{DatasetSpec, RunConfig, Seeds, Strategy, TrainData};
pub use data::{BlobSpec, Dataset};
pub use error::{Error, Result};
pub use losses::{LabelDist, LossWeights};
pub use nn::{ArchKind, ArchSpec, NetworkState};
pub use optim::OptimConfig;
pub use perturb::{PerturbConfig, PerturbEvent, PerturbKind, PerturbParams};
pub use tensor::Tensor;
pub use train::{train, MetricsSink, RunReport, Trainer};
