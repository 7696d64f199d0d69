//! Experiment configuration, read from a TOML file.
//!
//! Every field except `cohort` and `dataset` has a default; the optimizer and
//! loss-weight defaults are SGD + Nesterov (lr 0.1, momentum 0.9), batch 128
//! and α = β = 1.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::StrategyKind;
use crate::data::{self, BlobSpec, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::ArchSpec;
use crate::optim::OptimConfig;
use crate::perturb::PerturbConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CODISTILL_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    #[serde(default = "yes")]
    pub use_feature_loss: bool,
    #[serde(default = "yes")]
    pub use_perturbation: bool,
    /// Label used in comparison tables and output sub-directories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

fn yes() -> bool {
    true
}

impl Strategy {
    pub fn new(kind: StrategyKind, use_feature_loss: bool, use_perturbation: bool) -> Self {
        Self {
            kind,
            use_feature_loss,
            use_perturbation,
            name: None,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let mut s = self.kind.name().to_string();
            if self.kind != StrategyKind::Independent && self.use_feature_loss {
                s.push_str("+lf");
            }
            if self.use_perturbation {
                s.push_str("+pert");
            }
            s
        })
    }
}

impl Default for Strategy {
    fn default() -> Self {
        Self::new(StrategyKind::Competitive, true, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

/// Train and test splits ready for training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetSpec {
    fn paths(&self) -> Vec<&Path> {
        match self {
            DatasetSpec::Blobs(_) => Vec::new(),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
            DatasetSpec::Cifar { train, test, .. } => train.iter().chain(test).map(PathBuf::as_path).collect(),
        }
    }

    /// Loads both splits; file-based data is standardized with train statistics.
    pub fn load(&self) -> Result<TrainData> {
        let (mut train, mut test, train_limit, test_limit) = match self {
            DatasetSpec::Blobs(spec) => {
                let (train, test) = data::make_blobs(spec)?;
                return Ok(TrainData { train, test });
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => (
                data::read_idx(train_images, train_labels)?,
                data::read_idx(test_images, test_labels)?,
                *train_limit,
                *test_limit,
            ),
            DatasetSpec::Cifar {
                train,
                test,
                train_limit,
                test_limit,
            } => (
                data::read_cifar_bin(train)?,
                data::read_cifar_bin(test)?,
                *train_limit,
                *test_limit,
            ),
        };
        if let Some(n) = train_limit {
            train = train.take(n);
        }
        if let Some(n) = test_limit {
            test = test.take(n);
        }
        test.split = data::Split::Test;
        let classes = train.num_classes.max(test.num_classes);
        train.num_classes = classes;
        test.num_classes = classes;
        let stats = Standardizer::fit(&train);
        stats.apply(&mut train);
        stats.apply(&mut test);
        Ok(TrainData { train, test })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Blobs(b) => b.classes,
            _ => 10,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub perturb: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            shuffle: seed,
            perturb: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub strategy: Strategy,
    pub cohort: Vec<ArchSpec>,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub weights: LossWeights,
    /// Distillation temperature; 1 means plain softmax outputs.
    #[serde(default = "unit")]
    pub temperature: f64,
    #[serde(default)]
    pub perturbation: PerturbConfig,
    pub dataset: DatasetSpec,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Strategies run side by side by `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub compare: Vec<Strategy>,
}

fn unit() -> f64 {
    1.0
}

fn default_epochs() -> usize {
    20
}

fn default_batch() -> usize {
    128
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    /// Config with all defaults around the given cohort and dataset.
    pub fn new(cohort: Vec<ArchSpec>, dataset: DatasetSpec) -> Self {
        Self {
            strategy: Strategy::default(),
            cohort,
            optimizer: OptimConfig::default(),
            weights: LossWeights::default(),
            temperature: 1.0,
            perturbation: PerturbConfig::default(),
            dataset,
            epochs: default_epochs(),
            batch_size: default_batch(),
            seeds: Seeds::default(),
            output_dir: default_output(),
            compare: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file, applying the output-dir environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        Self {
            strategy,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_strategy(&self.strategy)?;
        for s in &self.compare {
            self.validate_strategy(s)?;
        }
        for (i, arch) in self.cohort.iter().enumerate() {
            arch.validate().map_err(|e| Error::Config(format!("cohort[{i}]: {e}")))?;
        }
        let classes = self.dataset.num_classes();
        if let Some((i, a)) = self.cohort.iter().enumerate().find(|(_, a)| a.num_classes != classes) {
            return Err(Error::Config(format!(
                "cohort[{i}] has {} classes, dataset has {classes}",
                a.num_classes
            )));
        }
        if let DatasetSpec::Blobs(b) = &self.dataset {
            if let Some((i, _)) = self.cohort.iter().enumerate().find(|(_, a)| a.input_dim() != b.input_dim) {
                return Err(Error::Config(format!(
                    "cohort[{i}] expects {} inputs, blobs have {}",
                    self.cohort[i].input_dim(),
                    b.input_dim
                )));
            }
        }
        self.optimizer.validate()?;
        self.weights.validate()?;
        self.perturbation.validate()?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(missing) = self.dataset.paths().into_iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("dataset path {} does not exist", missing.display())));
        }
        Ok(())
    }

    fn validate_strategy(&self, s: &Strategy) -> Result<()> {
        let n = self.cohort.len();
        if n < s.kind.min_cohort() {
            return Err(Error::Config(format!(
                "{} needs a cohort of at least {} networks, got {n}",
                s.kind,
                s.kind.min_cohort()
            )));
        }
        if s.use_perturbation && n < 2 {
            return Err(Error::Config("perturbation needs a cohort of at least 2 networks".into()));
        }
        Ok(())
    }
}
