//! TOML run configuration, format version 1.
//!
//! ```toml
//! version = 1
//! seed = 42
//! output_dir = "runs/desk"            # relative to this file
//!
//! [dataset]
//! source = "cifar10"                  # or "synthetic"
//! path = "data/cifar-10-batches-bin"  # cifar10: relative to this file
//! train_records = 5000
//! test_records = 1000
//! # synthetic: classes, train_per_class, test_per_class
//!
//! [model]
//! preset = "small_net"                # or "resnet18"
//!
//! [train]                             # every key optional
//! epochs = 20
//!
//! [[attacks]]
//! kind = "fgsm"
//! epsilon = 0.011764705882352941      # 3/255
//!
//! [analysis]                          # every key optional
//! metrics = ["euclidean", "cosine"]
//! checkpoints = [1, 2, 3]             # default: all
//! max_pairs = 100000                  # default: all pairs
//! grid_points = 100
//!
//! [images]                            # every key optional
//! count = 8
//! ```
//!
//! Unknown keys are rejected. The run seed drives model initialization,
//! training order and augmentation, synthetic data and pair sampling.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::deviation::{Metric, DEFAULT_GRID_POINTS};
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, LossKind, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Cifar10 {
        path: PathBuf,
        train_records: usize,
        test_records: usize,
    },
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `small_net` or `resnet18`; ignored when `architecture` is given.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub architecture: Option<ArchitectureSpec>,
}

impl ModelSection {
    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        match (&self.architecture, self.preset.as_deref()) {
            (Some(spec), None) => Ok(spec.clone()),
            (None, Some("small_net")) => Ok(ArchitectureSpec::small_net()),
            (None, Some("resnet18")) => Ok(ArchitectureSpec::resnet18()),
            (None, Some(other)) => Err(Error::Config(format!("unknown model preset `{other}`"))),
            (Some(_), Some(_)) => Err(Error::Config("give either model.preset or model.architecture, not both".into())),
            (None, None) => Err(Error::Config("model needs a preset or an architecture".into())),
        }
    }
}

/// Training hyperparameters; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossKind,
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            loss: d.loss,
            augment: d.augment,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            loss: self.loss,
            augment: self.augment,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub metrics: Vec<Metric>,
    /// Checkpoint ids to analyze; all when absent.
    pub checkpoints: Option<Vec<usize>>,
    /// Pair budget for the normalization constants; all pairs when absent.
    pub max_pairs: Option<u64>,
    pub grid_points: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            metrics: vec![Metric::Euclidean, Metric::Cosine],
            checkpoints: None,
            max_pairs: None,
            grid_points: DEFAULT_GRID_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagesSection {
    /// Clean images (and their attacked versions) in the sample grid.
    pub count: usize,
}

impl Default for ImagesSection {
    fn default() -> Self {
        ImagesSection { count: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub images: ImagesSection,
}

impl RunConfig {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.output_dir = base.join(&cfg.output_dir);
        if let DatasetSource::Cifar10 { path, .. } = &mut cfg.dataset {
            *path = base.join(&*path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        match &self.dataset {
            DatasetSource::Cifar10 {
                train_records,
                test_records,
                ..
            } => {
                if *train_records == 0 || *test_records == 0 {
                    return Err(Error::Config("cifar10 record counts must be positive".into()));
                }
            }
            DatasetSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
            } => {
                if *classes < 2 || *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config(
                        "synthetic data needs at least 2 classes and positive per-class counts".into(),
                    ));
                }
            }
        }
        let arch = self.model.architecture()?;
        let plan = arch.plan().map_err(cfg)?;
        if arch.input != [3, 32, 32] {
            return Err(Error::Config(format!("model input must be 3x32x32, got {:?}", arch.input)));
        }
        let classes = match &self.dataset {
            DatasetSource::Cifar10 { .. } => crate::io::data::CIFAR_CLASSES,
            DatasetSource::Synthetic { classes, .. } => *classes,
        };
        if plan.classes != classes {
            return Err(Error::Config(format!(
                "model has {} outputs but the dataset has {classes} classes",
                plan.classes
            )));
        }
        self.train.with_seed(self.seed).validate().map_err(cfg)?;
        if self.attacks.is_empty() {
            return Err(Error::Config("at least one attack is required".into()));
        }
        let mut ids = BTreeSet::new();
        for a in &self.attacks {
            a.validate().map_err(cfg)?;
            if !ids.insert(a.id()) {
                return Err(Error::Config(format!("attack `{}` is listed twice", a.id())));
            }
        }
        let metrics: BTreeSet<_> = self.analysis.metrics.iter().collect();
        if metrics.is_empty() || metrics.len() != self.analysis.metrics.len() {
            return Err(Error::Config("analysis.metrics must be non-empty without repeats".into()));
        }
        if let Some(list) = &self.analysis.checkpoints {
            if list.is_empty() {
                return Err(Error::Config("analysis.checkpoints must not be empty".into()));
            }
            if let Some(bad) = list.iter().find(|&&c| c == 0 || c > plan.checkpoints.len()) {
                return Err(Error::Config(format!(
                    "checkpoint {bad} does not exist (model has {})",
                    plan.checkpoints.len()
                )));
            }
        }
        if self.analysis.max_pairs == Some(0) {
            return Err(Error::Config("analysis.max_pairs must be positive".into()));
        }
        if self.analysis.grid_points < 2 {
            return Err(Error::Config("analysis.grid_points must be at least 2".into()));
        }
        if self.images.count == 0 {
            return Err(Error::Config("images.count must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
seed = 7
output_dir = "out"

[dataset]
source = "synthetic"
classes = 10
train_per_class = 4
test_per_class = 2

[model]
preset = "small_net"

[[attacks]]
kind = "fgsm"
epsilon = 0.011764705882352941

[[attacks]]
kind = "bim"
alpha = 0.00392156862745098
epsilon = 0.011764705882352941
iterations = 10

[[attacks]]
kind = "cw"
max_iterations = 200
binary_search_steps = 3
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
        assert_eq!(cfg.train, TrainSection::default());
        assert_eq!(cfg.analysis.metrics, vec![Metric::Euclidean, Metric::Cosine]);
        match &cfg.attacks[0] {
            AttackSpec::Fgsm(f) => assert_eq!(f.epsilon, 3.0 / 255.0),
            other => panic!("{other:?}"),
        }
        match &cfg.attacks[1] {
            AttackSpec::Bim(b) => assert_eq!(b.alpha, 1.0 / 255.0),
            other => panic!("{other:?}"),
        }
        match &cfg.attacks[2] {
            AttackSpec::Cw(c) => {
                assert_eq!((c.max_iterations, c.binary_search_steps), (200, 3));
                assert_eq!(c.learning_rate, 0.005);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            MINIMAL.replace("version = 1", "version = 2"),
            MINIMAL.replace("seed = 7", "seed = 7\nsurprise = 1"),
            MINIMAL.replace("classes = 10", "classes = 3"),
            MINIMAL.replace("\"small_net\"", "\"vgg\""),
            MINIMAL.replace("iterations = 10", "iterations = 0"),
            format!("{MINIMAL}\n[analysis]\ncheckpoints = [9]\n"),
            format!("{MINIMAL}\n[train]\nseed = 3\n"),
        ];
        for text in cases {
            assert!(
                matches!(RunConfig::from_toml(&text, Path::new(".")), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
