//! JSON run configuration shared by training, evaluation and the CLI.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalTask, Protocol, SnapshotSelection};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::optim::OptimizerConfig;
use crate::tasks::{
    idx::load_mnist_idx_with, imagedir::load_image_dir_with, split_dataset, synth_family, ClMode, Dataset,
    DatasetView, Normalization, SynthSpec, TaskSource,
};

/// Where episodes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    Synthetic(SynthSpec),
    /// An IDX image/label file pair.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        name: Option<String>,
        /// Restrict to these classes (all when absent).
        #[serde(default)]
        classes: Option<Vec<u32>>,
        #[serde(default)]
        normalization: Normalization,
    },
    /// One sub-directory of images per class.
    ImageDir {
        root: PathBuf,
        #[serde(default = "default_image_size")]
        image_size: u32,
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        classes: Option<Vec<u32>>,
        #[serde(default)]
        normalization: Normalization,
    },
}

fn default_image_size() -> u32 {
    28
}

fn resolve(path: &Path, data_root: Option<&Path>) -> PathBuf {
    match data_root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}

impl SourceConfig {
    /// Loads the source. Relative paths are taken relative to `data_root`
    /// when one is given.
    pub fn open(&self, data_root: Option<&Path>) -> Result<Arc<dyn TaskSource>> {
        let view = |ds: Dataset, name: &Option<String>, classes: &Option<Vec<u32>>| -> Result<Arc<dyn TaskSource>> {
            let ds = Arc::new(ds);
            let name = name.clone().unwrap_or_else(|| ds.name().to_string());
            let classes = classes.clone().unwrap_or_else(|| ds.classes());
            Ok(Arc::new(DatasetView::new(name, ds, classes)?))
        };
        match self {
            SourceConfig::Synthetic(spec) => Ok(Arc::new(synth_family(spec.clone())?)),
            SourceConfig::Mnist { images, labels, name, classes, normalization } => {
                let ds = load_mnist_idx_with(&resolve(images, data_root), &resolve(labels, data_root), *normalization)?;
                view(ds, name, classes)
            }
            SourceConfig::ImageDir { root, image_size, name, classes, normalization } => {
                let ds = load_image_dir_with(&resolve(root, data_root), *image_size, *normalization)?;
                view(ds, name, classes)
            }
        }
    }

    /// The underlying labelled dataset (not available for synthetic
    /// families). Class restrictions are not applied.
    pub fn dataset(&self, data_root: Option<&Path>, norm: Option<Normalization>) -> Result<Arc<Dataset>> {
        let ds = match self {
            SourceConfig::Synthetic(spec) => {
                return Err(Error::config(format!("synthetic source {} is not a fixed dataset", spec.name)))
            }
            SourceConfig::Mnist { images, labels, normalization, .. } => load_mnist_idx_with(
                &resolve(images, data_root),
                &resolve(labels, data_root),
                norm.unwrap_or(*normalization),
            )?,
            SourceConfig::ImageDir { root, image_size, normalization, .. } => {
                load_image_dir_with(&resolve(root, data_root), *image_size, norm.unwrap_or(*normalization))?
            }
        };
        Ok(Arc::new(ds))
    }
}

/// Tasks of a meta-test sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalTasksConfig {
    /// One source per task, in presentation order; queries are sampled.
    Sources { sources: Vec<SourceConfig> },
    /// A dataset cut into consecutive groups of `n_way` classes. With a
    /// `test` source every test item of a group is a query of its task, and
    /// the test set is normalised with the training statistics.
    Split {
        train: SourceConfig,
        #[serde(default)]
        test: Option<SourceConfig>,
    },
}

impl EvalTasksConfig {
    pub fn open(&self, protocol: &Protocol, data_root: Option<&Path>) -> Result<Vec<EvalTask>> {
        match self {
            EvalTasksConfig::Sources { sources } => sources
                .iter()
                .map(|s| Ok(EvalTask { demos: s.open(data_root)?, pool: None }))
                .collect(),
            EvalTasksConfig::Split { train, test } => {
                let train_ds = train.dataset(data_root, None)?;
                let split = split_dataset(train_ds.clone(), protocol.n_way, protocol.mode)?;
                let pools: Vec<Option<DatasetView>> = match test {
                    None => vec![None; split.tasks.len()],
                    Some(t) => {
                        let raw = Arc::try_unwrap(t.dataset(data_root, Some(Normalization::None))?)
                            .map_err(|_| Error::config("test dataset is shared"))?;
                        let test_ds = Arc::new(match train_ds.stats() {
                            Some(stats) => raw.normalized_with(stats.clone()),
                            None => raw,
                        });
                        let test_split = split_dataset(test_ds, protocol.n_way, protocol.mode)?;
                        if test_split.tasks.len() != split.tasks.len()
                            || test_split.tasks.iter().zip(&split.tasks).any(|(a, b)| a.classes() != b.classes())
                        {
                            return Err(Error::config("train and test splits have different classes"));
                        }
                        test_split.tasks.into_iter().map(Some).collect()
                    }
                };
                Ok(split
                    .tasks
                    .into_iter()
                    .zip(pools)
                    .map(|(view, pool)| EvalTask { demos: Arc::new(view) as Arc<dyn TaskSource>, pool })
                    .collect())
            }
        }
    }
}

/// Everything `meta-test` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub protocol: Protocol,
    pub tasks: EvalTasksConfig,
    #[serde(default = "one")]
    pub threads: usize,
}

/// Everything `snapshots` needs. The demo stream is the concatenated demos
/// of one sampled sequence over `sources`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotConfig {
    pub checkpoint: PathBuf,
    pub sources: Vec<SourceConfig>,
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default)]
    pub mode: ClMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "SnapshotSelection::first_head")]
    pub selection: SnapshotSelection,
}

/// Parses a JSON config, mapping every failure to a config error.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("invalid {what} config: {e}")))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, what)
}

/// One meta-training domain and the source used to validate on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub train: SourceConfig,
    /// Defaults to `train` with an independent episode stream.
    #[serde(default)]
    pub valid: Option<SourceConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Tasks per continual-learning sequence.
    pub n_tasks: usize,
    #[serde(default)]
    pub mode: ClMode,
    /// Queries sampled per class of each episode.
    #[serde(default = "one")]
    pub queries_per_class: usize,
}

fn one() -> usize {
    1
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.n_tasks == 0 || self.queries_per_class == 0 {
            return Err(Error::config("n_way, k_shot, n_tasks and queries_per_class must be positive"));
        }
        Ok(())
    }

    /// Output width the model needs for this protocol.
    pub fn output_width(&self) -> usize {
        crate::tasks::OutputSpace { mode: self.mode, n_way: self.n_way, n_tasks: self.n_tasks }.width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    /// Validate every this many steps; 0 disables validation.
    #[serde(default)]
    pub every: u64,
    #[serde(default = "ValidationConfig::sequences")]
    pub sequences: usize,
    #[serde(default = "ValidationConfig::seed")]
    pub seed: u64,
}

impl ValidationConfig {
    fn sequences() -> usize {
        32
    }
    fn seed() -> u64 {
        0x5eed
    }
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { every: 0, sequences: Self::sequences(), seed: Self::seed() }
    }
}

/// Everything `meta-train` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub domains: Vec<DomainConfig>,
    pub episodes: EpisodeConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    #[serde(default = "TrainConfig::batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for the batch; 1 is sequential, 0 uses every core.
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default)]
    pub validation: ValidationConfig,
    /// Stop early when the step loss exceeds this (divergence guard).
    #[serde(default)]
    pub max_loss: Option<crate::tensor::Real>,
}

impl TrainConfig {
    fn batch() -> usize {
        16
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = parse_json(text, "training")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.episodes.validate()?;
        self.optimizer.validate()?;
        if self.domains.is_empty() {
            return Err(Error::config("at least one training domain is required"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let width = self.episodes.output_width();
        if self.model.n_outputs != width {
            return Err(Error::config(format!(
                "model.n_outputs is {} but a {:?} protocol with {}-way tasks and {} tasks needs {width}",
                self.model.n_outputs, self.episodes.mode, self.episodes.n_way, self.episodes.n_tasks
            )));
        }
        if self.objective.queries_per_task > self.episodes.n_way * self.episodes.queries_per_class {
            return Err(Error::config("objective.queries_per_task exceeds the queries sampled per episode"));
        }
        Ok(())
    }
}
