//! The experiment file: one TOML document describing a dataset, a federation
//! shape, and (optionally) grid axes for sweeps.
//!
//! ```toml
//! out_dir = "runs/demo"
//!
//! [dataset.blobs]
//! num_classes = 10
//! per_class = 100
//! test_per_class = 20
//! input_dim = 16
//!
//! [federation]
//! num_clients = 10
//! rounds = 30
//! master_seed = 42
//!
//! [algo]
//! kind = "fedavg"
//! epochs_per_round = 1
//! batch_size = 32          # or "full"
//!
//! [model]
//! kind = "softmax_regression"
//!
//! [optimizer]
//! kind = "sgd"
//! lr = 0.1
//!
//! [partition]
//! kind = "dirichlet_labels_skew"
//! beta = 0.5
//! seed = 7
//! ```
//!
//! Unknown keys are rejected everywhere, and parsing → serializing →
//! parsing yields an identical config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use fedbench::algo::{AlgorithmConfig, AlgorithmKind, BatchSize};
use fedbench::data::{self, Dataset};
use fedbench::model::{ModelKind, ModelSpec, OptimizerKind};
use fedbench::netlink::NetOptions;
use fedbench::orchestrator::{FederationConfig, OptimizerConfig};
use fedbench::partition::{PartitionKind, PartitionSpec};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where outputs land; resolved relative to the config file's directory.
    /// `--out` (resolved relative to the working directory) overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Standardize features to zero mean / unit variance, fitted on the
    /// training split only.
    #[serde(default)]
    pub normalize: bool,
    pub dataset: DatasetConfig,
    pub federation: FederationSection,
    pub algo: AlgoSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    /// Required whenever `federation.num_clients > 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<NetSection>,
    /// Sweep axes, used only by the `grid` subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
}

/// Where the samples come from. Exactly one source, written as a nested
/// table: `[dataset.blobs]`, `[dataset.mnist]`, `[dataset.cifar10]`, or
/// `[dataset.csv]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    Blobs(BlobsConfig),
    Mnist(MnistConfig),
    Cifar10(Cifar10Config),
    Csv(CsvConfig),
}

/// Synthetic Gaussian class blobs; the test split is an independent draw
/// around the same class centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_spread() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cifar10Config {
    pub train_batches: Vec<PathBuf>,
    pub test_batch: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub label_column: String,
}

impl DatasetConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::Blobs(_) => "blobs",
            DatasetConfig::Mnist(_) => "mnist",
            DatasetConfig::Cifar10(_) => "cifar10",
            DatasetConfig::Csv(_) => "csv",
        }
    }

    /// Loads (train, test). Relative paths resolve against `base`, the
    /// config file's directory, so configs stay relocatable.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset), Failure> {
        let err = |e: fedbench::Error| Failure::Config(e.to_string());
        match self {
            DatasetConfig::Blobs(b) => {
                let train =
                    data::synthetic_blobs(b.num_classes, b.per_class, b.input_dim, b.spread, b.seed)
                        .map_err(err)?;
                // flip the seed so the held-out draw never repeats training noise
                let test = data::synthetic_blobs(
                    b.num_classes,
                    b.test_per_class,
                    b.input_dim,
                    b.spread,
                    b.seed ^ 0x7465_7374,
                )
                .map_err(err)?;
                Ok((train, test))
            }
            DatasetConfig::Mnist(m) => {
                let train =
                    data::load_mnist_idx(&resolve(base, &m.train_images), &resolve(base, &m.train_labels))
                        .map_err(err)?;
                let test =
                    data::load_mnist_idx(&resolve(base, &m.test_images), &resolve(base, &m.test_labels))
                        .map_err(err)?;
                Ok((train, test))
            }
            DatasetConfig::Cifar10(c) => {
                if c.train_batches.is_empty() {
                    return Err(Failure::config("cifar10 needs at least one training batch file"));
                }
                let train_paths: Vec<PathBuf> =
                    c.train_batches.iter().map(|p| resolve(base, p)).collect();
                let train_refs: Vec<&Path> = train_paths.iter().map(PathBuf::as_path).collect();
                let train = data::load_cifar10_binary(&train_refs).map_err(err)?;
                let test_path = resolve(base, &c.test_batch);
                let test = data::load_cifar10_binary(&[test_path.as_path()]).map_err(err)?;
                Ok((train, test))
            }
            DatasetConfig::Csv(c) => {
                let train = data::load_csv(&resolve(base, &c.train), &c.label_column).map_err(err)?;
                let mut test = data::load_csv(&resolve(base, &c.test), &c.label_column).map_err(err)?;
                if test.num_classes > train.num_classes {
                    return Err(Failure::config(
                        "the test split contains label ids never seen in training",
                    ));
                }
                // the model sizes its output layer from the training split
                test.num_classes = train.num_classes;
                Ok((train, test))
            }
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub num_clients: usize,
    pub rounds: usize,
    pub master_seed: u64,
    /// Evaluate every this-many rounds (the final round always evaluates).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub reset_optimizer_per_round: bool,
    /// Apply the wire protocol's f32 rounding to in-process runs too, so
    /// `run` and `run --net` produce identical numbers.
    #[serde(default)]
    pub quantize_broadcast: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoSection {
    pub kind: AlgorithmKind,
    pub epochs_per_round: usize,
    pub batch_size: BatchSizeConfig,
    /// Penalty weight; ignored by fedavg.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// A positive sample count, or the string `"full"` for whole-shard batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSizeConfig {
    Count(usize),
    Word(String),
}

impl BatchSizeConfig {
    pub fn to_batch_size(&self) -> Result<BatchSize, Failure> {
        match self {
            BatchSizeConfig::Count(n) if *n >= 1 => Ok(BatchSize::Fixed(*n)),
            BatchSizeConfig::Count(_) => Err(Failure::config("batch_size must be >= 1")),
            BatchSizeConfig::Word(w) if w == "full" => Ok(BatchSize::Full),
            BatchSizeConfig::Word(w) => Err(Failure::config(format!(
                "batch_size must be a positive integer or \"full\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
}

impl ModelSection {
    /// Input and output widths come from the loaded training split, not the
    /// config, so the same file works across datasets.
    pub fn to_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec, Failure> {
        let mut spec = match self.kind {
            ModelKind::SoftmaxRegression => {
                if self.hidden_dim.is_some() {
                    return Err(Failure::config(
                        "hidden_dim is only meaningful for the mlp_one_hidden model",
                    ));
                }
                ModelSpec::softmax_regression(input_dim, num_classes)
            }
            ModelKind::MlpOneHidden => {
                let hidden = self
                    .hidden_dim
                    .ok_or_else(|| Failure::config("the mlp_one_hidden model requires hidden_dim"))?;
                ModelSpec::mlp_one_hidden(input_dim, hidden, num_classes)
            }
        };
        if let Some(s) = self.init_scale {
            spec.init_scale = s;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub kind: PartitionKind,
    pub seed: u64,
    /// Power-law exponent (quantity_skew).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Dirichlet concentration (dirichlet_labels_skew).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Distinct labels per client (labels_quantity_skew).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes_per_client: Option<usize>,
    /// Sorted shards per client (pathological_labels_skew).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shards_per_client: Option<usize>,
}

impl PartitionSection {
    pub fn to_spec(&self, num_clients: usize) -> PartitionSpec {
        let mut spec = PartitionSpec::new(self.kind, num_clients, self.seed);
        if let Some(v) = self.alpha {
            spec.alpha = v;
        }
        if let Some(v) = self.beta {
            spec.beta = v;
        }
        if let Some(v) = self.classes_per_client {
            spec.classes_per_client = v;
        }
        if let Some(v) = self.shards_per_client {
            spec.shards_per_client = v;
        }
        spec
    }
}

/// Timeouts and retry behavior for the TCP mode; every field is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connect_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_backoff_ms: Option<u64>,
}

/// Cartesian sweep axes: every (algo, skew, rounds, epochs) combination
/// becomes one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub algos: Vec<AlgorithmKind>,
    pub skews: Vec<PartitionKind>,
    pub rounds: Vec<usize>,
    pub epochs: Vec<usize>,
    /// Penalty weight for the fedcurv cells; falls back to `algo.lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::Config(format!("config parse: {e}")))
    }

    /// Reads and parses a config file; also returns the directory relative
    /// paths resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("read {}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Ok((cfg, base))
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string_pretty(self).map_err(|e| Failure::Config(format!("config serialize: {e}")))
    }

    pub fn load_dataset(&self, base: &Path) -> Result<(Dataset, Dataset), Failure> {
        let (mut train, mut test) = self.dataset.load(base)?;
        if self.normalize {
            let err = |e: fedbench::Error| Failure::Config(e.to_string());
            let stats = data::fit_normalization(&train).map_err(err)?;
            train = data::apply_normalization(&train, &stats).map_err(err)?;
            test = data::apply_normalization(&test, &stats).map_err(err)?;
        }
        Ok((train, test))
    }

    /// Assembles the engine configuration against a loaded training split.
    pub fn build_federation(&self, train: &Dataset) -> Result<FederationConfig, Failure> {
        let f = &self.federation;
        if f.num_clients > 1 && self.partition.is_none() {
            return Err(Failure::config(
                "a federation with more than one client needs a [partition] section",
            ));
        }
        let partition = match &self.partition {
            Some(p) => p.to_spec(f.num_clients),
            None => PartitionSpec::new(PartitionKind::Uniform, f.num_clients, f.master_seed),
        };
        let cfg = FederationConfig {
            num_clients: f.num_clients,
            rounds: f.rounds,
            algo: AlgorithmConfig {
                kind: self.algo.kind,
                epochs_per_round: self.algo.epochs_per_round,
                batch_size: self.algo.batch_size.to_batch_size()?,
                lambda: self.algo.lambda.unwrap_or(0.0),
            },
            model: self.model.to_spec(train.input_dim(), train.num_classes)?,
            optimizer: OptimizerConfig {
                kind: self.optimizer.kind,
                lr: self.optimizer.lr,
            },
            partition,
            master_seed: f.master_seed,
            eval_every: f.eval_every.unwrap_or(1),
            workers: f.workers.unwrap_or(1),
            reset_optimizer_per_round: f.reset_optimizer_per_round,
            quantize_broadcast: f.quantize_broadcast,
        };
        cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn net_options(&self) -> NetOptions {
        let mut opts = NetOptions::default();
        if let Some(n) = &self.net {
            if let Some(s) = n.round_timeout_secs {
                opts.round_timeout = Duration::from_secs(s);
            }
            if let Some(s) = n.join_timeout_secs {
                opts.join_timeout = Duration::from_secs(s);
            }
            if let Some(r) = n.connect_retries {
                opts.connect_retries = r;
            }
            if let Some(ms) = n.retry_backoff_ms {
                opts.retry_backoff = Duration::from_millis(ms);
            }
        }
        opts
    }

    /// The directory outputs land in: `--out` beats the config's `out_dir`.
    pub fn resolve_out_dir(&self, base: &Path, cli_out: Option<&Path>) -> Result<PathBuf, Failure> {
        if let Some(out) = cli_out {
            return Ok(out.to_path_buf());
        }
        match &self.out_dir {
            Some(dir) => Ok(resolve(base, dir)),
            None => Err(Failure::config(
                "no output directory: set out_dir in the config or pass --out",
            )),
        }
    }
}
