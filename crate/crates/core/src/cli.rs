//! Run configuration, output layout and the subcommand bodies behind the binary.
//!
//! A run directory holds `config.resolved`, the `checkpoint` bundle,
//! `trace.log`, `report.toml` and any sweep or projection tables. A `.lock`
//! file guards the directory while a command writes into it.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{
    load_adult, load_german, load_mnist_idx_limit, make_mnist_rot, make_synthetic, read_cache, split, write_cache,
    LabeledDataset, SyntheticConfig, MNIST_ROT_ANGLES,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    beta_sweep, default_beta_grid, evaluate, export_embedding_2d, validate_beta_grid, write_sweep_csv, MetricsReport,
    ProbeConfig, RunInfo, SweepPoint, SweepSetup, Which,
};
use crate::model::{load_checkpoint_with_meta, save_checkpoint, Architecture, CheckpointMeta, UnifAISpec, Variant};
use crate::training::{fit_model, LossWeights, ScheduleConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const TRACE_LOG: &str = "trace.log";
pub const REPORT: &str = "report.toml";
pub const SWEEP_CSV: &str = "sweep.csv";
const LOCK: &str = ".lock";

/// Where the train and test sets come from. Paths are relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Adult {
        train: PathBuf,
        test: PathBuf,
    },
    German {
        path: PathBuf,
        #[serde(default)]
        split_seed: u64,
    },
    Synthetic {
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        generator: SyntheticConfig,
    },
    MnistRot {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_mnist_base")]
        base_size: usize,
        #[serde(default = "default_mnist_test")]
        test_size: usize,
        #[serde(default = "default_angles")]
        angles: Vec<f64>,
    },
    /// Caches previously written by `synth`.
    Cache {
        train: PathBuf,
        test: PathBuf,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_mnist_base() -> usize {
    10_000
}

fn default_mnist_test() -> usize {
    2_000
}

fn default_angles() -> Vec<f64> {
    MNIST_ROT_ANGLES.to_vec()
}

impl DatasetSource {
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetSource::Adult { train, test } | DatasetSource::Cache { train, test } => vec![train, test],
            DatasetSource::German { path, .. } => vec![path],
            DatasetSource::Synthetic { .. } => vec![],
            DatasetSource::MnistRot {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => vec![train_images, train_labels, test_images, test_labels],
        }
    }

    pub fn input_paths(&self) -> Vec<PathBuf> {
        self.clone().paths_mut().into_iter().map(|p| p.clone()).collect()
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSource::Adult { train, test } => load_adult(train, test),
            DatasetSource::German { path, split_seed } => load_german(path, *split_seed),
            DatasetSource::Synthetic {
                test_fraction,
                generator,
            } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::Config("dataset.test_fraction must lie in (0, 1)".into()));
                }
                let all = make_synthetic(generator)?;
                let mut parts = split(&all, &[1.0 - test_fraction, *test_fraction], generator.seed)?;
                let test = parts.pop().unwrap();
                Ok((parts.pop().unwrap(), test))
            }
            DatasetSource::MnistRot {
                train_images,
                train_labels,
                test_images,
                test_labels,
                base_size,
                test_size,
                angles,
            } => {
                let base = load_mnist_idx_limit(train_images, train_labels, Some(*base_size))?;
                let test_base = load_mnist_idx_limit(test_images, test_labels, Some(*test_size))?;
                Ok((make_mnist_rot(&base, angles)?, make_mnist_rot(&test_base, angles)?))
            }
            DatasetSource::Cache { train, test } => Ok((read_cache(train)?, read_cache(test)?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub e1_dim: usize,
    pub e2_dim: usize,
    #[serde(default)]
    pub architecture: Architecture,
}

/// The β sweep holds α and γ at its own values, independent of `[weights]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: default_beta_grid(),
            alpha: 100.0,
            gamma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialize")
    }

    /// Reads a config and makes its relative paths absolute against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path
            .canonicalize()
            .map_err(|e| Error::io(path, e))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        for p in cfg.dataset.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(out) = &mut cfg.out_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        Ok(cfg)
    }

    /// Applies CLI overrides and normalizes the weights.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.weights = self.weights.for_variant(self.model.variant);
        self.weights.validate(self.model.variant)?;
        self.schedule.validate()?;
        self.probe.validate()?;
        validate_beta_grid(&self.sweep.betas)?;
        Ok(self)
    }

    /// SHA-256 of the resolved config without its output directory.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn spec_for(&self, train: &LabeledDataset) -> UnifAISpec {
        UnifAISpec::from_architecture(
            self.model.variant,
            train.dim(),
            self.model.e1_dim,
            self.model.e2_dim,
            train.num_classes,
            train.num_z_classes,
            &self.model.architecture,
        )
    }

    fn check_inputs(&self) -> Result<()> {
        for p in self.dataset.input_paths() {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input file missing"),
                ));
            }
        }
        Ok(())
    }

    /// `--out` wins over the configured `out_dir`.
    pub fn output_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the train and test sets as caches in `out`; returns both manifest paths.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    cfg.check_inputs()?;
    let _lock = RunLock::acquire(out)?;
    let (train, test) = cfg.dataset.load()?;
    Ok((write_cache(&train, &out.join("train"))?, write_cache(&test, &out.join("test"))?))
}

/// Trains, checkpoints, logs the trace and evaluates on the test split.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    cfg.check_inputs()?;
    let _lock = RunLock::acquire(out)?;
    let fingerprint = cfg.fingerprint();
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;

    let (train, test) = cfg.dataset.load()?;
    let spec = cfg.spec_for(&train);
    let (model, trace) = fit_model(spec, &train, &cfg.weights, &cfg.schedule, cfg.seed)?;
    let meta = CheckpointMeta {
        fingerprint: fingerprint.clone(),
        seed: cfg.seed,
        weights: cfg.weights,
    };
    save_checkpoint(&model, &out.join(CHECKPOINT_STEM), Some(&meta))?;
    trace.write_jsonl(&out.join(TRACE_LOG))?;

    let info = RunInfo {
        seed: cfg.seed,
        weights: cfg.weights,
        fingerprint,
    };
    let report = evaluate(&model, &test, &cfg.probe, &info)?;
    write_text(&out.join(REPORT), &report.to_toml())?;
    Ok(report)
}

/// Dataset for `eval`/`project`: an explicit cache, else the config's test split.
pub fn resolve_eval_dataset(dataset: Option<&Path>, cfg: Option<&RunConfig>) -> Result<LabeledDataset> {
    match (dataset, cfg) {
        (Some(p), _) => read_cache(p),
        (None, Some(c)) => {
            c.check_inputs()?;
            Ok(c.dataset.load()?.1)
        }
        (None, None) => Err(Error::Config("pass --dataset or --config to choose evaluation data".into())),
    }
}

pub fn cmd_eval(checkpoint: &Path, dataset: &LabeledDataset, probe: &ProbeConfig, out: &Path) -> Result<MetricsReport> {
    let (model, meta) = load_checkpoint_with_meta(checkpoint)?;
    let _lock = RunLock::acquire(out)?;
    let info = match meta {
        Some(m) => RunInfo {
            seed: m.seed,
            weights: m.weights,
            fingerprint: m.fingerprint,
        },
        None => RunInfo {
            seed: 0,
            weights: LossWeights::default().for_variant(model.variant()),
            fingerprint: String::new(),
        },
    };
    let report = evaluate(&model, dataset, probe, &info)?;
    write_text(&out.join(REPORT), &report.to_toml())?;
    Ok(report)
}

/// Parses `--beta-grid 1e-6,1e-4,1`.
pub fn parse_beta_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("beta grid entry `{}` is not a number", t.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_beta_grid(&grid)?;
    Ok(grid)
}

pub fn cmd_sweep(cfg: &RunConfig, betas: &[f64], out: &Path) -> Result<Vec<SweepPoint>> {
    validate_beta_grid(betas)?;
    cfg.check_inputs()?;
    let _lock = RunLock::acquire(out)?;
    write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    let (train, test) = cfg.dataset.load()?;
    let setup = SweepSetup {
        spec: cfg.spec_for(&train),
        train: &train,
        test: &test,
        weights: LossWeights {
            alpha: cfg.sweep.alpha,
            gamma: cfg.sweep.gamma,
            ..cfg.weights
        },
        schedule: cfg.schedule.clone(),
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(),
    };
    let points = beta_sweep(&setup, betas)?;
    write_sweep_csv(&points, &out.join(SWEEP_CSV))?;
    Ok(points)
}

pub fn cmd_project(checkpoint: &Path, dataset: &LabeledDataset, which: Which, out: &Path) -> Result<PathBuf> {
    let (model, _) = load_checkpoint_with_meta(checkpoint)?;
    let _lock = RunLock::acquire(out)?;
    let emb = export_embedding_2d(&model, dataset, which)?;
    let path = out.join(format!("embedding_{which}.csv"));
    emb.write_csv(&path)?;
    Ok(path)
}
