//! Measurement protocol: prediction accuracy `A_y`, probe accuracy `A_z` on
//! frozen embeddings, the β sweep and 2D embedding export.

mod pca;
mod probe;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{UnifAIModel, UnifAISpec, Variant};
use crate::nn::Tensor;
use crate::training::{fit_model, LossWeights, ScheduleConfig};

pub use pca::{pca_2d, Pca2};
pub use probe::{probe_accuracy, stratified_split, train_probe, Probe, ProbeConfig, ProbeOutcome};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() {
        return Err(Error::dim("accuracy", probs.shape(), &[labels.len()]));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(probs.row(i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Accuracy restricted to each class present in `labels`, keyed by class index.
pub fn per_class_accuracy(probs: &Tensor, labels: &[usize]) -> Result<BTreeMap<String, f64>> {
    if probs.rows() != labels.len() {
        return Err(Error::dim("per_class_accuracy", probs.shape(), &[labels.len()]));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let e = tally.entry(l).or_default();
        e.1 += 1;
        if argmax(probs.row(i)) == l {
            e.0 += 1;
        }
    }
    Ok(tally
        .into_iter()
        .map(|(c, (hit, n))| (c.to_string(), hit as f64 / n as f64))
        .collect())
}

/// Provenance copied into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    pub weights: LossWeights,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub a_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_z_e1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_z_e2: Option<f64>,
    /// Majority z share on the rows the probes are scored on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_majority_share: Option<f64>,
    pub variant: Variant,
    pub seed: u64,
    pub fingerprint: String,
    pub n_eval: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_probe_held_out: Option<usize>,
    pub weights: LossWeights,
    pub probe: ProbeConfig,
    pub a_y_per_class: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metrics serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad report: {e}")))
    }
}

/// `A_y` from the model's predictions; `A_z` from fresh probes on `e1` and `e2`
/// when the dataset carries z. The model is only read.
pub fn evaluate(
    model: &UnifAIModel,
    test: &LabeledDataset,
    probe: &ProbeConfig,
    info: &RunInfo,
) -> Result<MetricsReport> {
    if test.dim() != model.spec().input_dim {
        return Err(Error::dim(
            "evaluate: dataset width vs model input",
            &[test.dim()],
            &[model.spec().input_dim],
        ));
    }
    probe.validate()?;
    let probs = model.predict(&test.features)?;
    let mut report = MetricsReport {
        a_y: accuracy(&probs, &test.y)?,
        a_z_e1: None,
        a_z_e2: None,
        z_majority_share: None,
        variant: model.variant(),
        seed: info.seed,
        fingerprint: info.fingerprint.clone(),
        n_eval: test.len(),
        n_probe_held_out: None,
        weights: info.weights,
        probe: probe.clone(),
        a_y_per_class: per_class_accuracy(&probs, &test.y)?,
    };
    if let Some(z) = &test.z {
        let (e1, e2) = model.encode(&test.features)?;
        let r1 = probe_accuracy(&e1, z, test.num_z_classes, probe)?;
        let r2 = probe_accuracy(&e2, z, test.num_z_classes, probe)?;
        report.a_z_e1 = Some(r1.accuracy);
        report.a_z_e2 = Some(r2.accuracy);
        report.z_majority_share = Some(r1.majority_share);
        report.n_probe_held_out = Some(r1.held_out);
    }
    Ok(report)
}

/// Everything a β sweep holds fixed.
#[derive(Clone, Debug)]
pub struct SweepSetup<'a> {
    pub spec: UnifAISpec,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub a_y: f64,
    pub seed: u64,
    pub fingerprint: String,
}

/// Strictly increasing, positive, finite grid.
pub fn validate_beta_grid(betas: &[f64]) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::Config("beta grid is empty".into()));
    }
    if betas.iter().any(|b| !b.is_finite() || *b <= 0.0) {
        return Err(Error::Config(format!("beta values must be positive and finite: {betas:?}")));
    }
    if betas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("beta grid must be strictly increasing: {betas:?}")));
    }
    Ok(())
}

/// The logarithmic default grid `1e-6, 1e-5, …, 1`.
pub fn default_beta_grid() -> Vec<f64> {
    (0..=6).map(|i| 10f64.powi(i - 6)).collect()
}

/// Trains one model per β with the shared seed and records `A_y` on the test set.
pub fn beta_sweep(setup: &SweepSetup<'_>, betas: &[f64]) -> Result<Vec<SweepPoint>> {
    validate_beta_grid(betas)?;
    betas
        .iter()
        .map(|&beta| {
            let weights = LossWeights { beta, ..setup.weights };
            let (model, _) = fit_model(setup.spec.clone(), setup.train, &weights, &setup.schedule, setup.seed)?;
            let probs = model.predict(&setup.test.features)?;
            Ok(SweepPoint {
                beta,
                a_y: accuracy(&probs, &setup.test.y)?,
                seed: setup.seed,
                fingerprint: setup.fingerprint.clone(),
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    E1,
    E2,
}

impl FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e1" => Ok(Which::E1),
            "e2" => Ok(Which::E2),
            other => Err(Error::Config(format!("`which` must be e1 or e2, got `{other}`"))),
        }
    }
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::E1 => "e1",
            Which::E2 => "e2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2d {
    pub which: Which,
    pub pca: Pca2,
    pub y: Vec<usize>,
    pub z: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct EmbeddingRow {
    pc1: f64,
    pc2: f64,
    y: usize,
    z: Option<usize>,
}

impl Embedding2d {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for i in 0..self.y.len() {
            let r = self.pca.projected.row(i);
            w.serialize(EmbeddingRow {
                pc1: r[0],
                pc2: r[1],
                y: self.y[i],
                z: self.z.as_ref().map(|z| z[i]),
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Projects `e1` or `e2` of every row onto its top two principal directions.
pub fn export_embedding_2d(model: &UnifAIModel, dataset: &LabeledDataset, which: Which) -> Result<Embedding2d> {
    let (e1, e2) = model.encode(&dataset.features)?;
    let pca = pca_2d(match which {
        Which::E1 => &e1,
        Which::E2 => &e2,
    })?;
    Ok(Embedding2d {
        which,
        pca,
        y: dataset.y.clone(),
        z: dataset.z.clone(),
    })
}
