//! Labeled datasets: loaders for the tabular and image sources, augmentation,
//! a seeded synthetic generator, splitting and batching, and an on-disk cache.

pub mod cache;
pub mod mnist;
pub mod synthetic;
pub mod uci;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{SeedRng, Tensor};

pub use cache::{cache_stem, read_cache, write_cache};
pub use mnist::{load_mnist_idx, load_mnist_idx_limit, make_mnist_dil, make_mnist_rot, MNIST_ROT_ANGLES};
pub use synthetic::{make_synthetic, SyntheticConfig};
pub use uci::{
    adult_ages, choose_age_threshold, load_adult, load_german, ADULT_AGE_THRESHOLD, GERMAN_TEST_ROWS,
    GERMAN_TRAIN_ROWS,
};

/// Preprocessing applied to one source column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnMeta {
    /// Standardized as `(v - mean) / scale`, one output column.
    Continuous { name: String, mean: f64, scale: f64 },
    /// One output column per category, in the listed order.
    OneHot { name: String, categories: Vec<String> },
}

impl ColumnMeta {
    pub fn width(&self) -> usize {
        match self {
            ColumnMeta::Continuous { .. } => 1,
            ColumnMeta::OneHot { categories, .. } => categories.len(),
        }
    }
}

/// Everything needed to reproduce or reapply a dataset's preprocessing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<ColumnMeta>,
    /// `(height, width)` for image data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dims: Option<(usize, usize)>,
    /// SHA-256 of each input file, keyed by file name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub source_hashes: BTreeMap<String, String>,
    /// Free-form preprocessing facts (thresholds, counts of unseen categories).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub y: Vec<usize>,
    pub z: Option<Vec<usize>>,
    pub num_classes: usize,
    /// Zero when `z` is absent.
    pub num_z_classes: usize,
    pub meta: DatasetMeta,
}

/// Rows of a dataset gathered for one update.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub z: Option<Vec<usize>>,
}

impl LabeledDataset {
    /// Checks the cross-field invariants.
    pub fn new(
        features: Tensor,
        y: Vec<usize>,
        z: Option<Vec<usize>>,
        num_classes: usize,
        num_z_classes: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != y.len() {
            return Err(Error::dim("dataset", features.shape(), &[y.len()]));
        }
        check_labels("y", &y, num_classes)?;
        match &z {
            Some(z) => {
                if z.len() != y.len() {
                    return Err(Error::dim("dataset z", &[z.len()], &[y.len()]));
                }
                check_labels("z", z, num_z_classes)?;
            }
            None if num_z_classes != 0 => {
                return Err(Error::Contract(
                    "num_z_classes must be 0 when z is absent".into(),
                ))
            }
            None => {}
        }
        Ok(Self {
            features,
            y,
            z,
            num_classes,
            num_z_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.features.select_rows(indices)?,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            z: self
                .z
                .as_ref()
                .map(|z| indices.iter().map(|&i| z[i]).collect()),
        })
    }

    /// Dataset restricted to `indices`, in that order; metadata is kept.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        Ok(Self {
            features: b.x,
            y: b.y,
            z: b.z,
            num_classes: self.num_classes,
            num_z_classes: self.num_z_classes,
            meta: self.meta.clone(),
        })
    }

    /// Deterministic shuffled minibatches covering every row once.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        let mut rng = SeedRng::stream(seed, "batches");
        batch_indices(self.len(), batch_size, &mut rng)?
            .iter()
            .map(|idx| self.batch(idx))
            .collect()
    }

    /// Frequency of the most common z class, if z is present.
    pub fn z_majority_share(&self) -> Option<f64> {
        self.z
            .as_ref()
            .map(|z| majority_share(z, self.num_z_classes.max(1)))
    }
}

fn check_labels(what: &'static str, labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&bad) => Err(Error::Index {
            what,
            index: bad,
            len: classes,
        }),
        None => Ok(()),
    }
}

/// Frequency of the most common label among `classes` classes.
pub fn majority_share(labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; classes.max(1 + labels.iter().copied().max().unwrap_or(0))];
    for &l in labels {
        counts[l] += 1;
    }
    *counts.iter().max().unwrap() as f64 / labels.len() as f64
}

/// Shuffled row indices chunked into batches; all full except possibly the last.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut SeedRng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Seeded disjoint partition. Part `i` takes `floor(f_i * n)` rows, the last part
/// takes the remainder; rows within a part keep their original order.
pub fn split(dataset: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty()
        || fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
        || (total - 1.0).abs() > 1e-9
    {
        return Err(Error::Parameter(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedRng::stream(seed, "split"));
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (start + (f * n as f64).floor() as usize).min(n)
        };
        let mut idx = order[start..end].to_vec();
        idx.sort_unstable();
        parts.push(idx);
        start = end;
    }
    parts
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                Err(Error::Parameter(format!(
                    "split fractions {fractions:?} leave an empty part for n={n}"
                )))
            } else {
                dataset.subset(idx)
            }
        })
        .collect()
}
