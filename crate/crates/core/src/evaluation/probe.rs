//! Post-hoc two-layer classifier trained on frozen embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::accuracy;
use crate::datasets::{batch_indices, majority_share};
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpSpec};
use crate::nn::{Activation, OptimizerConfig, OptimizerState, ParamStore, SeedRng, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of the evaluation rows the probe trains on; the rest are held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("probe.{m}")));
        if self.hidden_width == 0 {
            return bad("hidden_width must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// A trained `d → hidden (relu) → classes` classifier.
#[derive(Clone, Debug)]
pub struct Probe {
    store: ParamStore,
    net: Mlp,
}

impl Probe {
    /// Class probabilities for each row.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(crate::nn::softmax_rows(&self.net.infer(&self.store, x)?))
    }
}

/// Trains a probe on all rows of `embeddings`.
pub fn train_probe(embeddings: &Tensor, z: &[usize], classes: usize, config: &ProbeConfig) -> Result<Probe> {
    config.validate()?;
    if embeddings.rows() != z.len() {
        return Err(Error::dim("train_probe", embeddings.shape(), &[z.len()]));
    }
    let mut distinct = z.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let classes = classes.max(distinct.last().unwrap() + 1);

    let mut rng = SeedRng::stream(config.seed, "probe");
    let spec = MlpSpec::new(embeddings.cols(), &[config.hidden_width], classes, Activation::Linear);
    let mut store = ParamStore::new();
    let net = Mlp::build("probe", &spec, &mut store, &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(config.learning_rate), &store, &ids);
    for _ in 0..config.epochs {
        for idx in batch_indices(z.len(), config.batch_size, &mut rng)? {
            let mut tape = Tape::new();
            let x = tape.constant(embeddings.select_rows(&idx)?);
            let logits = net.forward(&mut tape, &store, x, true)?;
            let probs = tape.softmax_rows(logits);
            let labels: Vec<usize> = idx.iter().map(|&i| z[i]).collect();
            let loss = tape.cross_entropy(probs, &labels)?;
            tape.backward(loss, &mut store)?;
            opt.apply(&mut store, &ids)?;
        }
    }
    Ok(Probe { store, net })
}

/// Per-class shuffled split; each class contributes `round(fraction·count)`
/// rows to the first part. Both parts are returned in ascending order.
pub fn stratified_split(labels: &[usize], fraction: f64, rng: &mut SeedRng) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for mut rows in by_class {
        rows.shuffle(rng);
        let k = (fraction * rows.len() as f64).round() as usize;
        first.extend_from_slice(&rows[..k]);
        second.extend_from_slice(&rows[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

/// Held-out probe accuracy together with the held-out majority share.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub accuracy: f64,
    pub majority_share: f64,
    pub held_out: usize,
}

/// Splits rows by `config.seed`, trains on the training part and scores the rest.
pub fn probe_accuracy(embeddings: &Tensor, z: &[usize], classes: usize, config: &ProbeConfig) -> Result<ProbeOutcome> {
    config.validate()?;
    if embeddings.rows() != z.len() {
        return Err(Error::dim("probe_accuracy", embeddings.shape(), &[z.len()]));
    }
    let (train_idx, test_idx) = stratified_split(z, config.train_fraction, &mut SeedRng::stream(config.seed, "probe-split"));
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Contract(format!(
            "probe split of {} rows leaves an empty part",
            z.len()
        )));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| z[i]).collect::<Vec<_>>();
    let (z_train, z_test) = (pick(&train_idx), pick(&test_idx));
    let probe = train_probe(&embeddings.select_rows(&train_idx)?, &z_train, classes, config)?;
    let probs = probe.predict(&embeddings.select_rows(&test_idx)?)?;
    Ok(ProbeOutcome {
        accuracy: accuracy(&probs, &z_test)?,
        majority_share: majority_share(&z_test, classes),
        held_out: test_idx.len(),
    })
}
