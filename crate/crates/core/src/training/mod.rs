//! Scheduled two-player training.
//!
//! Every M1 update (encoder, predictor, decoder) is preceded by `k` M2 updates
//! (disentanglers and z-discriminator), each on its own minibatch. During an M2
//! update the encoder is evaluated frozen and the adversaries learn to recover
//! the true `e1`, `e2` and `z`; during an M1 update the adversaries are frozen
//! and their targets are replaced by fresh uniform noise and randomly drawn z.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{batch_indices, Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Player, UnifAIModel, UnifAISpec, Variant};
use crate::nn::{OptimizerConfig, OptimizerState, SeedRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 1e-2,
            gamma: 1.0,
            delta: 0.0,
        }
    }
}

impl LossWeights {
    /// Checks finiteness, signs, and that every nonzero weight has the
    /// components it scales.
    pub fn validate(&self, variant: Variant) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Parameter(format!(
                    "weights.{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        let needs = |name: &str, w: f64, ok: bool| {
            if w > 0.0 && !ok {
                Err(Error::Parameter(format!(
                    "weights.{name} > 0 is not supported by variant {variant}"
                )))
            } else {
                Ok(())
            }
        };
        needs("beta", self.beta, variant.has_decoder())?;
        needs("gamma", self.gamma, variant.has_disentanglers())?;
        needs("delta", self.delta, variant.has_dz())
    }

    /// Weights restricted to the terms `variant` has: B0 keeps only alpha,
    /// B1 drops gamma and delta, NoDz drops delta.
    pub fn for_variant(&self, variant: Variant) -> Self {
        Self {
            alpha: self.alpha,
            beta: if variant.has_decoder() { self.beta } else { 0.0 },
            gamma: if variant.has_disentanglers() { self.gamma } else { 0.0 },
            delta: if variant.has_dz() { self.delta } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// M2 updates per M1 update.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub m1_optimizer: OptimizerConfig,
    pub m2_optimizer: OptimizerConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            k: 5,
            epochs: 10,
            batch_size: 128,
            m1_optimizer: OptimizerConfig::default(),
            m2_optimizer: OptimizerConfig::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("schedule.k must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be >= 1".into()));
        }
        self.m1_optimizer.validate()?;
        self.m2_optimizer.validate()
    }
}

/// Categorical distribution of z estimated from training labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalZDistribution {
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
}

impl EmpiricalZDistribution {
    pub fn from_labels(z: &[usize], classes: usize) -> Result<Self> {
        if z.is_empty() || classes == 0 {
            return Err(Error::Contract("cannot estimate a z distribution from no labels".into()));
        }
        let mut counts = vec![0; classes];
        for &v in z {
            *counts.get_mut(v).ok_or(Error::Index {
                what: "z labels",
                index: v,
                len: classes,
            })? += 1;
        }
        let n = z.len() as f64;
        let probs = counts.iter().map(|&c| c as f64 / n).collect();
        Ok(Self { counts, probs })
    }
}

/// I.i.d. uniform samples on `[-1, 1]`.
pub fn sample_uniform_targets(rows: usize, cols: usize, rng: &mut SeedRng) -> Result<Tensor> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..=1.0)).collect(),
    )
}

/// Labels drawn i.i.d. from `dist` by inverse-CDF sampling.
pub fn sample_random_z(dist: &EmpiricalZDistribution, batch: usize, rng: &mut SeedRng) -> Result<Vec<usize>> {
    if dist.probs.is_empty() || dist.counts.iter().all(|&c| c == 0) {
        return Err(Error::Contract("empty z distribution".into()));
    }
    let last = dist.probs.iter().rposition(|&p| p > 0.0).unwrap();
    Ok((0..batch)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in dist.probs.iter().enumerate() {
                acc += p;
                if u < acc && *p > 0.0 {
                    return i;
                }
            }
            last
        })
        .collect())
}

/// Unweighted loss terms of one update; `None` for terms not computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dis1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dis2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

impl LossComponents {
    /// `α·pred + β·dec + γ·(dis1 + dis2) + δ·z`, absent terms counting as 0.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let v = |o: Option<f64>| o.unwrap_or(0.0);
        w.alpha * v(self.pred) + w.beta * v(self.dec) + w.gamma * (v(self.dis1) + v(self.dis2)) + w.delta * v(self.z)
    }
}

/// A recorded loss graph ready for backpropagation.
pub struct PhaseLoss {
    pub tape: Tape,
    pub loss: Var,
    pub total: f64,
    pub components: LossComponents,
}

/// Accumulates weighted scalar terms on a tape.
struct Terms {
    total: Option<Var>,
}

impl Terms {
    fn add(&mut self, tape: &mut Tape, term: Var, weight: f64) -> Result<()> {
        let scaled = tape.scale(term, weight);
        self.total = Some(match self.total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
        Ok(())
    }

    fn finish(self, tape: &mut Tape) -> Var {
        self.total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
    }
}

fn finish(mut tape: Tape, terms: Terms, components: LossComponents) -> PhaseLoss {
    let loss = terms.finish(&mut tape);
    let total = tape.scalar(loss);
    PhaseLoss {
        tape,
        loss,
        total,
        components,
    }
}

/// Adversary loss with the encoder frozen: `γ·[mse(Dis1(e1), e2) +
/// mse(Dis2(e2), e1)] + δ·CE(Dz(e1), z)`. Terms with zero weight are skipped.
pub fn m2_loss(model: &UnifAIModel, batch: &Batch, weights: &LossWeights) -> Result<PhaseLoss> {
    if !model.variant().is_adversarial() {
        return Err(Error::UnsupportedVariant {
            op: "m2_loss",
            variant: model.variant().to_string(),
        });
    }
    let mut tape = Tape::new();
    let mut terms = Terms { total: None };
    let mut c = LossComponents::default();
    let x = tape.constant(batch.x.clone());
    let (e1, e2) = model.encode_on(&mut tape, x, false)?;
    if weights.gamma > 0.0 {
        let e2_hat = model.dis1_on(&mut tape, e1, true)?;
        let l1 = tape.mse(e2_hat, e2)?;
        let e1_hat = model.dis2_on(&mut tape, e2, true)?;
        let l2 = tape.mse(e1_hat, e1)?;
        c.dis1 = Some(tape.scalar(l1));
        c.dis2 = Some(tape.scalar(l2));
        let pair = tape.add(l1, l2)?;
        terms.add(&mut tape, pair, weights.gamma)?;
    }
    if weights.delta > 0.0 {
        let z = batch
            .z
            .as_ref()
            .ok_or_else(|| Error::Contract("weights.delta > 0 requires z labels".into()))?;
        let probs = model
            .dz_on(&mut tape, e1, true)?
            .ok_or_else(|| Error::Contract("weights.delta > 0 requires a z-discriminator".into()))?;
        let lz = tape.cross_entropy(probs, z)?;
        c.z = Some(tape.scalar(lz));
        terms.add(&mut tape, lz, weights.delta)?;
    }
    Ok(finish(tape, terms, c))
}

/// Main-player loss with the adversaries frozen: `α·CE(Pred(e1), y) +
/// β·mse(Dec(ψ(e1), e2), x) + γ·[mse(Dis1(e1), r2) + mse(Dis2(e2), r1)] +
/// δ·CE(Dz(e1), z_random)`, with `r1`, `r2` fresh uniform noise and
/// `z_random` drawn from `z_dist`. Terms with zero weight are skipped.
pub fn m1_loss(
    model: &UnifAIModel,
    batch: &Batch,
    weights: &LossWeights,
    z_dist: Option<&EmpiricalZDistribution>,
    rng: &mut SeedRng,
) -> Result<PhaseLoss> {
    let mut tape = Tape::new();
    let mut terms = Terms { total: None };
    let mut c = LossComponents::default();
    let x_const = batch.x.clone();
    let x = tape.constant(x_const);
    let (e1, e2) = model.encode_on(&mut tape, x, true)?;
    if weights.alpha > 0.0 {
        let probs = model.predict_on(&mut tape, e1, true)?;
        let lp = tape.cross_entropy(probs, &batch.y)?;
        c.pred = Some(tape.scalar(lp));
        terms.add(&mut tape, lp, weights.alpha)?;
    }
    if weights.beta > 0.0 {
        let x_hat = model.decode_on(&mut tape, e1, e2, rng, true, true)?;
        let ld = tape.mse(x_hat, x)?;
        c.dec = Some(tape.scalar(ld));
        terms.add(&mut tape, ld, weights.beta)?;
    }
    if weights.gamma > 0.0 {
        let n = batch.x.rows();
        let r2 = tape.constant(sample_uniform_targets(n, model.spec().e2_dim, rng)?);
        let r1 = tape.constant(sample_uniform_targets(n, model.spec().e1_dim, rng)?);
        let e2_hat = model.dis1_on(&mut tape, e1, false)?;
        let l1 = tape.mse(e2_hat, r2)?;
        let e1_hat = model.dis2_on(&mut tape, e2, false)?;
        let l2 = tape.mse(e1_hat, r1)?;
        c.dis1 = Some(tape.scalar(l1));
        c.dis2 = Some(tape.scalar(l2));
        let pair = tape.add(l1, l2)?;
        terms.add(&mut tape, pair, weights.gamma)?;
    }
    if weights.delta > 0.0 {
        let dist = z_dist
            .ok_or_else(|| Error::Contract("weights.delta > 0 requires a z distribution".into()))?;
        let z_random = sample_random_z(dist, batch.x.rows(), rng)?;
        let probs = model
            .dz_on(&mut tape, e1, false)?
            .ok_or_else(|| Error::Contract("weights.delta > 0 requires a z-discriminator".into()))?;
        let lz = tape.cross_entropy(probs, &z_random)?;
        c.z = Some(tape.scalar(lz));
        terms.add(&mut tape, lz, weights.delta)?;
    }
    Ok(finish(tape, terms, c))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    M1,
    M2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Update index within its phase, counted over the whole run.
    pub step: usize,
    #[serde(flatten)]
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn count(&self, phase: Phase) -> usize {
        self.records.iter().filter(|r| r.phase == phase).count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

fn check_finite(phase: Phase, epoch: usize, step: usize, loss: &PhaseLoss) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!(
            "{phase:?} loss is {} at epoch {epoch}, step {step}",
            loss.total
        )))
    }
}

/// Cycles through shuffled minibatches, reshuffling after each pass.
struct BatchStream {
    n: usize,
    batch_size: usize,
    rng: SeedRng,
    queue: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    fn new(n: usize, batch_size: usize, rng: SeedRng) -> Self {
        Self {
            n,
            batch_size,
            rng,
            queue: Vec::new().into_iter(),
        }
    }

    fn next_indices(&mut self) -> Result<Vec<usize>> {
        if let Some(b) = self.queue.next() {
            return Ok(b);
        }
        self.queue = batch_indices(self.n, self.batch_size, &mut self.rng)?.into_iter();
        Ok(self.queue.next().expect("non-empty dataset"))
    }
}

/// Runs the scheduled training loop in place and returns its trace.
///
/// Each epoch visits every row once in M1 minibatches; adversarial variants
/// perform `k` M2 updates on separately streamed minibatches before each M1
/// update.
pub fn train(
    model: &mut UnifAIModel,
    data: &LabeledDataset,
    weights: &LossWeights,
    schedule: &ScheduleConfig,
    rng: &mut SeedRng,
) -> Result<TrainTrace> {
    train_observed(model, data, weights, schedule, rng, &mut |_, _| {})
}

/// [`train`], calling `observer` after every parameter update.
pub fn train_observed(
    model: &mut UnifAIModel,
    data: &LabeledDataset,
    weights: &LossWeights,
    schedule: &ScheduleConfig,
    rng: &mut SeedRng,
    observer: &mut dyn FnMut(&TraceRecord, &UnifAIModel),
) -> Result<TrainTrace> {
    if data.is_empty() {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    if data.dim() != model.spec().input_dim {
        return Err(Error::dim("train", &[data.dim()], &[model.spec().input_dim]));
    }
    schedule.validate()?;
    weights.validate(model.variant())?;
    let z_dist = match (&data.z, weights.delta > 0.0) {
        (Some(z), _) => Some(EmpiricalZDistribution::from_labels(z, data.num_z_classes)?),
        (None, true) => return Err(Error::Contract("weights.delta > 0 requires z labels".into())),
        (None, false) => None,
    };

    let m1_ids = model.player_params(Player::M1);
    let m2_ids = model.player_params(Player::M2);
    let mut opt1 = OptimizerState::new(schedule.m1_optimizer.clone(), model.params(), &m1_ids);
    let mut opt2 = OptimizerState::new(schedule.m2_optimizer.clone(), model.params(), &m2_ids);

    let mut shuffle_rng = rng.split();
    let mut m2_stream = BatchStream::new(data.len(), schedule.batch_size, rng.split());
    let mut noise_rng = rng.split();
    let adversarial = model.variant().is_adversarial();

    let mut trace = TrainTrace::default();
    let (mut s1, mut s2) = (0, 0);
    for epoch in 0..schedule.epochs {
        for idx in batch_indices(data.len(), schedule.batch_size, &mut shuffle_rng)? {
            if adversarial {
                for _ in 0..schedule.k {
                    let b = data.batch(&m2_stream.next_indices()?)?;
                    let l = m2_loss(model, &b, weights)?;
                    check_finite(Phase::M2, epoch, s2, &l)?;
                    l.tape.backward(l.loss, model.params_mut())?;
                    opt2.apply(model.params_mut(), &m2_ids)?;
                    trace.records.push(TraceRecord {
                        phase: Phase::M2,
                        epoch,
                        step: s2,
                        components: l.components,
                        total: l.total,
                    });
                    observer(trace.records.last().unwrap(), model);
                    s2 += 1;
                }
            }
            let b = data.batch(&idx)?;
            let l = m1_loss(model, &b, weights, z_dist.as_ref(), &mut noise_rng)?;
            check_finite(Phase::M1, epoch, s1, &l)?;
            l.tape.backward(l.loss, model.params_mut())?;
            opt1.apply(model.params_mut(), &m1_ids)?;
            trace.records.push(TraceRecord {
                phase: Phase::M1,
                epoch,
                step: s1,
                components: l.components,
                total: l.total,
            });
            observer(trace.records.last().unwrap(), model);
            s1 += 1;
        }
    }
    Ok(trace)
}

/// Builds a model from `spec` and trains it, both seeded from `seed`.
pub fn fit_model(
    spec: UnifAISpec,
    data: &LabeledDataset,
    weights: &LossWeights,
    schedule: &ScheduleConfig,
    seed: u64,
) -> Result<(UnifAIModel, TrainTrace)> {
    let mut model = UnifAIModel::build(spec, seed)?;
    let mut rng = SeedRng::stream(seed, "train");
    let trace = train(&mut model, data, weights, schedule, &mut rng)?;
    Ok((model, trace))
}

#[cfg(test)]
mod tests;
