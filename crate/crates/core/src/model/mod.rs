//! The split-embedding network: encoder, predictor, noisy transformer (dropout
//! on `e1`), decoder, the two disentanglers and the optional z-discriminator.
//!
//! Parameters are partitioned into two players. `M1` holds the encoder,
//! predictor and decoder; `M2` holds the adversaries (`dis1`, `dis2`, `dz`).

mod checkpoint;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Activation, ParamId, ParamStore, SeedRng, Tape, Tensor, Var};

pub use checkpoint::{
    bundle_paths, load_checkpoint, load_checkpoint_with_meta, save_checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};

/// Rows per forward chunk for inference helpers.
const INFERENCE_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// All components including the z-discriminator.
    Full,
    /// Disentanglers but no z-discriminator (nuisance removal without z labels).
    NoDz,
    /// Encoder, predictor, dropout and decoder without adversaries.
    B1,
    /// Encoder `e1` head and predictor only.
    B0,
}

impl Variant {
    pub fn has_decoder(self) -> bool {
        self != Variant::B0
    }

    pub fn has_disentanglers(self) -> bool {
        matches!(self, Variant::Full | Variant::NoDz)
    }

    pub fn has_dz(self) -> bool {
        self == Variant::Full
    }

    /// Whether training alternates with an adversarial `M2` phase.
    pub fn is_adversarial(self) -> bool {
        self.has_disentanglers()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDz => "nodz",
            Variant::B1 => "b1",
            Variant::B0 => "b0",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Player {
    M1,
    M2,
}

/// Fully connected stack; `layer_widths` includes input and output widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, output_activation: Activation) -> Self {
        let mut layer_widths = Vec::with_capacity(hidden.len() + 2);
        layer_widths.push(input);
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        Self {
            layer_widths,
            hidden_activation: Activation::Relu,
            output_activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn validate(&self, module: &str) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::SpecValidation(format!(
                "{module}: needs at least an input and an output width"
            )));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::SpecValidation(format!(
                "{module}: layer width {i} is zero"
            )));
        }
        Ok(())
    }

    fn check_edge(&self, module: &str, input: usize, output: usize) -> Result<()> {
        self.validate(module)?;
        if self.input_width() != input {
            return Err(Error::SpecValidation(format!(
                "{module}: input width {} != expected {input}",
                self.input_width()
            )));
        }
        if self.output_width() != output {
            return Err(Error::SpecValidation(format!(
                "{module}: output width {} != expected {output}",
                self.output_width()
            )));
        }
        Ok(())
    }
}

/// Hidden-layer layout used to derive a [`UnifAISpec`] from data dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub enc_hidden: Vec<usize>,
    pub pred_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub dis_hidden: Vec<usize>,
    pub dz_hidden: Vec<usize>,
    pub decoder_output: Activation,
    pub psi_rate: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            enc_hidden: vec![64],
            pred_hidden: vec![],
            dec_hidden: vec![],
            dis_hidden: vec![],
            dz_hidden: vec![64],
            decoder_output: Activation::Linear,
            psi_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifAISpec {
    pub variant: Variant,
    pub input_dim: usize,
    pub e1_dim: usize,
    pub e2_dim: usize,
    pub num_classes: usize,
    /// Zero when the model has no z-discriminator.
    pub num_z_classes: usize,
    pub psi_rate: f64,
    pub enc: MlpSpec,
    pub pred: MlpSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec: Option<MlpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dis1: Option<MlpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dis2: Option<MlpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dz: Option<MlpSpec>,
}

impl UnifAISpec {
    /// Builds the module specs for `variant` from data dimensions and a layout.
    pub fn from_architecture(
        variant: Variant,
        input_dim: usize,
        e1_dim: usize,
        e2_dim: usize,
        num_classes: usize,
        num_z_classes: usize,
        arch: &Architecture,
    ) -> Self {
        let e = e1_dim + e2_dim;
        let with = |on: bool, spec: MlpSpec| on.then_some(spec);
        Self {
            variant,
            input_dim,
            e1_dim,
            e2_dim,
            num_classes,
            num_z_classes: if variant.has_dz() { num_z_classes } else { 0 },
            psi_rate: arch.psi_rate,
            enc: MlpSpec::new(input_dim, &arch.enc_hidden, e, Activation::Tanh),
            pred: MlpSpec::new(e1_dim, &arch.pred_hidden, num_classes, Activation::Linear),
            dec: with(
                variant.has_decoder(),
                MlpSpec::new(e, &arch.dec_hidden, input_dim, arch.decoder_output),
            ),
            dis1: with(
                variant.has_disentanglers(),
                MlpSpec::new(e1_dim, &arch.dis_hidden, e2_dim, Activation::Linear),
            ),
            dis2: with(
                variant.has_disentanglers(),
                MlpSpec::new(e2_dim, &arch.dis_hidden, e1_dim, Activation::Linear),
            ),
            dz: with(
                variant.has_dz(),
                MlpSpec::new(e1_dim, &arch.dz_hidden, num_z_classes, Activation::Linear),
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecValidation(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.e1_dim == 0 || self.e2_dim == 0 {
            return bad(format!(
                "embedding widths must be positive (e1_dim={}, e2_dim={})",
                self.e1_dim, self.e2_dim
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.psi_rate) {
            return bad(format!("psi_rate must lie in [0, 1), got {}", self.psi_rate));
        }
        let e = self.e1_dim + self.e2_dim;
        self.enc.check_edge("enc", self.input_dim, e)?;
        if self.enc.output_activation != Activation::Tanh {
            return bad("enc: output activation must be tanh".into());
        }
        self.pred.check_edge("pred", self.e1_dim, self.num_classes)?;

        let v = self.variant;
        check_presence("dec", self.dec.as_ref(), v.has_decoder(), v)?;
        check_presence("dis1", self.dis1.as_ref(), v.has_disentanglers(), v)?;
        check_presence("dis2", self.dis2.as_ref(), v.has_disentanglers(), v)?;
        check_presence("dz", self.dz.as_ref(), v.has_dz(), v)?;
        if let Some(dec) = &self.dec {
            dec.check_edge("dec", e, self.input_dim)?;
        }
        if let Some(d) = &self.dis1 {
            d.check_edge("dis1", self.e1_dim, self.e2_dim)?;
        }
        if let Some(d) = &self.dis2 {
            d.check_edge("dis2", self.e2_dim, self.e1_dim)?;
        }
        if v.has_dz() && self.num_z_classes < 2 {
            return bad(format!(
                "variant full requires num_z_classes >= 2, got {}",
                self.num_z_classes
            ));
        }
        if let Some(d) = &self.dz {
            d.check_edge("dz", self.e1_dim, self.num_z_classes)?;
        }
        Ok(())
    }
}

fn check_presence(name: &str, spec: Option<&MlpSpec>, wanted: bool, v: Variant) -> Result<()> {
    match (spec.is_some(), wanted) {
        (true, false) => Err(Error::SpecValidation(format!(
            "{name}: not part of variant {v}"
        ))),
        (false, true) => Err(Error::SpecValidation(format!(
            "{name}: required by variant {v}"
        ))),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Parameter handles of one fully connected module.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Mlp {
    pub(crate) fn build(prefix: &str, spec: &MlpSpec, store: &mut ParamStore, rng: &mut SeedRng) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, pair) in spec.layer_widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = store.add(
                format!("{prefix}.layer{i}.weight"),
                glorot_uniform(fan_in, fan_out, rng),
            )?;
            let bias = store.add(format!("{prefix}.layer{i}.bias"), Tensor::zeros(&[fan_out]))?;
            layers.push(Layer { weight, bias });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Records the forward pass; parameters receive gradients only when `live`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, live: bool) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param_as(store, layer.weight, live);
            let b = tape.param_as(store, layer.bias, live);
            h = tape.affine(h, w, b)?;
            let act = if i == last {
                self.spec.output_activation
            } else {
                self.spec.hidden_activation
            };
            h = tape.activation(h, act);
        }
        Ok(h)
    }

    /// Gradient-free forward pass over a whole matrix.
    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, xv, false)?;
        Ok(tape.value(out).clone())
    }
}

/// Outputs of the adversaries for a pair of embeddings.
#[derive(Clone, Debug)]
pub struct AdversaryOutput {
    /// `Dis1(e1)`, an estimate of `e2`.
    pub e2_hat: Tensor,
    /// `Dis2(e2)`, an estimate of `e1`.
    pub e1_hat: Tensor,
    /// `softmax(Dz(e1))` when the model has a z-discriminator.
    pub z_probs: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct UnifAIModel {
    spec: UnifAISpec,
    store: ParamStore,
    enc: Mlp,
    pred: Mlp,
    dec: Option<Mlp>,
    dis1: Option<Mlp>,
    dis2: Option<Mlp>,
    dz: Option<Mlp>,
}

impl UnifAIModel {
    /// Validates `spec` and initializes every parameter from `seed`.
    pub fn build(spec: UnifAISpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeedRng::stream(seed, "init");
        let mut store = ParamStore::new();
        let enc = Mlp::build("enc", &spec.enc, &mut store, &mut rng)?;
        let pred = Mlp::build("pred", &spec.pred, &mut store, &mut rng)?;
        let mut optional = |name: &str, s: &Option<MlpSpec>| -> Result<Option<Mlp>> {
            s.as_ref()
                .map(|s| Mlp::build(name, s, &mut store, &mut rng))
                .transpose()
        };
        let dec = optional("dec", &spec.dec)?;
        let dis1 = optional("dis1", &spec.dis1)?;
        let dis2 = optional("dis2", &spec.dis2)?;
        let dz = optional("dz", &spec.dz)?;
        Ok(Self {
            spec,
            store,
            enc,
            pred,
            dec,
            dis1,
            dis2,
            dz,
        })
    }

    pub fn spec(&self) -> &UnifAISpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Player owning a parameter, decided by its module prefix.
    pub fn player_of(name: &str) -> Player {
        match name.split('.').next() {
            Some("dis1" | "dis2" | "dz") => Player::M2,
            _ => Player::M1,
        }
    }

    pub fn player_params(&self, player: Player) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| Self::player_of(&p.name) == player)
            .map(|(id, _)| id)
            .collect()
    }

    /// Column index in the encoder output where `e2` starts.
    pub fn e1_dim(&self) -> usize {
        self.spec.e1_dim
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::dim("model input", x.shape(), &[x.rows(), self.spec.input_dim]));
        }
        Ok(())
    }

    // ---- tape-level building blocks ----

    pub fn encode_on(&self, tape: &mut Tape, x: Var, live: bool) -> Result<(Var, Var)> {
        let e = self.enc.forward(tape, &self.store, x, live)?;
        let total = self.spec.e1_dim + self.spec.e2_dim;
        let e1 = tape.slice_cols(e, 0, self.spec.e1_dim)?;
        let e2 = tape.slice_cols(e, self.spec.e1_dim, total)?;
        Ok((e1, e2))
    }

    pub fn predict_on(&self, tape: &mut Tape, e1: Var, live: bool) -> Result<Var> {
        let logits = self.pred.forward(tape, &self.store, e1, live)?;
        Ok(tape.softmax_rows(logits))
    }

    /// `Dec([ψ(e1), e2])`; ψ is dropout with `psi_rate`, active only when training.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        e1: Var,
        e2: Var,
        rng: &mut SeedRng,
        training: bool,
        live: bool,
    ) -> Result<Var> {
        let dec = self.dec.as_ref().ok_or_else(|| self.unsupported("reconstruct"))?;
        let noisy = tape.dropout(e1, self.spec.psi_rate, rng, training)?;
        let joined = tape.concat_cols(noisy, e2)?;
        dec.forward(tape, &self.store, joined, live)
    }

    pub fn dis1_on(&self, tape: &mut Tape, e1: Var, live: bool) -> Result<Var> {
        let d = self.dis1.as_ref().ok_or_else(|| self.unsupported("dis1"))?;
        d.forward(tape, &self.store, e1, live)
    }

    pub fn dis2_on(&self, tape: &mut Tape, e2: Var, live: bool) -> Result<Var> {
        let d = self.dis2.as_ref().ok_or_else(|| self.unsupported("dis2"))?;
        d.forward(tape, &self.store, e2, live)
    }

    pub fn dz_on(&self, tape: &mut Tape, e1: Var, live: bool) -> Result<Option<Var>> {
        match &self.dz {
            Some(d) => {
                let logits = d.forward(tape, &self.store, e1, live)?;
                Ok(Some(tape.softmax_rows(logits)))
            }
            None => Ok(None),
        }
    }

    fn unsupported(&self, op: &'static str) -> Error {
        Error::UnsupportedVariant {
            op,
            variant: self.spec.variant.to_string(),
        }
    }

    // ---- inference API ----

    /// Splits the encoder output into `(e1, e2)`; both lie in `[-1, 1]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_width(x)?;
        let mut e1_parts = Vec::new();
        let mut e2_parts = Vec::new();
        for chunk in row_chunks(x)? {
            let mut tape = Tape::new();
            let xv = tape.constant(chunk);
            let (e1, e2) = self.encode_on(&mut tape, xv, false)?;
            e1_parts.push(tape.value(e1).clone());
            e2_parts.push(tape.value(e2).clone());
        }
        Ok((stack_rows(e1_parts)?, stack_rows(e2_parts)?))
    }

    /// Class probabilities along `x → e1 → y`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let mut parts = Vec::new();
        for chunk in row_chunks(x)? {
            let mut tape = Tape::new();
            let xv = tape.constant(chunk);
            let (e1, _) = self.encode_on(&mut tape, xv, false)?;
            let p = self.predict_on(&mut tape, e1, false)?;
            parts.push(tape.value(p).clone());
        }
        stack_rows(parts)
    }

    pub fn reconstruct(&self, x: &Tensor, rng: &mut SeedRng, training: bool) -> Result<Tensor> {
        self.check_width(x)?;
        if self.dec.is_none() {
            return Err(self.unsupported("reconstruct"));
        }
        let mut parts = Vec::new();
        for chunk in row_chunks(x)? {
            let mut tape = Tape::new();
            let xv = tape.constant(chunk);
            let (e1, e2) = self.encode_on(&mut tape, xv, false)?;
            let out = self.decode_on(&mut tape, e1, e2, rng, training, false)?;
            parts.push(tape.value(out).clone());
        }
        stack_rows(parts)
    }

    pub fn adversary_forward(&self, e1: &Tensor, e2: &Tensor) -> Result<AdversaryOutput> {
        if e1.cols() != self.spec.e1_dim || e2.cols() != self.spec.e2_dim || e1.rows() != e2.rows() {
            return Err(Error::dim("adversary_forward", e1.shape(), e2.shape()));
        }
        let mut tape = Tape::new();
        let a = tape.constant(e1.clone());
        let b = tape.constant(e2.clone());
        let e2_hat = self.dis1_on(&mut tape, a, false)?;
        let e1_hat = self.dis2_on(&mut tape, b, false)?;
        let z = self.dz_on(&mut tape, a, false)?;
        Ok(AdversaryOutput {
            e2_hat: tape.value(e2_hat).clone(),
            e1_hat: tape.value(e1_hat).clone(),
            z_probs: z.map(|v| tape.value(v).clone()),
        })
    }
}

fn row_chunks(x: &Tensor) -> Result<Vec<Tensor>> {
    if x.rows() <= INFERENCE_CHUNK {
        return Ok(vec![x.clone()]);
    }
    (0..x.rows())
        .step_by(INFERENCE_CHUNK)
        .map(|start| {
            let end = (start + INFERENCE_CHUNK).min(x.rows());
            let idx: Vec<usize> = (start..end).collect();
            x.select_rows(&idx)
        })
        .collect()
}

fn stack_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().unwrap());
    }
    let cols = parts[0].cols();
    let rows = parts.iter().map(Tensor::rows).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(rows, cols, data)
}
