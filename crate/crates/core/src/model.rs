//! The sequence learner: input encoder, label embedding, projection, a stack
//! of pre-norm SRWM + feedforward blocks, and a linear classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::srwm::{self, SrwmDims, SrwmSeed};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor, REAL_BITS};

/// Epsilon of the per-example feature standardisation and of layer norms.
pub const NORM_EPS: Real = 1e-5;
/// Init std of the output layer, relative to `1/√d_model`.
pub const HEAD_GAIN: Real = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn compiled() -> Self {
        if REAL_BITS == 64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

impl Default for Precision {
    fn default() -> Self {
        Self::compiled()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderConfig {
    Identity,
    Mlp { hidden: usize, features: usize },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Identity
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw feature dimension of the inputs.
    pub input_dim: usize,
    /// Width of the output layer: N for domain-incremental, N·M for
    /// class-incremental sequences.
    pub n_outputs: usize,
    #[serde(default = "defaults::n_layers")]
    pub n_layers: usize,
    #[serde(default = "defaults::d_model")]
    pub d_model: usize,
    #[serde(default = "defaults::n_heads")]
    pub n_heads: usize,
    #[serde(default = "defaults::ff_multiplier")]
    pub ff_multiplier: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default)]
    pub precision: Precision,
    /// Seed of the parameter initialisation.
    #[serde(default)]
    pub init_seed: u64,
}

mod defaults {
    use super::Activation;
    pub fn n_layers() -> usize {
        2
    }
    pub fn d_model() -> usize {
        256
    }
    pub fn n_heads() -> usize {
        16
    }
    pub fn ff_multiplier() -> usize {
        2
    }
    pub fn activation() -> Activation {
        Activation::Gelu
    }
}

impl ModelConfig {
    pub fn new(input_dim: usize, n_outputs: usize) -> Self {
        Self {
            input_dim,
            n_outputs,
            n_layers: defaults::n_layers(),
            d_model: defaults::d_model(),
            n_heads: defaults::n_heads(),
            ff_multiplier: defaults::ff_multiplier(),
            encoder: EncoderConfig::Identity,
            activation: defaults::activation(),
            precision: Precision::compiled(),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("n_outputs", self.n_outputs),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ff_multiplier", self.ff_multiplier),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model.d_model ({}) is not divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if let EncoderConfig::Mlp { hidden, features } = self.encoder {
            if hidden == 0 || features == 0 {
                return Err(Error::config("mlp encoder widths must be positive"));
            }
        }
        if self.precision != Precision::compiled() {
            return Err(Error::config(format!(
                "model.precision {:?} does not match this build ({}-bit)",
                self.precision, REAL_BITS
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn feature_dim(&self) -> usize {
        match self.encoder {
            EncoderConfig::Identity => self.input_dim,
            EncoderConfig::Mlp { features, .. } => features,
        }
    }

    /// One-hot label width: every output class plus the unknown-label token.
    pub fn label_slots(&self) -> usize {
        self.n_outputs + 1
    }
}

/// A demonstration label or the unknown-label token used for queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Known(usize),
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledInput {
    pub x: Vec<Real>,
    pub y: Label,
}

impl LabeledInput {
    pub fn demo(x: Vec<Real>, y: usize) -> Self {
        Self { x, y: Label::Known(y) }
    }

    pub fn query(x: Vec<Real>) -> Self {
        Self { x, y: Label::Unknown }
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces all tensors; names and shapes must match exactly.
    pub fn assign(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() || tensors.len() != self.tensors.len() {
            return Err(Error::Checkpoint("parameter names do not match the model layout".into()));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct LayerLayout {
    norm1: Norm,
    srwm: Vec<usize>,
    norm2: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Option<(Linear, Linear)>,
    proj: Linear,
    layers: Vec<LayerLayout>,
    final_norm: Norm,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Model parameters bound onto a tape, aligned with [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Fast weights of every layer and head, as tape vars.
#[derive(Clone, Debug)]
pub struct TapeState {
    pub layers: Vec<Vec<Var>>,
}

/// Fast weights of every layer and head, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FastWeights {
    pub layers: Vec<Vec<Tensor>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let scaled = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, out_dim: usize, in_dim: usize, gain: Real| {
            let w = Tensor::randn(&[out_dim, in_dim], gain / (in_dim as Real).sqrt(), rng);
            Linear {
                w: params.push(format!("{name}.weight"), w),
                b: params.push(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            }
        };
        let linear = |params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, out_dim: usize, in_dim: usize| {
            scaled(params, rng, name, out_dim, in_dim, 1.0)
        };
        let norm = |params: &mut ParamSet, name: &str, dim: usize| Norm {
            gain: params.push(format!("{name}.gain"), Tensor::vector(vec![1.0; dim])),
            bias: params.push(format!("{name}.bias"), Tensor::zeros(&[dim])),
        };

        let encoder = match config.encoder {
            EncoderConfig::Identity => None,
            EncoderConfig::Mlp { hidden, features } => Some((
                linear(&mut params, &mut rng, "encoder.fc1", hidden, config.input_dim),
                linear(&mut params, &mut rng, "encoder.fc2", features, hidden),
            )),
        };
        let d = config.d_model;
        let proj = linear(&mut params, &mut rng, "input_proj", d, config.feature_dim() + config.label_slots());
        let dims = SrwmDims::new(config.d_head(), config.d_head())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let norm1 = norm(&mut params, &format!("layers.{l}.norm1"), d);
            let seed = SrwmSeed::init_with_rng(dims, config.n_heads, &mut rng)?;
            let srwm = seed
                .heads
                .into_iter()
                .enumerate()
                .map(|(h, w)| params.push(format!("layers.{l}.srwm.head{h}"), w))
                .collect();
            let norm2 = norm(&mut params, &format!("layers.{l}.norm2"), d);
            let ff = d * config.ff_multiplier;
            let ff_in = linear(&mut params, &mut rng, &format!("layers.{l}.ff.fc1"), ff, d);
            let ff_out = linear(&mut params, &mut rng, &format!("layers.{l}.ff.fc2"), d, ff);
            layers.push(LayerLayout { norm1, srwm, norm2, ff_in, ff_out });
        }
        let final_norm = norm(&mut params, "final_norm", d);
        // Small output weights keep untrained predictions near uniform.
        let head = scaled(&mut params, &mut rng, "head", config.n_outputs, d, HEAD_GAIN);
        Ok(Self { config, params, layout: Layout { encoder, proj, layers, final_norm, head } })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn srwm_dims(&self) -> SrwmDims {
        SrwmDims { d_in: self.config.d_head(), d_out: self.config.d_head() }
    }

    /// Copies every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Fresh per-sequence state: each head starts from its trainable seed.
    pub fn initial_state(&self, bound: &Bound) -> TapeState {
        TapeState {
            layers: self.layout.layers.iter().map(|l| l.srwm.iter().map(|&i| bound.vars[i]).collect()).collect(),
        }
    }

    pub fn state_from_values(&self, tape: &mut Tape, fw: &FastWeights) -> TapeState {
        TapeState {
            layers: fw.layers.iter().map(|heads| heads.iter().map(|w| tape.constant(w.clone())).collect()).collect(),
        }
    }

    pub fn state_values(&self, tape: &Tape, state: &TapeState) -> FastWeights {
        FastWeights {
            layers: state.layers.iter().map(|heads| heads.iter().map(|&w| tape.tensor(w)).collect()).collect(),
        }
    }

    pub fn initial_fast_weights(&self) -> FastWeights {
        FastWeights {
            layers: self
                .layout
                .layers
                .iter()
                .map(|l| l.srwm.iter().map(|&i| self.params.tensors()[i].clone()).collect())
                .collect(),
        }
    }

    fn label_one_hot(&self, y: Label) -> Result<Vec<Real>> {
        let mut v = vec![0.0; self.config.label_slots()];
        match y {
            Label::Known(c) if c < self.config.n_outputs => v[c] = 1.0,
            Label::Known(c) => {
                return Err(Error::Encoding(format!("label {c} outside 0..{}", self.config.n_outputs)));
            }
            Label::Unknown => v[self.config.n_outputs] = 1.0,
        }
        Ok(v)
    }

    fn apply_linear(&self, tape: &mut Tape, b: &Bound, lin: &Linear, x: Var) -> Result<Var, TensorError> {
        let y = tape.matvec(b.vars[lin.w], x)?;
        tape.add(y, b.vars[lin.b])
    }

    fn apply_norm(&self, tape: &mut Tape, b: &Bound, n: &Norm, x: Var) -> Result<Var, TensorError> {
        let z = tape.standardize(x, NORM_EPS)?;
        let z = tape.mul(z, b.vars[n.gain])?;
        tape.add(z, b.vars[n.bias])
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }

    /// Standardised encoder feature of `x` (before the label is attached).
    pub fn encode_feature(&self, tape: &mut Tape, b: &Bound, x: &[Real]) -> Result<Var> {
        if x.len() != self.config.input_dim {
            return Err(Error::Encoding(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        let xv = tape.constant(Tensor::vector(x.to_vec()));
        let feat = match &self.layout.encoder {
            None => xv,
            Some((fc1, fc2)) => {
                let h = self.apply_linear(tape, b, fc1, xv)?;
                let h = self.activate(tape, h)?;
                self.apply_linear(tape, b, fc2, h)?
            }
        };
        Ok(tape.standardize(feat, NORM_EPS)?)
    }

    /// Projection of `[standardised feature ‖ one_hot(y)]` to the model width.
    pub fn encode_on_tape(&self, tape: &mut Tape, b: &Bound, x: &[Real], y: Label) -> Result<Var> {
        let one_hot = self.label_one_hot(y)?;
        let feat = self.encode_feature(tape, b, x)?;
        let lab = tape.constant(Tensor::vector(one_hot));
        let joined = tape.concat(&[feat, lab])?;
        Ok(self.apply_linear(tape, b, &self.layout.proj, joined)?)
    }

    /// One timestep: returns head logits and the updated fast weights.
    pub fn step(&self, tape: &mut Tape, b: &Bound, state: &TapeState, x: &[Real], y: Label) -> Result<(Var, TapeState)> {
        let dims = self.srwm_dims();
        let mut h = self.encode_on_tape(tape, b, x, y)?;
        let mut next = Vec::with_capacity(self.layout.layers.len());
        for (layer, ws) in self.layout.layers.iter().zip(&state.layers) {
            let z = self.apply_norm(tape, b, &layer.norm1, h)?;
            let (o, new_ws) = srwm::multi_head_step(tape, dims, ws, z)?;
            h = tape.add(h, o)?;
            let z = self.apply_norm(tape, b, &layer.norm2, h)?;
            let z = self.apply_linear(tape, b, &layer.ff_in, z)?;
            let z = self.activate(tape, z)?;
            let z = self.apply_linear(tape, b, &layer.ff_out, z)?;
            h = tape.add(h, z)?;
            next.push(new_ws);
        }
        let z = self.apply_norm(tape, b, &self.layout.final_norm, h)?;
        let logits = self.apply_linear(tape, b, &self.layout.head, z)?;
        Ok((logits, TapeState { layers: next }))
    }

    /// Runs `seq` from a fresh state. Returns per-step logits (`T × n_outputs`)
    /// and the final fast weights.
    pub fn forward(&self, seq: &[LabeledInput]) -> Result<(Tensor, FastWeights)> {
        if seq.is_empty() {
            return Err(Error::Encoding("model_forward needs a non-empty sequence".into()));
        }
        let mut session = Session::new(self);
        let mut logits = Vec::with_capacity(seq.len() * self.config.n_outputs);
        for item in seq {
            logits.extend(session.observe_logits(&item.x, item.y)?);
        }
        let t = Tensor::matrix(seq.len(), self.config.n_outputs, logits)?;
        Ok((t, session.fast_weights()))
    }

    /// Output probabilities for a query under `state`. The state is not
    /// modified.
    pub fn predict(&self, state: &FastWeights, x: &[Real]) -> Result<Vec<Real>> {
        let mut session = Session::from_state(self, state);
        session.predict(x)
    }

    /// Projected input vector for `(x, y)` as a tensor.
    pub fn encode_input(&self, x: &[Real], y: Label) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let v = self.encode_on_tape(&mut tape, &b, x, y)?;
        Ok(tape.tensor(v))
    }

    /// Label one-hot block that `encode_input` concatenates before projection.
    pub fn label_block(&self, y: Label) -> Result<Vec<Real>> {
        self.label_one_hot(y)
    }
}

/// Gradient-free incremental evaluation. Only the current fast weights are
/// kept on the tape, so sequences of any length run in constant memory.
pub struct Session<'m> {
    model: &'m Model,
    tape: Tape,
    bound: Bound,
    base: usize,
    state: TapeState,
    steps: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self::from_state(model, &model.initial_fast_weights())
    }

    pub fn from_state(model: &'m Model, fw: &FastWeights) -> Self {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let base = tape.len();
        let state = model.state_from_values(&mut tape, fw);
        Self { model, tape, bound, base, state, steps: 0 }
    }

    /// Consumes one `(x, y)` pair and returns the logits it produced.
    pub fn observe_logits(&mut self, x: &[Real], y: Label) -> Result<Vec<Real>> {
        let (logits, next) = self.model.step(&mut self.tape, &self.bound, &self.state, x, y)?;
        let out = self.tape.value(logits).to_vec();
        let fw = self.model.state_values(&self.tape, &next);
        self.tape.truncate(self.base);
        self.state = self.model.state_from_values(&mut self.tape, &fw);
        self.steps += 1;
        Ok(out)
    }

    pub fn observe(&mut self, x: &[Real], y: usize) -> Result<()> {
        self.observe_logits(x, Label::Known(y)).map(|_| ())
    }

    /// Softmax over the head logits for `(x, ∅)`, evaluated on a scratch
    /// copy of the state.
    pub fn predict(&mut self, x: &[Real]) -> Result<Vec<Real>> {
        let mark = self.tape.len();
        let result = self.model.step(&mut self.tape, &self.bound, &self.state, x, Label::Unknown);
        let out = result.and_then(|(logits, _)| Ok(self.tape.softmax(logits).map(|p| self.tape.value(p).to_vec())?));
        self.tape.truncate(mark);
        out
    }

    pub fn fast_weights(&self) -> FastWeights {
        self.model.state_values(&self.tape, &self.state)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

pub fn argmax(v: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
