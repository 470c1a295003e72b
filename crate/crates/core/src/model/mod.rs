//! The transducer: an LSTM encoder with a mid-stack time-reduction layer, an
//! embedding + LSTM prediction network, and a two-layer joint network.
//!
//! Recurrent state is explicit everywhere so callers can stream audio in
//! chunks and so training can start from non-zero states.
//!
//! Token ids: the joint network emits `vocab_size + 1` logits indexed by token
//! id, one of which (`blank_id`) is blank; the remaining ids are labels. The
//! start-of-sequence id is `vocab_size + 1` and is only ever a prediction-network
//! input.

mod encoder;
mod joint;
mod lattice;
mod prediction;

use rand::Rng;

pub use encoder::{EncoderCache, EncoderOutput};
pub use lattice::{LatticeCache, LatticeForward, LogitLattice, StateGrad};
pub use prediction::{PredictionCache, PredictionOutput};

use crate::error::{Error, Result};
use crate::nn::{LstmCellState, LstmLayerParams, Matrix};

pub type TokenId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub hidden: usize,
    pub proj: usize,
}

/// How the joint network combines the encoder frame and the prediction row
/// before the tanh layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointMode {
    /// `tanh([h_enc; p]·W + b)`
    Concat,
    /// `tanh((h_enc + p)·W + b)`; requires equal projection sizes.
    Additive,
}

impl JointMode {
    pub fn as_str(self) -> &'static str {
        match self {
            JointMode::Concat => "concat",
            JointMode::Additive => "additive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(JointMode::Concat),
            "additive" | "add" => Ok(JointMode::Additive),
            other => Err(Error::Config(format!("unknown joint mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub encoder_layers: Vec<LayerDims>,
    /// Number of encoder layers that run before the time-reduction layer.
    pub time_reduction_after: usize,
    pub time_reduction_factor: usize,
    pub prediction_layers: Vec<LayerDims>,
    pub joint_dim: usize,
    pub joint_mode: JointMode,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub blank_id: TokenId,
    pub sos_id: TokenId,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let layer = LayerDims {
            hidden: 32,
            proj: 16,
        };
        Self {
            feature_dim: 8,
            encoder_layers: vec![layer, layer],
            time_reduction_after: 1,
            time_reduction_factor: 2,
            prediction_layers: vec![layer],
            joint_dim: 16,
            joint_mode: JointMode::Concat,
            vocab_size: 16,
            embedding_dim: 8,
            blank_id: 0,
            sos_id: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.feature_dim == 0 || self.joint_dim == 0 || self.embedding_dim == 0 {
            return bad("feature_dim, joint_dim and embedding_dim must be positive".into());
        }
        if self.encoder_layers.is_empty() || self.prediction_layers.is_empty() {
            return bad("need at least one encoder and one prediction layer".into());
        }
        if self
            .encoder_layers
            .iter()
            .chain(&self.prediction_layers)
            .any(|l| l.hidden == 0 || l.proj == 0)
        {
            return bad("layer dims must be positive".into());
        }
        if self.time_reduction_factor == 0 {
            return bad("time_reduction_factor must be >= 1".into());
        }
        if self.time_reduction_after >= self.encoder_layers.len() {
            return bad(format!(
                "time_reduction_after ({}) must be < encoder layer count ({})",
                self.time_reduction_after,
                self.encoder_layers.len()
            ));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.blank_id > self.vocab_size {
            return bad(format!("blank_id {} outside 0..={}", self.blank_id, self.vocab_size));
        }
        if self.sos_id != self.vocab_size + 1 {
            return bad(format!("sos_id must be vocab_size + 1 = {}", self.vocab_size + 1));
        }
        if self.joint_mode == JointMode::Additive && self.encoder_output_dim() != self.prediction_output_dim() {
            return bad("additive joint needs equal encoder and prediction projections".into());
        }
        Ok(())
    }

    /// Size of the joint output (labels plus blank).
    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn encoder_output_dim(&self) -> usize {
        self.encoder_layers.last().map_or(0, |l| l.proj)
    }

    pub fn prediction_output_dim(&self) -> usize {
        self.prediction_layers.last().map_or(0, |l| l.proj)
    }

    pub fn encoder_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            let base = self.feature_dim;
            if self.time_reduction_after == 0 {
                base * self.time_reduction_factor
            } else {
                base
            }
        } else {
            let below = self.encoder_layers[layer - 1].proj;
            if layer == self.time_reduction_after {
                below * self.time_reduction_factor
            } else {
                below
            }
        }
    }

    pub fn prediction_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embedding_dim
        } else {
            self.prediction_layers[layer - 1].proj
        }
    }

    pub fn joint_input_dim(&self) -> usize {
        match self.joint_mode {
            JointMode::Concat => self.encoder_output_dim() + self.prediction_output_dim(),
            JointMode::Additive => self.encoder_output_dim(),
        }
    }

    /// Encoder frames produced from `frames` input frames.
    pub fn reduced_len(&self, frames: usize) -> usize {
        frames / self.time_reduction_factor
    }

    pub fn is_label(&self, token: TokenId) -> bool {
        token <= self.vocab_size && token != self.blank_id
    }

    /// All emittable label ids in increasing order.
    pub fn labels(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..=self.vocab_size).filter(move |&k| k != self.blank_id)
    }

    /// Embedding row of a prediction-network input token.
    pub fn embedding_row(&self, token: TokenId) -> Result<usize> {
        if token == self.sos_id {
            Ok(self.vocab_size)
        } else if self.is_label(token) {
            Ok(if token < self.blank_id { token } else { token - 1 })
        } else if token == self.blank_id {
            Err(Error::Contract(
                "blank is never a prediction-network input".into(),
            ))
        } else {
            Err(Error::Contract(format!("token id {token} out of range")))
        }
    }

    /// Analytic trainable-parameter count.
    pub fn param_count(&self) -> usize {
        let lstm = |input: usize, d: LayerDims| 4 * d.hidden * (input + d.proj + 1) + d.hidden * d.proj;
        let encoder: usize = (0..self.encoder_layers.len())
            .map(|i| lstm(self.encoder_input_dim(i), self.encoder_layers[i]))
            .sum();
        let prediction: usize = (0..self.prediction_layers.len())
            .map(|i| lstm(self.prediction_input_dim(i), self.prediction_layers[i]))
            .sum();
        let embedding = (self.vocab_size + 1) * self.embedding_dim;
        let joint = (self.joint_input_dim() + 1) * self.joint_dim + (self.joint_dim + 1) * self.output_dim();
        encoder + prediction + embedding + joint
    }
}

/// Recurrent state of the whole model.
///
/// `prediction` is the prediction-network state *before* `last_token` is
/// consumed: the pair means "feed `last_token` next". The zero state pairs
/// all-zero vectors with the start-of-sequence token.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub encoder: Vec<LstmCellState>,
    pub prediction: Vec<LstmCellState>,
    pub last_token: TokenId,
}

impl RecurrentState {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            encoder: config
                .encoder_layers
                .iter()
                .map(|l| LstmCellState::zeros(l.hidden, l.proj))
                .collect(),
            prediction: config
                .prediction_layers
                .iter()
                .map(|l| LstmCellState::zeros(l.hidden, l.proj))
                .collect(),
            last_token: config.sos_id,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.iter().chain(&self.prediction).all(LstmCellState::is_finite)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.encoder.iter().chain(&self.prediction).flat_map(|s| s.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder
            .iter_mut()
            .chain(self.prediction.iter_mut())
            .flat_map(|s| s.values_mut())
    }

    pub fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let ok = |states: &[LstmCellState], dims: &[LayerDims]| {
            states.len() == dims.len()
                && states
                    .iter()
                    .zip(dims)
                    .all(|(s, d)| s.cell.len() == d.hidden && s.memory.len() == d.proj)
        };
        if !ok(&self.encoder, &config.encoder_layers) || !ok(&self.prediction, &config.prediction_layers) {
            return Err(Error::shape("recurrent state", "config layer dims", "mismatched state"));
        }
        Ok(())
    }
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct RnntParams {
    pub encoder: Vec<LstmLayerParams>,
    /// `(vocab_size + 1) × embedding_dim`; last row is the start-of-sequence token.
    pub embedding: Matrix,
    pub prediction: Vec<LstmLayerParams>,
    pub joint_hidden_w: Matrix,
    pub joint_hidden_b: Matrix,
    pub joint_out_w: Matrix,
    pub joint_out_b: Matrix,
}

impl RnntParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self::build(config, |i, h, p| LstmLayerParams::zeros(i, h, p), |r, c| Matrix::zeros(r, c))
    }

    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            config,
            |i, h, p| LstmLayerParams::init(i, h, p, &mut *rng.borrow_mut()),
            |r, c| Matrix::uniform_fan_in(r, c, &mut *rng.borrow_mut()),
        )
    }

    fn build(
        config: &ModelConfig,
        lstm: impl Fn(usize, usize, usize) -> LstmLayerParams,
        weight: impl Fn(usize, usize) -> Matrix,
    ) -> Self {
        let encoder = config
            .encoder_layers
            .iter()
            .enumerate()
            .map(|(i, d)| lstm(config.encoder_input_dim(i), d.hidden, d.proj))
            .collect();
        let embedding = weight(config.vocab_size + 1, config.embedding_dim);
        let prediction = config
            .prediction_layers
            .iter()
            .enumerate()
            .map(|(i, d)| lstm(config.prediction_input_dim(i), d.hidden, d.proj))
            .collect();
        let joint_hidden_w = weight(config.joint_input_dim(), config.joint_dim);
        let joint_out_w = weight(config.joint_dim, config.output_dim());
        Self {
            encoder,
            embedding,
            prediction,
            joint_hidden_w,
            joint_hidden_b: Matrix::zeros(1, config.joint_dim),
            joint_out_w,
            joint_out_b: Matrix::zeros(1, config.output_dim()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|m| m.fill(0.0));
        z
    }

    /// Tensors in a fixed canonical order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        let lstm_names = ["w_input", "w_recurrent", "bias", "projection"];
        for (i, layer) in self.encoder.iter().enumerate() {
            for (n, m) in lstm_names.iter().zip(layer.tensors()) {
                out.push((format!("encoder.{i}.{n}"), m));
            }
        }
        out.push(("prediction.embedding".to_string(), &self.embedding));
        for (i, layer) in self.prediction.iter().enumerate() {
            for (n, m) in lstm_names.iter().zip(layer.tensors()) {
                out.push((format!("prediction.{i}.{n}"), m));
            }
        }
        out.push(("joint.hidden.w".to_string(), &self.joint_hidden_w));
        out.push(("joint.hidden.b".to_string(), &self.joint_hidden_b));
        out.push(("joint.out.w".to_string(), &self.joint_out_w));
        out.push(("joint.out.b".to_string(), &self.joint_out_b));
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for layer in &mut self.encoder {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.embedding);
        for layer in &mut self.prediction {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.joint_hidden_w);
        out.push(&mut self.joint_hidden_b);
        out.push(&mut self.joint_out_w);
        out.push(&mut self.joint_out_b);
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|m| m.shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    pub fn add_assign(&mut self, other: &RnntParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

/// Config plus parameters. Immutable during forward passes and decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RnntModel {
    pub config: ModelConfig,
    pub params: RnntParams,
}

impl RnntModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = RnntParams::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: RnntParams) -> Result<Self> {
        config.validate()?;
        let expected = RnntParams::zeros(&config).shapes();
        if params.shapes() != expected {
            return Err(Error::shape("model params", format!("{expected:?}"), format!("{:?}", params.shapes())));
        }
        Ok(Self { config, params })
    }

    pub fn zero_state(&self) -> RecurrentState {
        RecurrentState::zeros(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }
}
