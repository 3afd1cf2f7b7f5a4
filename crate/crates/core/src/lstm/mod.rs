//! Sequence-to-sequence LSTM built from scratch.
//!
//! Architecture: an encoder LSTM consumes the `L × d` input; its final hidden
//! state is repeated `H` times as the input of a decoder LSTM whose state
//! starts at zero; every decoder hidden state passes through a linear dense
//! layer and then a linear single-unit output layer, giving `H` scalars.
//!
//! Parameters are exposed as 28 named tensors in a fixed order (see
//! [`Seq2SeqParams::tensor_names`]); checkpoints, Adam state and gradient
//! checking all iterate in that order.

mod adam;
mod backprop;
mod cell;
mod gradcheck;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::Matrix;
use crate::timeseries::Scaler;

pub use adam::{adam_step, AdamState};
pub use backprop::{backward, loss_value, seq2seq_forward, ForwardCache};
pub use cell::{lstm_cell_forward, sigmoid};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckOptions, GradCheckReport, Offender};
pub use train::{evaluate, train, EpochStats, Loss, TrainConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LstmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model dimensions must be positive")]
    ZeroDimension,
    #[error("cache was produced by a different parameter state")]
    StaleCache,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite gradient in {tensor}[{index}]")]
    NonFiniteGradient { tensor: String, index: usize },
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("training set is empty")]
    EmptyTrainingSet,
}

/// Gate order used for every per-gate array.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Cell = 3,
}

pub const GATE_SUFFIX: [&str; 4] = ["i", "f", "o", "g"];

/// One LSTM layer. `w[k]` is `hidden × input`, `u[k]` is `hidden × hidden`,
/// `b[k]` has length `hidden`, indexed by [`Gate`].
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: [Matrix; 4],
    pub u: [Matrix; 4],
    pub b: [Vec<f64>; 4],
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: core::array::from_fn(|_| Matrix::zeros(hidden_dim, input_dim)),
            u: core::array::from_fn(|_| Matrix::zeros(hidden_dim, hidden_dim)),
            b: core::array::from_fn(|_| vec![0.0; hidden_dim]),
        }
    }

    fn glorot<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        for m in p.w.iter_mut().chain(p.u.iter_mut()) {
            glorot_fill(m, rng);
        }
        p.b[Gate::Forget as usize].fill(1.0);
        p
    }

    fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.w
            .iter()
            .map(|m| m.data.as_slice())
            .chain(self.u.iter().map(|m| m.data.as_slice()))
            .chain(self.b.iter().map(|b| b.as_slice()))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.w
            .iter_mut()
            .map(|m| m.data.as_mut_slice())
            .chain(self.u.iter_mut().map(|m| m.data.as_mut_slice()))
            .chain(self.b.iter_mut().map(|b| b.as_mut_slice()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Linear,
}

/// Affine layer `activation(weight · x + bias)`; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseParams {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(output_dim, input_dim),
            bias: vec![0.0; output_dim],
            activation: Activation::Linear,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.weight.matvec_acc(x, &mut out);
        match self.activation {
            Activation::Linear => out,
        }
    }
}

fn glorot_fill<R: Rng>(m: &mut Matrix, rng: &mut R) {
    let bound = libm::sqrt(6.0 / (m.rows + m.cols) as f64);
    for w in &mut m.data {
        *w = rng.random_range(-bound..bound);
    }
}

/// Layer sizes of a [`Seq2SeqModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub dense_hidden: usize,
    pub horizon: usize,
}

impl ModelShape {
    /// Soil-moisture model: 200-unit encoder and decoder, 100-unit dense head,
    /// 14-day horizon.
    pub fn soil(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: 200,
            decoder_hidden: 200,
            dense_hidden: 100,
            horizon: crate::SOIL_HORIZON,
        }
    }

    /// Vegetation-index model: inputs are (index value, days to target),
    /// 50-unit LSTMs, 20-unit dense layer, one output.
    pub fn index() -> Self {
        Self {
            input_dim: 2,
            encoder_hidden: 50,
            decoder_hidden: 50,
            dense_hidden: 20,
            horizon: 1,
        }
    }

    fn validate(&self) -> Result<(), LstmError> {
        let dims = [
            self.input_dim,
            self.encoder_hidden,
            self.decoder_hidden,
            self.dense_hidden,
            self.horizon,
        ];
        if dims.contains(&0) {
            Err(LstmError::ZeroDimension)
        } else {
            Ok(())
        }
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqParams {
    pub encoder: LstmLayerParams,
    pub decoder: LstmLayerParams,
    pub head_hidden: DenseParams,
    pub head_out: DenseParams,
}

pub type Gradients = Seq2SeqParams;

impl Seq2SeqParams {
    pub fn zeros(shape: &ModelShape) -> Self {
        Self {
            encoder: LstmLayerParams::zeros(shape.input_dim, shape.encoder_hidden),
            decoder: LstmLayerParams::zeros(shape.encoder_hidden, shape.decoder_hidden),
            head_hidden: DenseParams::zeros(shape.decoder_hidden, shape.dense_hidden),
            head_out: DenseParams::zeros(shape.dense_hidden, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: LstmLayerParams::zeros(self.encoder.input_dim, self.encoder.hidden_dim),
            decoder: LstmLayerParams::zeros(self.decoder.input_dim, self.decoder.hidden_dim),
            head_hidden: DenseParams::zeros(self.head_hidden.input_dim(), self.head_hidden.output_dim()),
            head_out: DenseParams::zeros(self.head_out.input_dim(), self.head_out.output_dim()),
        }
    }

    /// Tensors in checkpoint order: encoder `W_i, W_f, W_o, W_g, U_i, ..., b_g`,
    /// decoder likewise, then head_hidden weight and bias, then head_out.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.encoder
            .tensors()
            .chain(self.decoder.tensors())
            .chain([
                self.head_hidden.weight.data.as_slice(),
                self.head_hidden.bias.as_slice(),
                self.head_out.weight.data.as_slice(),
                self.head_out.bias.as_slice(),
            ])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.encoder
            .tensors_mut()
            .chain(self.decoder.tensors_mut())
            .chain([
                self.head_hidden.weight.data.as_mut_slice(),
                self.head_hidden.bias.as_mut_slice(),
                self.head_out.weight.data.as_mut_slice(),
                self.head_out.bias.as_mut_slice(),
            ])
            .collect()
    }

    pub fn tensor_names() -> Vec<String> {
        let mut names = Vec::with_capacity(28);
        for layer in ["encoder", "decoder"] {
            for kind in ["W", "U", "b"] {
                for g in GATE_SUFFIX {
                    names.push(format!("{layer}.{kind}_{g}"));
                }
            }
        }
        for head in ["head_hidden", "head_out"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    /// Shapes matching [`Self::tensors`]; vectors are reported as `[len]`.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let lstm = |p: &LstmLayerParams| {
            let mut s = Vec::new();
            s.extend((0..4).map(|_| vec![p.hidden_dim, p.input_dim]));
            s.extend((0..4).map(|_| vec![p.hidden_dim, p.hidden_dim]));
            s.extend((0..4).map(|_| vec![p.hidden_dim]));
            s
        };
        let dense = |p: &DenseParams| vec![vec![p.output_dim(), p.input_dim()], vec![p.output_dim()]];
        let mut shapes = lstm(&self.encoder);
        shapes.extend(lstm(&self.decoder));
        shapes.extend(dense(&self.head_hidden));
        shapes.extend(dense(&self.head_out));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Seq2SeqParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t {
                h = (h ^ x.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
            h = h.rotate_left(7) ^ t.len() as u64;
        }
        h
    }
}

/// A seq2seq forecaster plus the scaler that maps raw inputs into model units.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub params: Seq2SeqParams,
    pub horizon: usize,
    pub scaler: Scaler,
    /// Input feature whose scaling the outputs share.
    pub target_channel: usize,
}

impl Seq2SeqModel {
    /// Glorot-uniform weights, zero biases except the forget gate (1.0),
    /// identity scaler. Deterministic per seed.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self, LstmError> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = LstmLayerParams::glorot(shape.input_dim, shape.encoder_hidden, &mut rng);
        let decoder = LstmLayerParams::glorot(shape.encoder_hidden, shape.decoder_hidden, &mut rng);
        let mut head_hidden = DenseParams::zeros(shape.decoder_hidden, shape.dense_hidden);
        glorot_fill(&mut head_hidden.weight, &mut rng);
        let mut head_out = DenseParams::zeros(shape.dense_hidden, 1);
        glorot_fill(&mut head_out.weight, &mut rng);
        Ok(Self {
            params: Seq2SeqParams {
                encoder,
                decoder,
                head_hidden,
                head_out,
            },
            horizon: shape.horizon,
            scaler: Scaler::identity(shape.input_dim),
            target_channel: 0,
        })
    }

    pub fn zeros(shape: &ModelShape) -> Result<Self, LstmError> {
        shape.validate()?;
        Ok(Self {
            params: Seq2SeqParams::zeros(shape),
            horizon: shape.horizon,
            scaler: Scaler::identity(shape.input_dim),
            target_channel: 0,
        })
    }

    pub fn with_scaler(mut self, scaler: Scaler, target_channel: usize) -> Self {
        assert_eq!(scaler.n_features(), self.input_dim(), "scaler width");
        self.scaler = scaler;
        self.target_channel = target_channel;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.params.encoder.input_dim
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.input_dim(),
            encoder_hidden: self.params.encoder.hidden_dim,
            decoder_hidden: self.params.decoder.hidden_dim,
            dense_hidden: self.params.head_hidden.output_dim(),
            horizon: self.horizon,
        }
    }

    /// Forecast in original units: scales a raw `L × d` input, runs the
    /// network and inverts the target channel's scaling on the outputs.
    pub fn predict(&self, raw_input: &[f64]) -> Result<Vec<f64>, LstmError> {
        let d = self.input_dim();
        if raw_input.is_empty() || raw_input.len() % d != 0 {
            return Err(LstmError::ShapeMismatch(format!(
                "input length {} is not a positive multiple of {d}",
                raw_input.len()
            )));
        }
        let mut scaled = raw_input.to_vec();
        for row in scaled.chunks_mut(d) {
            self.scaler.apply_row(row);
        }
        let out = backprop::predict_scaled(&self.params, self.horizon, &scaled)?;
        Ok(out
            .into_iter()
            .map(|z| self.scaler.invert_value(self.target_channel, z))
            .collect())
    }
}

/// Free-function form of [`Seq2SeqModel::init`].
pub fn init_params(shape: &ModelShape, seed: u64) -> Result<Seq2SeqModel, LstmError> {
    Seq2SeqModel::init(shape, seed)
}

/// Free-function form of [`Seq2SeqModel::predict`].
pub fn predict(model: &Seq2SeqModel, raw_input: &[f64]) -> Result<Vec<f64>, LstmError> {
    model.predict(raw_input)
}
