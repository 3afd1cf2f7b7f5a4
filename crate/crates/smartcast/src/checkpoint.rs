//! Model checkpoints: `SMLSTM1\n`, one line of JSON header, then every
//! parameter tensor as little-endian f64 in [`Seq2SeqParams::tensors`] order
//! (encoder `W_i, W_f, W_o, W_g, U_*, b_*`, decoder likewise, `head_hidden`
//! weight and bias, `head_out` weight and bias). Matrices are row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smartcast_core::lstm::{ModelShape, Seq2SeqModel, Seq2SeqParams};
use smartcast_core::timeseries::Scaler;

use crate::io::IoError;
use crate::raster::write_bytes;

pub const MAGIC: &[u8] = b"SMLSTM1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeHeader {
    pub input_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub dense_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub architecture: ShapeHeader,
    pub horizon: usize,
    pub scaler_mean: Vec<f64>,
    pub scaler_std: Vec<f64>,
    pub target_channel: usize,
    /// Free-form record of how the model was trained.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorHeader>,
}

pub fn encode(model: &Seq2SeqModel, config: serde_json::Value) -> Vec<u8> {
    let shape = model.shape();
    let header = CheckpointHeader {
        architecture: ShapeHeader {
            input_dim: shape.input_dim,
            encoder_hidden: shape.encoder_hidden,
            decoder_hidden: shape.decoder_hidden,
            dense_hidden: shape.dense_hidden,
        },
        horizon: model.horizon,
        scaler_mean: model.scaler.mean.clone(),
        scaler_std: model.scaler.std.clone(),
        target_channel: model.target_channel,
        config,
        tensors: Seq2SeqParams::tensor_names()
            .into_iter()
            .zip(model.params.tensor_shapes())
            .map(|(name, shape)| TensorHeader { name, shape })
            .collect(),
    };
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for t in model.params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Seq2SeqModel, CheckpointHeader), IoError> {
    let bad = |m: String| IoError::format(path, m);
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad("not a checkpoint (bad magic)".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    let a = &header.architecture;
    let shape = ModelShape {
        input_dim: a.input_dim,
        encoder_hidden: a.encoder_hidden,
        decoder_hidden: a.decoder_hidden,
        dense_hidden: a.dense_hidden,
        horizon: header.horizon,
    };
    let mut model = Seq2SeqModel::zeros(&shape).map_err(|e| bad(e.to_string()))?;
    let names = Seq2SeqParams::tensor_names();
    let shapes = model.params.tensor_shapes();
    if header.tensors.len() != names.len()
        || header
            .tensors
            .iter()
            .zip(names.iter().zip(&shapes))
            .any(|(t, (n, s))| &t.name != n || &t.shape != s)
    {
        return Err(bad("tensor table does not match the architecture".into()));
    }
    let payload = &rest[nl + 1..];
    let expected = model.params.num_params() * 8;
    if payload.len() != expected {
        return Err(bad(format!("expected {expected} parameter bytes, found {}", payload.len())));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in model.params.tensors_mut() {
        for (slot, v) in t.iter_mut().zip(&mut values) {
            *slot = v;
        }
    }
    let d = shape.input_dim;
    if header.scaler_mean.len() != d
        || header.scaler_std.len() != d
        || header.target_channel >= d
        || header.scaler_std.iter().any(|s| !(*s > 0.0))
    {
        return Err(bad("scaler does not match the input dimension".into()));
    }
    model.scaler = Scaler {
        mean: header.scaler_mean.clone(),
        std: header.scaler_std.clone(),
    };
    model.target_channel = header.target_channel;
    Ok((model, header))
}

pub fn save(path: &Path, model: &Seq2SeqModel, config: serde_json::Value) -> Result<(), IoError> {
    write_bytes(path, &encode(model, config))
}

pub fn load(path: &Path) -> Result<(Seq2SeqModel, CheckpointHeader), IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes, path)
}
