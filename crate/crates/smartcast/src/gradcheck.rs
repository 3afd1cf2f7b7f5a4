//! Finite-difference check of both architectures at toy size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use smartcast_core::lstm::{
    backward, gradient_check_with, seq2seq_forward, GradCheckOptions, GradCheckReport, LstmError, ModelShape,
    Seq2SeqModel,
};
use smartcast_core::timeseries::N_FEATURES;
use smartcast_core::vegindex::{HISTORY_LEN, WINDOW_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyDims {
    pub hidden: usize,
    pub input_len: usize,
    pub horizon: usize,
}

impl ToyDims {
    pub const SOIL: ToyDims = ToyDims {
        hidden: 8,
        input_len: 6,
        horizon: 3,
    };
    pub const INDEX: ToyDims = ToyDims {
        hidden: 5,
        input_len: HISTORY_LEN,
        horizon: 1,
    };
}

#[derive(Debug, Clone)]
pub struct ToyResult {
    pub name: &'static str,
    pub dims: ToyDims,
    pub input_dim: usize,
    pub report: GradCheckReport,
}

impl ToyResult {
    pub fn to_json(&self) -> Value {
        let worst = self.report.worst.as_ref().map(|w| {
            json!({
                "tensor": w.tensor, "index": w.index, "analytic": w.analytic,
                "numeric": w.numeric, "rel_error": w.rel_error,
            })
        });
        json!({
            "model": self.name,
            "input_dim": self.input_dim,
            "hidden": self.dims.hidden,
            "input_len": self.dims.input_len,
            "horizon": self.dims.horizon,
            "checked": self.report.checked,
            "max_rel_error": self.report.max_rel_error,
            "passed": self.report.passed,
            "worst": worst,
        })
    }
}

/// Full-coordinate check on a random model and sample. With `corrupt`, one
/// analytic gradient entry is perturbed first so the check must fail.
pub fn check_toy(name: &'static str, input_dim: usize, dims: ToyDims, seed: u64, corrupt: bool) -> Result<ToyResult, LstmError> {
    let shape = ModelShape {
        input_dim,
        encoder_hidden: dims.hidden,
        decoder_hidden: dims.hidden,
        dense_hidden: dims.hidden,
        horizon: dims.horizon,
    };
    let model = Seq2SeqModel::init(&shape, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x: Vec<f64> = (0..dims.input_len * input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y: Vec<f64> = (0..dims.horizon).map(|_| rng.random_range(-1.0..1.0)).collect();
    let opts = GradCheckOptions::default();
    let (_, cache) = seq2seq_forward(&model, &x)?;
    let mut grads = backward(&model, &cache, &y, opts.loss)?;
    if corrupt {
        let t = &mut grads.tensors_mut()[0];
        t[0] += 1e-2 * (1.0 + t[0].abs());
    }
    let report = gradient_check_with(&model, &x, &y, &grads, &opts)?;
    Ok(ToyResult {
        name,
        dims,
        input_dim,
        report,
    })
}

/// Soil toy (4 features) and index toy (2 features).
pub fn check_both(soil: ToyDims, index: ToyDims, seed: u64, corrupt: bool) -> Result<Vec<ToyResult>, LstmError> {
    Ok(vec![
        check_toy("soil", N_FEATURES, soil, seed, corrupt)?,
        check_toy("index", WINDOW_FEATURES, index, seed.wrapping_add(1), corrupt)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_and_fails_on_corruption() {
        let small = ToyDims {
            hidden: 3,
            input_len: 4,
            horizon: 2,
        };
        let ok = check_both(small, small, 1, false).unwrap();
        assert!(ok.iter().all(|r| r.report.passed));
        assert_eq!(ok[0].to_json()["hidden"], 3);
        let bad = check_both(small, small, 1, true).unwrap();
        assert!(bad.iter().all(|r| !r.report.passed));
        assert_eq!(bad[0].report.worst.as_ref().unwrap().tensor, "encoder.W_i");
    }
}
