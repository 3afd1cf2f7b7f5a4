//! Central finite-difference verification of [`backward`](super::backward).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backprop::{backward, forward_for_training, loss_value, seq2seq_forward};
use super::train::Loss;
use super::{Gradients, LstmError, Seq2SeqModel, Seq2SeqParams};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub loss: Loss,
    /// Coordinates checked per tensor; `None` sweeps every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            loss: Loss::Mse,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<Offender>,
    /// `(tensor name, max relative error)` for every tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares [`backward`] on one `(input, target)` sample against central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε`.
pub fn gradient_check(
    model: &Seq2SeqModel,
    input: &[f64],
    target: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, LstmError> {
    validate(opts)?;
    let (_, cache) = seq2seq_forward(model, input)?;
    let analytic = backward(model, &cache, target, opts.loss)?;
    gradient_check_with(model, input, target, &analytic, opts)
}

/// Same as [`gradient_check`] but against caller-supplied gradients.
pub fn gradient_check_with(
    model: &Seq2SeqModel,
    input: &[f64],
    target: &[f64],
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, LstmError> {
    validate(opts)?;
    if target.len() != model.horizon {
        return Err(LstmError::ShapeMismatch(format!(
            "target has {} steps, horizon is {}",
            target.len(),
            model.horizon
        )));
    }
    let names = Seq2SeqParams::tensor_names();
    let analytic_tensors = analytic.tensors();
    let mut probe = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let loss_at = |p: &Seq2SeqParams| -> Result<f64, LstmError> {
        let cache = forward_for_training(p, model.horizon, input)?;
        Ok(loss_value(cache.prediction(), target, opts.loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_tensor: Vec::with_capacity(names.len()),
        checked: 0,
        passed: true,
    };
    let lens: Vec<usize> = analytic_tensors.iter().map(|t| t.len()).collect();
    for (k, name) in names.iter().enumerate() {
        let len = lens[k];
        let coords: Vec<usize> = match opts.coords_per_tensor {
            Some(c) if c < len => {
                let mut v = sample(&mut rng, len, c).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut tensor_max = 0.0f64;
        for idx in coords {
            let orig = probe.tensors()[k][idx];
            probe.tensors_mut()[k][idx] = orig + opts.epsilon;
            let plus = loss_at(&probe)?;
            probe.tensors_mut()[k][idx] = orig - opts.epsilon;
            let minus = loss_at(&probe)?;
            probe.tensors_mut()[k][idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic_tensors[k][idx];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            tensor_max = tensor_max.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some(Offender {
                    tensor: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_tensor.push((name.clone(), tensor_max));
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`; NaN maps to infinity.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    let r = (analytic - numeric).abs() / denom;
    if r.is_nan() {
        f64::INFINITY
    } else {
        r
    }
}

fn validate(opts: &GradCheckOptions) -> Result<(), LstmError> {
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(LstmError::InvalidArgument(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    if !(opts.tolerance > 0.0) {
        return Err(LstmError::InvalidArgument("tolerance must be positive".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::ModelShape;
    use super::*;

    fn tiny() -> (Seq2SeqModel, Vec<f64>, Vec<f64>) {
        let shape = ModelShape {
            input_dim: 2,
            encoder_hidden: 3,
            decoder_hidden: 3,
            dense_hidden: 3,
            horizon: 2,
        };
        let m = Seq2SeqModel::init(&shape, 17).unwrap();
        let x: Vec<f64> = (0..8).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
        (m, x, vec![0.8, -0.6])
    }

    #[test]
    fn full_sweep_passes() {
        let (m, x, y) = tiny();
        let r = gradient_check(&m, &x, &y, &GradCheckOptions::default()).unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_error);
        assert_eq!(r.checked, m.params.num_params());
        assert!(r.max_rel_error < 1e-4);
    }

    #[test]
    fn mae_sweep_passes() {
        let (m, x, y) = tiny();
        let opts = GradCheckOptions {
            loss: Loss::Mae,
            ..Default::default()
        };
        assert!(gradient_check(&m, &x, &y, &opts).unwrap().passed);
    }

    #[test]
    fn corrupted_entry_is_reported() {
        let (m, x, y) = tiny();
        let (_, cache) = seq2seq_forward(&m, &x).unwrap();
        let mut g = backward(&m, &cache, &y, Loss::Mse).unwrap();
        // double the largest decoder U_f entry
        let k = Seq2SeqParams::tensor_names()
            .iter()
            .position(|n| n == "decoder.U_f")
            .unwrap();
        let mut tensors = g.tensors_mut();
        let t = &mut tensors[k];
        let idx = (0..t.len())
            .max_by(|&a, &b| t[a].abs().total_cmp(&t[b].abs()))
            .unwrap();
        t[idx] *= 2.0;
        let r = gradient_check_with(&m, &x, &y, &g, &GradCheckOptions::default()).unwrap();
        assert!(!r.passed);
        let worst = r.worst.unwrap();
        assert_eq!(worst.tensor, "decoder.U_f");
        assert_eq!(worst.index, idx);
    }

    #[test]
    fn sampled_coordinates() {
        let (m, x, y) = tiny();
        let opts = GradCheckOptions {
            coords_per_tensor: Some(2),
            ..Default::default()
        };
        let r = gradient_check(&m, &x, &y, &opts).unwrap();
        assert!(r.passed);
        assert!(r.checked < m.params.num_params());
    }

    #[test]
    fn zero_epsilon_rejected() {
        let (m, x, y) = tiny();
        let opts = GradCheckOptions {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            gradient_check(&m, &x, &y, &opts),
            Err(LstmError::InvalidArgument(_))
        ));
    }
}
