//! Forward pass with cache and backpropagation through time.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::cell::StepState;
use super::train::Loss;
use super::{Gradients, LstmError, LstmLayerParams, Seq2SeqModel, Seq2SeqParams};

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    inputs: Vec<f64>,
    encoder: Vec<StepState>,
    decoder: Vec<StepState>,
    /// Per decoder step output of `head_hidden`.
    head_z: Vec<Vec<f64>>,
    prediction: Vec<f64>,
}

impl ForwardCache {
    pub fn prediction(&self) -> &[f64] {
        &self.prediction
    }

    /// Final encoder hidden state, repeated as the decoder input.
    pub fn context(&self) -> &[f64] {
        &self.encoder.last().expect("non-empty input").h
    }
}

fn check_input(params: &Seq2SeqParams, input: &[f64]) -> Result<usize, LstmError> {
    let d = params.encoder.input_dim;
    if input.is_empty() || input.len() % d != 0 {
        return Err(LstmError::ShapeMismatch(format!(
            "input length {} is not a positive multiple of input_dim {d}",
            input.len()
        )));
    }
    if let Some(bad) = input.iter().position(|x| !x.is_finite()) {
        return Err(LstmError::InvalidArgument(format!("non-finite input at {bad}")));
    }
    Ok(input.len() / d)
}

fn run_layer(p: &LstmLayerParams, xs: impl Iterator<Item = impl AsRef<[f64]>>) -> Vec<StepState> {
    let n = p.hidden_dim;
    let zeros = vec![0.0; n];
    let mut steps: Vec<StepState> = Vec::new();
    for x in xs {
        let mut s = StepState::new(n);
        let (h_prev, c_prev) = match steps.last() {
            Some(prev) => (prev.h.as_slice(), prev.c.as_slice()),
            None => (zeros.as_slice(), zeros.as_slice()),
        };
        s.run(p, x.as_ref(), h_prev, c_prev);
        steps.push(s);
    }
    steps
}

fn forward_impl(params: &Seq2SeqParams, horizon: usize, input: &[f64]) -> Result<ForwardCache, LstmError> {
    let d = params.encoder.input_dim;
    check_input(params, input)?;
    let encoder = run_layer(&params.encoder, input.chunks(d));
    let context = encoder.last().expect("checked non-empty").h.clone();
    let decoder = run_layer(&params.decoder, (0..horizon).map(|_| context.as_slice()));
    let mut head_z = Vec::with_capacity(horizon);
    let mut prediction = Vec::with_capacity(horizon);
    for step in &decoder {
        let z = params.head_hidden.forward(&step.h);
        prediction.push(params.head_out.forward(&z)[0]);
        head_z.push(z);
    }
    Ok(ForwardCache {
        fingerprint: 0,
        inputs: input.to_vec(),
        encoder,
        decoder,
        head_z,
        prediction,
    })
}

pub(crate) fn predict_scaled(params: &Seq2SeqParams, horizon: usize, input: &[f64]) -> Result<Vec<f64>, LstmError> {
    Ok(forward_impl(params, horizon, input)?.prediction)
}

/// Runs the network on an `L × d` row-major input in model (scaled) units and
/// returns the `H` outputs together with the cache needed by [`backward`].
pub fn seq2seq_forward(model: &Seq2SeqModel, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), LstmError> {
    let mut cache = forward_impl(&model.params, model.horizon, input)?;
    cache.fingerprint = model.params.fingerprint();
    Ok((cache.prediction.clone(), cache))
}

pub(crate) fn forward_for_training(params: &Seq2SeqParams, horizon: usize, input: &[f64]) -> Result<ForwardCache, LstmError> {
    forward_impl(params, horizon, input)
}

/// Per-sample loss, averaged over the horizon.
pub fn loss_value(prediction: &[f64], target: &[f64], loss: Loss) -> f64 {
    let h = prediction.len() as f64;
    let it = prediction.iter().zip(target);
    match loss {
        Loss::Mse => it.map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / h,
        Loss::Mae => it.map(|(p, t)| (p - t).abs()).sum::<f64>() / h,
    }
}

fn loss_grad(p: f64, t: f64, h: f64, loss: Loss) -> f64 {
    match loss {
        Loss::Mse => 2.0 * (p - t) / h,
        Loss::Mae => {
            if p > t {
                1.0 / h
            } else if p < t {
                -1.0 / h
            } else {
                0.0
            }
        }
    }
}

/// Exact gradient of the per-sample loss with respect to every parameter.
pub fn backward(model: &Seq2SeqModel, cache: &ForwardCache, target: &[f64], loss: Loss) -> Result<Gradients, LstmError> {
    if cache.fingerprint != model.params.fingerprint() {
        return Err(LstmError::StaleCache);
    }
    if target.len() != model.horizon {
        return Err(LstmError::ShapeMismatch(format!(
            "target has {} steps, model horizon is {}",
            target.len(),
            model.horizon
        )));
    }
    let mut grads = model.params.zeros_like();
    accumulate(&model.params, cache, target, loss, 1.0, &mut grads);
    Ok(grads)
}

/// Adds `weight · ∂loss/∂θ` into `grads`.
pub(crate) fn accumulate(
    params: &Seq2SeqParams,
    cache: &ForwardCache,
    target: &[f64],
    loss: Loss,
    weight: f64,
    grads: &mut Gradients,
) {
    let horizon = cache.prediction.len();
    let h = horizon as f64;
    let dec_n = params.decoder.hidden_dim;

    // time-distributed head
    let mut dh_dec = vec![vec![0.0; dec_n]; horizon];
    for t in 0..horizon {
        let dy = weight * loss_grad(cache.prediction[t], target[t], h, loss);
        if dy == 0.0 {
            continue;
        }
        grads.head_out.weight.add_outer(&[dy], &cache.head_z[t]);
        grads.head_out.bias[0] += dy;
        let mut dz = vec![0.0; params.head_hidden.output_dim()];
        params.head_out.weight.matvec_t_acc(&[dy], &mut dz);
        grads.head_hidden.weight.add_outer(&dz, &cache.decoder[t].h);
        for (b, g) in grads.head_hidden.bias.iter_mut().zip(&dz) {
            *b += g;
        }
        params.head_hidden.weight.matvec_t_acc(&dz, &mut dh_dec[t]);
    }

    // decoder; every step reads the same context vector
    let context = cache.context();
    let mut d_context = vec![0.0; params.encoder.hidden_dim];
    layer_backward(
        &params.decoder,
        &mut grads.decoder,
        |_| context,
        &cache.decoder,
        |t, dh| {
            for (a, b) in dh.iter_mut().zip(&dh_dec[t]) {
                *a += b;
            }
        },
        Some(&mut d_context),
    );

    // encoder; only its final hidden state feeds forward
    let d = params.encoder.input_dim;
    let last = cache.encoder.len() - 1;
    layer_backward(
        &params.encoder,
        &mut grads.encoder,
        |t| &cache.inputs[t * d..(t + 1) * d],
        &cache.encoder,
        |t, dh| {
            if t == last {
                for (a, b) in dh.iter_mut().zip(&d_context) {
                    *a += b;
                }
            }
        },
        None,
    );
}

/// Backpropagation through one unrolled layer. `add_external(t, dh)` adds the
/// gradient arriving at `h_t` from outside the recurrence; when `dx_sum` is
/// given, input gradients of all steps are summed into it.
fn layer_backward<'a>(
    p: &LstmLayerParams,
    g: &mut LstmLayerParams,
    input_at: impl Fn(usize) -> &'a [f64],
    steps: &[StepState],
    add_external: impl Fn(usize, &mut [f64]),
    mut dx_sum: Option<&mut Vec<f64>>,
) {
    let n = p.hidden_dim;
    let zeros = vec![0.0; n];
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut da = vec![0.0; 4 * n];
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let (h_prev, c_prev) = if t == 0 {
            (zeros.as_slice(), zeros.as_slice())
        } else {
            (steps[t - 1].h.as_slice(), steps[t - 1].c.as_slice())
        };
        let mut dh = core::mem::replace(&mut dh_next, vec![0.0; n]);
        add_external(t, &mut dh);
        let (gi, gf, go, gg) = (
            &s.gates[..n],
            &s.gates[n..2 * n],
            &s.gates[2 * n..3 * n],
            &s.gates[3 * n..],
        );
        for j in 0..n {
            let tc = s.tanh_c[j];
            let dc = dc_next[j] + dh[j] * go[j] * (1.0 - tc * tc);
            let d_o = dh[j] * tc;
            let d_i = dc * gg[j];
            let d_g = dc * gi[j];
            let d_f = dc * c_prev[j];
            da[j] = d_i * gi[j] * (1.0 - gi[j]);
            da[n + j] = d_f * gf[j] * (1.0 - gf[j]);
            da[2 * n + j] = d_o * go[j] * (1.0 - go[j]);
            da[3 * n + j] = d_g * (1.0 - gg[j] * gg[j]);
            dc_next[j] = dc * gf[j];
        }
        let x = input_at(t);
        for k in 0..4 {
            let dak = &da[k * n..(k + 1) * n];
            g.w[k].add_outer(dak, x);
            g.u[k].add_outer(dak, h_prev);
            for (b, v) in g.b[k].iter_mut().zip(dak) {
                *b += v;
            }
            p.u[k].matvec_t_acc(dak, &mut dh_next);
            if let Some(dx) = dx_sum.as_deref_mut() {
                p.w[k].matvec_t_acc(dak, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ModelShape, Seq2SeqModel};
    use super::*;

    fn shape() -> ModelShape {
        ModelShape {
            input_dim: 2,
            encoder_hidden: 3,
            decoder_hidden: 4,
            dense_hidden: 3,
            horizon: 4,
        }
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = Seq2SeqModel::zeros(&shape()).unwrap();
        let (pred, _) = seq2seq_forward(&m, &[0.3, -1.0, 2.0, 5.0, 1.0, 1.0]).unwrap();
        assert_eq!(pred, vec![0.0; 4]);
    }

    #[test]
    fn horizon_one_gives_scalar() {
        let mut s = shape();
        s.horizon = 1;
        let m = Seq2SeqModel::init(&s, 9).unwrap();
        let (pred, _) = seq2seq_forward(&m, &[0.1, 0.2]).unwrap();
        assert_eq!(pred.len(), 1);
    }

    #[test]
    fn zero_gradient_at_minimum() {
        let m = Seq2SeqModel::init(&shape(), 5).unwrap();
        let x = [0.1, 0.9, -0.4, 0.3, 0.7, -0.2];
        let (pred, cache) = seq2seq_forward(&m, &x).unwrap();
        let g = backward(&m, &cache, &pred, Loss::Mse).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn output_bias_gradient_is_mean_residual() {
        let m = Seq2SeqModel::init(&shape(), 11).unwrap();
        let x = [0.5, -0.5, 0.25, 1.0];
        let target = [1.0, -1.0, 0.5, 2.0];
        let (pred, cache) = seq2seq_forward(&m, &x).unwrap();
        let g = backward(&m, &cache, &target, Loss::Mse).unwrap();
        let expected: f64 = pred.iter().zip(&target).map(|(p, t)| 2.0 / 4.0 * (p - t)).sum();
        assert!((g.head_out.bias[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn stale_cache_detected() {
        let mut m = Seq2SeqModel::init(&shape(), 2).unwrap();
        let (_, cache) = seq2seq_forward(&m, &[1.0, 2.0]).unwrap();
        m.params.head_out.bias[0] += 1e-3;
        assert_eq!(
            backward(&m, &cache, &[0.0; 4], Loss::Mse).unwrap_err(),
            LstmError::StaleCache
        );
    }

    #[test]
    fn input_shape_errors() {
        let m = Seq2SeqModel::init(&shape(), 2).unwrap();
        assert!(matches!(seq2seq_forward(&m, &[1.0, 2.0, 3.0]), Err(LstmError::ShapeMismatch(_))));
        assert!(matches!(seq2seq_forward(&m, &[]), Err(LstmError::ShapeMismatch(_))));
        assert!(matches!(seq2seq_forward(&m, &[f64::NAN, 0.0]), Err(LstmError::InvalidArgument(_))));
    }
}
