use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{LstmError, LstmLayerParams};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// One LSTM step:
/// `i, f, o = σ(W x + U h + b)`, `g = tanh(W_g x + U_g h + b_g)`,
/// `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_cell_forward(
    params: &LstmLayerParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), LstmError> {
    let n = params.hidden_dim;
    if x.len() != params.input_dim || h_prev.len() != n || c_prev.len() != n {
        return Err(LstmError::ShapeMismatch(format!(
            "cell expects x[{}], h[{n}], c[{n}]; got x[{}], h[{}], c[{}]",
            params.input_dim,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut step = StepState::new(n);
    step.run(params, x, h_prev, c_prev);
    Ok((step.h, step.c))
}

/// Everything one step produces that backpropagation needs.
#[derive(Debug, Clone)]
pub(crate) struct StepState {
    /// Post-activation gates, `[i | f | o | g]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl StepState {
    pub fn new(n: usize) -> Self {
        Self {
            gates: vec![0.0; 4 * n],
            c: vec![0.0; n],
            tanh_c: vec![0.0; n],
            h: vec![0.0; n],
        }
    }

    pub fn run(&mut self, p: &LstmLayerParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) {
        let n = p.hidden_dim;
        for k in 0..4 {
            let pre = &mut self.gates[k * n..(k + 1) * n];
            pre.copy_from_slice(&p.b[k]);
            p.w[k].matvec_acc(x, pre);
            p.u[k].matvec_acc(h_prev, pre);
            if k == 3 {
                pre.iter_mut().for_each(|a| *a = libm::tanh(*a));
            } else {
                pre.iter_mut().for_each(|a| *a = sigmoid(*a));
            }
        }
        let (ifo, g) = self.gates.split_at(3 * n);
        for j in 0..n {
            let (i, f, o) = (ifo[j], ifo[n + j], ifo[2 * n + j]);
            self.c[j] = f * c_prev[j] + i * g[j];
            self.tanh_c[j] = libm::tanh(self.c[j]);
            self.h[j] = o * self.tanh_c[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_zero_state() {
        let p = LstmLayerParams::zeros(3, 4);
        let (h, c) = lstm_cell_forward(&p, &[1.0, -2.0, 0.5], &[0.3; 4], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn cell_bias_sets_candidate() {
        let mut p = LstmLayerParams::zeros(2, 3);
        p.b[3].fill(5.0);
        let (h, c) = lstm_cell_forward(&p, &[0.0; 2], &[0.0; 3], &[0.0; 3]).unwrap();
        for j in 0..3 {
            assert!((c[j] - 0.5 * 5.0f64.tanh()).abs() < 1e-15);
            assert!((h[j] - 0.5 * c[j].tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let p = LstmLayerParams::zeros(2, 3);
        assert!(lstm_cell_forward(&p, &[0.0; 3], &[0.0; 3], &[0.0; 3]).is_err());
        assert!(lstm_cell_forward(&p, &[0.0; 2], &[0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
