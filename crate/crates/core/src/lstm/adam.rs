use alloc::vec;
use alloc::vec::Vec;

use super::train::TrainConfig;
use super::{Gradients, LstmError, Seq2SeqParams};

/// First and second moment estimates, one buffer per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(tensor_lens: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = tensor_lens
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_params(params: &Seq2SeqParams) -> Self {
        Self::new(params.tensors().iter().map(|t| t.len()))
    }

    /// One bias-corrected Adam update over parallel tensor lists. On a
    /// non-finite gradient nothing is modified and `(tensor, index)` is
    /// returned.
    pub fn update(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        config: &TrainConfig,
    ) -> Result<(), (usize, usize)> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        for (k, g) in grads.iter().enumerate() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err((k, i));
            }
        }
        self.step += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= config.learning_rate * m_hat / (libm::sqrt(v_hat) + config.adam_epsilon);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to all model tensors.
pub fn adam_step(
    params: &mut Seq2SeqParams,
    grads: &Gradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<(), LstmError> {
    let mut p = params.tensors_mut();
    let g = grads.tensors();
    state.update(&mut p, &g, config).map_err(|(k, index)| LstmError::NonFiniteGradient {
        tensor: Seq2SeqParams::tensor_names().swap_remove(k),
        index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_step_is_about_lr() {
        let c = cfg();
        for g in [1e-3, -0.5, 7.0] {
            let mut st = AdamState::new([1]);
            let mut p = [0.0];
            st.update(&mut [&mut p[..]], &[&[g][..]], &c).unwrap();
            let expected = c.learning_rate * g.abs() / (g.abs() + c.adam_epsilon);
            assert!((p[0].abs() - expected).abs() < 1e-15);
            assert!((p[0].abs() - c.learning_rate).abs() < 1e-6);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut st = AdamState::new([3]);
        let mut p = [1.0, -2.0, 3.0];
        st.update(&mut [&mut p[..]], &[&[0.0; 3][..]], &cfg()).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let c = TrainConfig {
            learning_rate: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new([2]);
        let mut p = [0.5, -1.0];
        let g1 = [0.2, -0.4];
        let g2 = [-0.1, 0.3];
        st.update(&mut [&mut p[..]], &[&g1[..]], &c).unwrap();
        st.update(&mut [&mut p[..]], &[&g2[..]], &c).unwrap();

        // hand computation, coordinate by coordinate
        let mut expect = [0.5, -1.0];
        for i in 0..2 {
            let m1 = 0.1 * g1[i];
            let v1 = 0.001 * g1[i] * g1[i];
            expect[i] -= 0.1 * (m1 / 0.1) / ((v1 / 0.001).sqrt() + 1e-8);
            let m2 = 0.9 * m1 + 0.1 * g2[i];
            let v2 = 0.999 * v1 + 0.001 * g2[i] * g2[i];
            let mh = m2 / (1.0 - 0.81);
            let vh = v2 / (1.0 - 0.999f64 * 0.999);
            expect[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - expect[0]).abs() < 1e-12);
        assert!((p[1] - expect[1]).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut st = AdamState::new([2, 2]);
        let mut a = [0.0, 0.0];
        let mut b = [0.0, 0.0];
        let err = st
            .update(&mut [&mut a[..], &mut b[..]], &[&[0.1, 0.1][..], &[0.1, f64::NAN][..]], &cfg())
            .unwrap_err();
        assert_eq!(err, (1, 1));
        assert_eq!(st.step, 0);
        assert_eq!(a, [0.0, 0.0]);
    }
}
