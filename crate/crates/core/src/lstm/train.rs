use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::backprop::{accumulate, forward_for_training, loss_value};
use super::{LstmError, Seq2SeqModel};
use crate::timeseries::WindowSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    #[default]
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            loss: Loss::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LstmError> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LstmError::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) {
            return Err(LstmError::InvalidArgument("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(LstmError::InvalidArgument("adam_epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(LstmError::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's forward passes.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Mean per-sample loss of `model` on `set` (model units).
pub fn evaluate(model: &Seq2SeqModel, set: &WindowSet, loss: super::train::Loss) -> Result<f64, LstmError> {
    if set.is_empty() {
        return Err(LstmError::EmptyTrainingSet);
    }
    let mut total = 0.0;
    for i in 0..set.len() {
        let cache = forward_for_training(&model.params, model.horizon, set.input(i))?;
        total += loss_value(cache.prediction(), set.target(i), loss);
    }
    Ok(total / set.len() as f64)
}

/// Mini-batch Adam training on windows already in model units.
///
/// Samples are visited in a seeded shuffle each epoch and gradients are
/// summed in that order, so results are reproducible bit for bit. When `val`
/// is non-empty the parameters with the lowest validation loss are returned.
pub fn train(
    mut model: Seq2SeqModel,
    train: &WindowSet,
    val: &WindowSet,
    config: &TrainConfig,
) -> Result<(Seq2SeqModel, Vec<EpochStats>), LstmError> {
    config.validate()?;
    let mut history = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok((model, history));
    }
    if train.is_empty() {
        return Err(LstmError::EmptyTrainingSet);
    }
    let shape_ok = |w: &WindowSet| {
        w.is_empty() || (w.n_features == model.input_dim() && w.horizon == model.horizon)
    };
    if !shape_ok(train) || !shape_ok(val) {
        return Err(LstmError::ShapeMismatch(format!(
            "windows ({} features, horizon {}) do not fit model ({} inputs, horizon {})",
            train.n_features,
            train.horizon,
            model.input_dim(),
            model.horizon
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::for_params(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, super::Seq2SeqParams)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.params.zeros_like();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let cache = forward_for_training(&model.params, model.horizon, train.input(i))?;
                epoch_loss += loss_value(cache.prediction(), train.target(i), config.loss);
                accumulate(&model.params, &cache, train.target(i), config.loss, weight, &mut grads);
            }
            adam_step(&mut model.params, &grads, &mut adam, config)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(LstmError::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            let v = evaluate(&model, val, config.loss)?;
            if !v.is_finite() {
                return Err(LstmError::Diverged { epoch, loss: v });
            }
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
            }
            Some(v)
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}
