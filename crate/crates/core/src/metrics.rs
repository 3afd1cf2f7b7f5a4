use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("metric needs at least one value")]
    Empty,
    #[error("length mismatch: {pred} predictions vs {target} targets")]
    LengthMismatch { pred: usize, target: usize },
}

fn check(pred: &[f64], target: &[f64]) -> Result<(), MetricError> {
    if pred.len() != target.len() {
        return Err(MetricError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check(pred, target)?;
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(libm::sqrt(sse / pred.len() as f64))
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, MetricError> {
    check(pred, target)?;
    let sae: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sae / pred.len() as f64)
}
