use super::constants::LOG_FLOOR;
use super::tensor::Tensor;
use crate::domain::ConfidenceVector;
use crate::error::{Error, Result};

/// Target distribution with `1 − s` on the true class and `s / (K − 1)` on
/// each of the others.
pub fn smoothed_target(true_class: usize, classes: usize, smoothing: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Range(format!("label smoothing {smoothing} outside [0,1)")));
    }
    if classes < 2 || true_class >= classes {
        return Err(Error::Range(format!(
            "class {true_class} invalid for {classes} classes"
        )));
    }
    let other = smoothing / (classes - 1) as f64;
    let mut t = vec![other; classes];
    t[true_class] = 1.0 - smoothing;
    Ok(t)
}

/// Batch of smoothed targets shaped `[labels.len(), classes]`.
pub fn target_batch(labels: &[usize], classes: usize, smoothing: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * classes);
    for &l in labels {
        data.extend(smoothed_target(l, classes, smoothing)?);
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// `−Σ t_k·log(max(p_k, 1e-12))` against the smoothed target of `true_class`.
pub fn cross_entropy_smoothed(pred: &ConfidenceVector, true_class: usize, smoothing: f64) -> Result<f64> {
    let t = smoothed_target(true_class, pred.class_count(), smoothing)?;
    Ok(-pred
        .probs()
        .iter()
        .zip(&t)
        .map(|(p, t)| t * p.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_outside_unit_interval_is_rejected() {
        assert!(matches!(smoothed_target(0, 6, 1.0), Err(Error::Range(_))));
        assert!(matches!(smoothed_target(0, 6, -0.1), Err(Error::Range(_))));
    }

    #[test]
    fn one_hot_prediction_has_zero_loss() {
        let p = ConfidenceVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy_smoothed(&p, 1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_log_k() {
        let p = ConfidenceVector::uniform(6);
        let loss = cross_entropy_smoothed(&p, 2, 0.1).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }
}
