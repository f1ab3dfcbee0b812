use super::dense::sigmoid;
use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

fn check_labels(y: &Matrix, yhat: &Matrix) -> Result<()> {
    if y.shape() != yhat.shape() || y.cols() != 1 || y.rows() == 0 {
        return Err(Error::Dimension {
            op: "logloss",
            left: y.shape(),
            right: yhat.shape(),
        });
    }
    if let Some(bad) = y.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("label {bad} is not in {{0, 1}}")));
    }
    Ok(())
}

#[inline]
pub fn sample_logloss(y: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean binary cross-entropy over a `B × 1` batch.
pub fn logloss(y: &Matrix, yhat: &Matrix) -> Result<f64> {
    check_labels(y, yhat)?;
    let total: f64 = y
        .as_slice()
        .iter()
        .zip(yhat.as_slice())
        .map(|(&t, &p)| sample_logloss(t, p))
        .sum();
    Ok(total / y.rows() as f64)
}

/// Sigmoid followed by [`logloss`]; returns `(loss, probabilities, d loss / d logit)`
/// where the gradient is `(ŷ − y) / B` per sample.
pub fn sigmoid_logloss(y: &Matrix, logits: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    let mut probs = logits.clone();
    probs.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
    let loss = logloss(y, &probs)?;
    let b = y.rows() as f64;
    let grad = probs
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(p, t)| (p - t) / b)
        .collect();
    let grad = Matrix::from_vec(y.rows(), 1, grad)?;
    Ok((loss, probs, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let l = logloss(&Matrix::column(&[1.0]), &Matrix::column(&[0.5])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = logloss(&Matrix::column(&[1.0, 0.0]), &Matrix::column(&[0.9, 0.1])).unwrap();
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);
        let l = logloss(&Matrix::column(&[1.0]), &Matrix::column(&[1.0])).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn rejects_non_binary_labels() {
        let err = logloss(&Matrix::column(&[2.0]), &Matrix::column(&[0.5])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn permutation_invariant() {
        let y = Matrix::column(&[1.0, 0.0, 1.0]);
        let p = Matrix::column(&[0.2, 0.3, 0.9]);
        let a = logloss(&y, &p).unwrap();
        let b = logloss(&Matrix::column(&[1.0, 1.0, 0.0]), &Matrix::column(&[0.9, 0.2, 0.3])).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn fused_gradient() {
        let (_, p, g) = sigmoid_logloss(&Matrix::column(&[1.0, 0.0]), &Matrix::column(&[0.0, 0.0])).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        assert_eq!(g.as_slice(), &[-0.25, 0.25]);
    }
}
