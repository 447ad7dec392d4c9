//! Losses returning `(value, gradient)` pairs.

use super::matrix::{dot, norm, Matrix};
use crate::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row cross-entropy of `logits` against class indices.
pub fn per_sample_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[labels[r]]
        })
        .collect())
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let losses = per_sample_cross_entropy(logits, labels)?;
    let n = logits.rows() as f64;
    let loss = losses.iter().sum::<f64>() / n;
    let mut grad = softmax(logits);
    for (r, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    Ok((loss, grad))
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::input(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::input("cross-entropy over an empty batch"));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::input(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean `1 − cos(a_r, b_r)` over rows, with gradients for both arguments.
///
/// Rows with a vanishing norm contribute a loss of one and no gradient.
pub fn cosine_alignment(a: &Matrix, b: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::config(format!(
            "cosine alignment needs equal non-empty shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.rows() as f64;
    let mut loss = 0.0;
    let mut ga = Matrix::zeros(a.rows(), a.cols());
    let mut gb = Matrix::zeros(b.rows(), b.cols());
    for r in 0..a.rows() {
        let (x, y) = (a.row(r), b.row(r));
        let (nx, ny) = (norm(x), norm(y));
        if nx < 1e-12 || ny < 1e-12 {
            loss += 1.0;
            continue;
        }
        let c = dot(x, y) / (nx * ny);
        loss += 1.0 - c;
        // ∂cos/∂x = y/(|x||y|) − cos·x/|x|²
        for (k, g) in ga.row_mut(r).iter_mut().enumerate() {
            *g = -(y[k] / (nx * ny) - c * x[k] / (nx * nx)) / n;
        }
        for (k, g) in gb.row_mut(r).iter_mut().enumerate() {
            *g = -(x[k] / (nx * ny) - c * y[k] / (ny * ny)) / n;
        }
    }
    Ok((loss / n, ga, gb))
}

/// Mean cosine between matching rows.
pub fn mean_row_cosine(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    if a.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..a.rows())
        .map(|r| {
            let (x, y) = (a.row(r), b.row(r));
            let d = norm(x) * norm(y);
            if d == 0.0 {
                0.0
            } else {
                dot(x, y) / d
            }
        })
        .sum();
    total / a.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Matrix::zeros(3, 5);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_true_class_gives_zero_loss() {
        let logits = Matrix::new(1, 3, vec![1e3, 0.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = Matrix::new(1, 2, vec![1e300, -1e300]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.is_finite() && grad.is_finite());
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn aligned_rows_have_zero_alignment_loss() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let (loss, ga, _) = cosine_alignment(&a, &a.scale(2.0)).unwrap();
        assert!(loss.abs() < 1e-14);
        assert!(ga.data().iter().all(|g| g.abs() < 1e-14));
    }
}
