//! Deterministic dense decompositions: one-sided Jacobi SVD, cyclic Jacobi
//! symmetric eigensolver, Cholesky solves and Gram–Schmidt.

use super::matrix::{dot, Matrix};
use crate::{Error, Result};

/// Default relative threshold for [`effective_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-3;

const MAX_SWEEPS: usize = 60;

/// Aspect ratio from which singular values come from the Gram matrix.
const GRAM_ASPECT: usize = 4;

/// Singular values in non-increasing order (one-sided Jacobi).
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::input("singular values of a non-finite matrix"));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(Vec::new());
    }
    // Very tall or wide inputs go through the small Gram matrix; its
    // eigenvalues are the squared singular values.
    let (short, long) = (m.rows().min(m.cols()), m.rows().max(m.cols()));
    if long >= GRAM_ASPECT * short {
        let g = if m.rows() >= m.cols() { m.t_matmul(m) } else { m.matmul_t(m) };
        let (vals, _) = symmetric_eigen(&g)?;
        return Ok(vals.into_iter().map(|v| v.max(0.0).sqrt()).collect());
    }
    // Work on columns of the taller orientation so at most min(rows, cols) columns rotate.
    let a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = a.shape();
    // Column-major copy: each column contiguous.
    let mut colsv: Vec<Vec<f64>> = (0..cols).map(|c| a.column(c)).collect();
    let eps = f64::EPSILON;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let alpha = dot(&colsv[i], &colsv[i]);
                let beta = dot(&colsv[j], &colsv[j]);
                let gamma = dot(&colsv[i], &colsv[j]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = colsv.split_at_mut(j);
                let (ci, cj) = (&mut lo[i], &mut hi[0]);
                for k in 0..rows {
                    let (x, y) = (ci[k], cj[k]);
                    ci[k] = c * x - s * y;
                    cj[k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = colsv.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values `≥ rel_tol · σ_max`; zero for the zero matrix.
///
/// Panics unless `0 < rel_tol < 1` or when `m` holds non-finite entries.
pub fn effective_rank(m: &Matrix, rel_tol: f64) -> usize {
    assert!(
        rel_tol > 0.0 && rel_tol < 1.0,
        "rel_tol must lie in (0, 1), got {rel_tol}"
    );
    let sv = singular_values(m).expect("effective_rank requires finite entries");
    rank_from_spectrum(&sv, rel_tol)
}

pub fn rank_from_spectrum(sv: &[f64], rel_tol: f64) -> usize {
    let max = sv.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s >= rel_tol * max).count()
}

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are returned in
/// non-increasing order; eigenvectors are the matching columns of the matrix.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::config("symmetric_eigen needs a square matrix"));
    }
    if !m.is_finite() {
        return Err(Error::input("symmetric_eigen of a non-finite matrix"));
    }
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j) * a.get(i, j))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok((values, vectors))
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::config("cholesky_solve: shape mismatch"));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::input("matrix is not positive definite"));
                }
                l.set(i, i, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    Ok(x)
}

/// Orthonormalizes `vectors` (modified Gram–Schmidt), dropping those whose
/// residual norm falls below `tol`. Returned as columns of a `dim × k` matrix.
pub fn orthonormal_basis(vectors: &[Vec<f64>], tol: f64) -> Result<Matrix> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::config("basis vectors differ in length"));
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&w, b);
                for (x, y) in w.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = dot(&w, &w).sqrt();
        if n > tol {
            basis.push(w.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(Matrix::from_fn(dim, basis.len(), |r, c| basis[c][r]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurocore::RandomStream;

    #[test]
    fn identity_singular_values() {
        assert_eq!(singular_values(&Matrix::identity(3)).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0];
        let m = Matrix::from_fn(3, 4, |r, c| u[r] * v[c]);
        let sv = singular_values(&m).unwrap();
        assert!((sv[0] - 1.0).abs() < 1e-14);
        assert!(sv[1..].iter().all(|s| s.abs() < 1e-14));
    }

    #[test]
    fn non_finite_rejected() {
        let m = Matrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(singular_values(&m), Err(Error::Input(_))));
    }

    #[test]
    fn effective_rank_cases() {
        assert_eq!(effective_rank(&Matrix::identity(4), 1e-3), 4);
        assert_eq!(effective_rank(&Matrix::identity(4), 0.9), 4);
        assert_eq!(effective_rank(&Matrix::diag(&[1.0, 1e-6]), 1e-3), 1);
        assert_eq!(effective_rank(&Matrix::zeros(3, 5), 1e-3), 0);
    }

    #[test]
    fn eigen_reconstructs() {
        let mut s = RandomStream::new(4);
        let b = Matrix::from_fn(6, 5, |_, _| s.normal());
        let a = b.t_matmul(&b);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let rebuilt = vecs.matmul(&Matrix::diag(&vals)).matmul_t(&vecs);
        assert!(rebuilt.max_abs_diff(&a) < 1e-10);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cholesky_matches_known_solution() {
        let a = Matrix::new(2, 2, vec![4.0, 2.0, 2.0, 3.0]).unwrap();
        let x = cholesky_solve(&a, &[2.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14 && x[1].abs() < 1e-14);
    }

    #[test]
    fn gram_schmidt_drops_dependent_vectors() {
        let b = orthonormal_basis(&[vec![1.0, 1.0, 0.0], vec![2.0, 2.0, 0.0], vec![0.0, 1.0, 0.0]], 1e-10)
            .unwrap();
        assert_eq!(b.cols(), 2);
        let g = b.t_matmul(&b);
        assert!(g.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }
}
