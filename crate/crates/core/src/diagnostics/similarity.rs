use serde::{Deserialize, Serialize};

use crate::neurocore::{cholesky_solve, Matrix};
use crate::{Error, Result};

/// Ridge added to the standardized Gram matrix in each VIF regression.
pub const VIF_RIDGE: f64 = 1e-8;
pub const VIF_CAP: f64 = 1e6;

/// Linear CKA with a flag for zero-variance inputs (value 0 in that case).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cka {
    pub value: f64,
    pub degenerate: bool,
}

/// Centered linear CKA `‖aᵀb‖²_F / (‖aᵀa‖_F ‖bᵀb‖_F)`.
pub fn linear_cka(a: &Matrix, b: &Matrix) -> Cka {
    assert_eq!(a.rows(), b.rows(), "linear_cka needs equal row counts");
    let a = a.centered_columns();
    let b = b.centered_columns();
    let ab = a.t_matmul(&b).frobenius_norm();
    let aa = a.t_matmul(&a).frobenius_norm();
    let bb = b.t_matmul(&b).frobenius_norm();
    let denom = aa * bb;
    if !(denom > 1e-300) {
        return Cka {
            value: 0.0,
            degenerate: true,
        };
    }
    Cka {
        value: (ab * ab / denom).clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// Mean variance inflation factor over the non-constant columns of `rep`.
///
/// Each column is regressed on the others after standardization, with a small
/// ridge; `VIF_j = 1 / (1 − R²_j)` capped at [`VIF_CAP`]. Returns 1 when fewer
/// than two columns vary.
pub fn vif_mean(rep: &Matrix) -> Result<f64> {
    let (n, p) = rep.shape();
    if n <= p {
        return Err(Error::input(format!(
            "VIF needs more samples than features ({n} <= {p})"
        )));
    }
    let stds = rep.column_stds();
    let live: Vec<usize> = (0..p).filter(|&j| stds[j] > 1e-12).collect();
    if live.len() < 2 {
        return Ok(1.0);
    }
    let centered = rep.centered_columns();
    let z = Matrix::from_fn(n, live.len(), |r, c| {
        centered.get(r, live[c]) / (stds[live[c]] * (n as f64).sqrt())
    });
    // Correlation matrix: unit diagonal, so R²_j = gᵀβ with β = (G₋ⱼ + εI)⁻¹ g.
    let corr = z.t_matmul(&z);
    let k = live.len();
    let mut total = 0.0;
    for j in 0..k {
        let others: Vec<usize> = (0..k).filter(|&c| c != j).collect();
        let g: Vec<f64> = others.iter().map(|&c| corr.get(c, j)).collect();
        let sub = Matrix::from_fn(k - 1, k - 1, |a, b| {
            corr.get(others[a], others[b]) + if a == b { VIF_RIDGE } else { 0.0 }
        });
        let vif = match cholesky_solve(&sub, &g) {
            Ok(beta) => {
                let quad: f64 = (0..k - 1)
                    .map(|a| beta[a] * (0..k - 1).map(|b| sub.get(a, b) * beta[b]).sum::<f64>())
                    .sum();
                let explained: f64 = g.iter().zip(&beta).map(|(x, y)| x * y).sum();
                let ridge_term = VIF_RIDGE * beta.iter().map(|b| b * b).sum::<f64>();
                let ss_res = (1.0 - 2.0 * explained + quad - ridge_term).max(0.0);
                if ss_res <= 1.0 / VIF_CAP {
                    VIF_CAP
                } else {
                    (1.0 / ss_res).clamp(1.0, VIF_CAP)
                }
            }
            Err(_) => VIF_CAP,
        };
        total += vif;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neurocore::RandomStream;

    fn random(n: usize, p: usize, seed: u64) -> Matrix {
        let mut s = RandomStream::new(seed);
        Matrix::from_fn(n, p, |_, _| s.normal())
    }

    #[test]
    fn cka_self_is_one_and_symmetric() {
        let a = random(200, 6, 1);
        let b = random(200, 4, 2);
        assert!((linear_cka(&a, &a).value - 1.0).abs() < 1e-12);
        assert!((linear_cka(&a, &b).value - linear_cka(&b, &a).value).abs() < 1e-12);
    }

    #[test]
    fn cka_null_distribution_is_small() {
        let a = random(1000, 16, 3);
        let b = random(1000, 16, 4);
        assert!(linear_cka(&a, &b).value < 0.1);
    }

    #[test]
    fn cka_zero_variance_is_flagged() {
        let a = Matrix::zeros(10, 3);
        let c = linear_cka(&a, &random(10, 3, 1));
        assert!(c.degenerate);
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn vif_independent_columns_near_one() {
        let v = vif_mean(&random(2000, 8, 5)).unwrap();
        assert!((1.0..=1.2).contains(&v), "{v}");
    }

    #[test]
    fn vif_duplicate_column_hits_cap() {
        let a = random(500, 4, 6);
        let dup = Matrix::hstack(&[&a, &a.columns(0..1)]).unwrap();
        assert!(vif_mean(&dup).unwrap() > VIF_CAP * 0.3);
    }

    #[test]
    fn vif_matches_ols_oracle() {
        // Two columns with correlation rho: VIF = 1 / (1 − rho²) for both.
        let mut s = RandomStream::new(7);
        let n = 5000;
        let x = Matrix::from_fn(n, 2, |_, _| s.normal());
        let y = Matrix::from_fn(n, 2, |r, c| if c == 0 { x.get(r, 0) } else { 0.6 * x.get(r, 0) + 0.8 * x.get(r, 1) });
        let z = y.centered_columns();
        let sd = y.column_stds();
        let rho = (0..n).map(|r| z.get(r, 0) * z.get(r, 1)).sum::<f64>() / (n as f64 * sd[0] * sd[1]);
        let want = 1.0 / (1.0 - rho * rho);
        assert!((vif_mean(&y).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn vif_rejects_wide_input() {
        assert!(matches!(vif_mean(&random(4, 4, 1)), Err(Error::Input(_))));
    }
}
