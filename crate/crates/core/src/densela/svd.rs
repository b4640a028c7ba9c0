//! One-sided (Hestenes) Jacobi SVD for tall matrices, plus completion of the
//! thin left basis to a full orthonormal basis of the output space.

use super::Matrix;
use crate::error::{contract, Error, Result};

const MAX_SWEEPS: usize = 80;

/// Full SVD factors of an `m×n` matrix with `m ≥ n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// Thin left singular vectors, `m×n`.
    pub u: Matrix,
    /// Orthonormal complement of `u`, `m×(m−n)`; `None` when `m == n`.
    pub u2: Option<Matrix>,
    /// Singular values, non-increasing.
    pub sigma: Vec<f64>,
    /// Right singular vectors, `n×n`.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    /// `U·diag(σ)·Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }

    /// Best rank-`k` approximation `U_k Σ_k V_kᵀ`.
    pub fn rank_k(&self, k: usize) -> Matrix {
        let mut out = Matrix::zeros(self.m(), self.n());
        for c in 0..k.min(self.n()) {
            for i in 0..self.m() {
                let us = self.u[(i, c)] * self.sigma[c];
                for j in 0..self.n() {
                    out[(i, j)] += us * self.v[(j, c)];
                }
            }
        }
        out
    }

    /// Largest orthogonality residual among `UᵀU`, `U2ᵀU2`, `UᵀU2` and `VᵀV`.
    pub fn orthogonality_residual(&self) -> f64 {
        let mut worst = self.u.orthogonality_residual().max(self.v.orthogonality_residual());
        if let Some(u2) = &self.u2 {
            worst = worst
                .max(u2.orthogonality_residual())
                .max(self.u.t_matmul(u2).frobenius_norm());
        }
        worst
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yi) = (*x, *y);
        *x = c * xi - s * yi;
        *y = s * xi + c * yi;
    }
}

/// Full SVD of `w` (`m ≥ n`), including the orthonormal complement of `U`.
///
/// Sign convention: the largest-magnitude entry of each column of `V` is
/// non-negative (ties go to the lowest row index) and `U` follows `V`.
pub fn svd_full(w: &Matrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if m < n {
        return contract(format!("svd_full requires rows >= cols, got {m}x{n}; transpose first"));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite(format!("svd_full input ({m}x{n})")));
    }

    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| w.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * m as f64;

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(j);
                rotate(&mut lo[i], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { rows: m, cols: n, sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in original column order.
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let negligible = sigma_max * f64::EPSILON * n as f64;

    let mut v_cols: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .zip(&sigma)
        .map(|(&j, &s)| {
            (s > negligible && s > 0.0).then(|| a[j].iter().map(|x| x / s).collect())
        })
        .collect();

    // Rank-deficient directions get arbitrary orthonormal completions.
    let known: Vec<Vec<f64>> = u_cols.iter().flatten().cloned().collect();
    let missing = u_cols.iter().filter(|c| c.is_none()).count();
    let mut fill = complete_basis(&known, m, missing).into_iter();
    for c in u_cols.iter_mut().filter(|c| c.is_none()) {
        *c = fill.next();
    }
    let mut u_cols: Vec<Vec<f64>> = u_cols.into_iter().map(|c| c.expect("filled")).collect();

    for (vc, uc) in v_cols.iter_mut().zip(u_cols.iter_mut()) {
        let mut pivot = 0;
        for (i, x) in vc.iter().enumerate() {
            if x.abs() > vc[pivot].abs() {
                pivot = i;
            }
        }
        if vc[pivot] < 0.0 {
            vc.iter_mut().for_each(|x| *x = -*x);
            uc.iter_mut().for_each(|x| *x = -*x);
        }
    }

    let u2 = (m > n).then(|| {
        let cols = complete_basis(&u_cols, m, m - n);
        columns_to_matrix(&cols, m)
    });

    Ok(SvdFactors { u: columns_to_matrix(&u_cols, m), u2, sigma, v: columns_to_matrix(&v_cols, n) })
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// Extends the orthonormal set `basis` (vectors of length `dim`) by `count`
/// further orthonormal vectors, greedily picking the coordinate axis with the
/// largest residual and orthogonalizing twice (classical Gram–Schmidt, re-run).
pub(crate) fn complete_basis(basis: &[Vec<f64>], dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut all: Vec<Vec<f64>> = basis.to_vec();
    let mut added = Vec::with_capacity(count);
    let mut used = vec![false; dim];
    for _ in 0..count {
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for axis in (0..dim).filter(|&a| !used[a]) {
            let mut r = vec![0.0; dim];
            r[axis] = 1.0;
            for _ in 0..2 {
                for q in &all {
                    let p = dot(q, &r);
                    r.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
                }
            }
            let norm = dot(&r, &r).sqrt();
            if best.as_ref().is_none_or(|b| norm > b.2) {
                best = Some((axis, r, norm));
            }
        }
        let (axis, mut r, norm) = best.expect("basis already spans the space");
        used[axis] = true;
        r.iter_mut().for_each(|x| *x /= norm);
        all.push(r.clone());
        added.push(r);
    }
    added
}

/// Frobenius error of the best rank-`k` approximation: `sqrt(Σ_{i>k} σ_i²)`.
pub fn truncation_error(sigma: &[f64], k: usize) -> Result<f64> {
    if k > sigma.len() {
        return contract(format!("truncation rank {k} exceeds {} singular values", sigma.len()));
    }
    Ok(sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let f = svd_full(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0, 1.0]);
        assert_eq!(f.u, Matrix::identity(3));
        assert_eq!(f.v, Matrix::identity(3));
        assert!(f.u2.is_none());
    }

    #[test]
    fn unsorted_diagonal_is_sorted_with_signs_fixed() {
        let w = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -5.0], &[0.0, 0.0]]);
        let f = svd_full(&w).unwrap();
        assert_eq!(f.sigma, vec![5.0, 1.0]);
        // V's largest entry per column is non-negative; U absorbs the sign.
        assert_eq!(f.v[(1, 0)], 1.0);
        assert_eq!(f.u[(1, 0)], -1.0);
        assert!(f.reconstruct().rel_diff(&w) < 1e-15);
    }

    #[test]
    fn zero_matrix_has_orthonormal_bases() {
        let f = svd_full(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(f.sigma, vec![0.0, 0.0]);
        assert!(f.orthogonality_residual() < 1e-14);
        let u2 = f.u2.as_ref().unwrap();
        assert_eq!(u2.shape(), (3, 1));
        assert!((u2.frobenius_norm() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hand_computed_singular_values() {
        // WᵀW = [[2,1],[1,2]] has eigenvalues 3 and 1.
        let w = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let f = svd_full(&w).unwrap();
        assert!((f.sigma[0] - 3f64.sqrt()).abs() < 1e-14);
        assert!((f.sigma[1] - 1.0).abs() < 1e-14);
        assert!(f.orthogonality_residual() < 1e-14);
        assert!(f.reconstruct().rel_diff(&w) < 1e-14);
    }

    #[test]
    fn rank_one_matrix() {
        let w = Matrix::from_fn(5, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let f = svd_full(&w).unwrap();
        assert!(f.sigma[1] < 1e-12 && f.sigma[2] < 1e-12);
        assert!(f.orthogonality_residual() < 1e-12);
        assert!(f.reconstruct().rel_diff(&w) < 1e-12);
    }

    #[test]
    fn wide_input_is_a_contract_violation() {
        assert!(matches!(svd_full(&Matrix::zeros(2, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn truncation_error_definition() {
        let s = [3.0, 2.0, 1.0];
        assert_eq!(truncation_error(&s, 1).unwrap(), 5f64.sqrt());
        assert_eq!(truncation_error(&s, 3).unwrap(), 0.0);
        assert_eq!(truncation_error(&s, 0).unwrap(), 14f64.sqrt());
        assert!(truncation_error(&s, 4).is_err());
    }
}
