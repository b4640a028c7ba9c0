use super::Matrix;
use crate::error::{contract, Error, Result};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted non-increasing.
pub fn sym_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows();
    if !a.is_symmetric(1e-10 * a.max_abs().max(1.0)) {
        return contract(format!("sym_eigenvalues needs a symmetric matrix, got {}x{}", n, a.cols()));
    }
    let mut m = a.clone();
    let scale = a.frobenius_norm();
    let off = |m: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&m) > f64::EPSILON * scale {
        if sweeps == MAX_SWEEPS {
            return Err(Error::EigenNoConvergence { dim: n, sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let e = sym_eigenvalues(&Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn trace_and_frobenius_preserved() {
        let b = Matrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let a = b.add(&b.transpose());
        let e = sym_eigenvalues(&a).unwrap();
        let trace: f64 = (0..5).map(|i| a[(i, i)]).sum();
        assert!((e.iter().sum::<f64>() - trace).abs() < 1e-12);
        let fro2: f64 = e.iter().map(|x| x * x).sum();
        assert!((fro2 - a.frobenius_norm().powi(2)).abs() < 1e-10);
    }
}
