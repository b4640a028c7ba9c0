use super::Matrix;
use crate::error::{contract, Error, Result};

/// Lower-triangular Cholesky factor `C` with `C·Cᵀ = A`.
pub fn cholesky_lower(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return contract(format!("cholesky_lower needs a square matrix, got {}x{}", n, a.cols()));
    }
    if !a.is_symmetric(1e-12 * a.max_abs().max(1.0)) {
        return contract("cholesky_lower needs a symmetric matrix");
    }
    let mut c = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for p in 0..j {
            d -= c[(j, p)] * c[(j, p)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, value: d });
        }
        let djj = d.sqrt();
        c[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for p in 0..j {
                s -= c[(i, p)] * c[(j, p)];
            }
            c[(i, j)] = s / djj;
        }
    }
    Ok(c)
}

/// Which side the triangular factor multiplies the unknown from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `op(C)·X = B`
    Left,
    /// `X·op(C) = B`
    Right,
}

/// Layout of a triangular solve: `op(C)` is `C` or `Cᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriSolve {
    pub side: Side,
    pub lower: bool,
    pub transpose: bool,
}

impl TriSolve {
    pub const fn new(side: Side, lower: bool, transpose: bool) -> Self {
        Self { side, lower, transpose }
    }

    /// Whether `op(C)` is lower-triangular.
    fn op_lower(self) -> bool {
        self.lower != self.transpose
    }
}

/// Solves `op(C)·X = B` or `X·op(C) = B` for triangular `C` by substitution.
pub fn solve_triangular(c: &Matrix, b: &Matrix, how: TriSolve) -> Result<Matrix> {
    let n = c.rows();
    if c.cols() != n {
        return contract(format!("solve_triangular needs square C, got {}x{}", n, c.cols()));
    }
    let fits = match how.side {
        Side::Left => b.rows() == n,
        Side::Right => b.cols() == n,
    };
    if !fits {
        return contract(format!(
            "solve_triangular shape mismatch: C {n}x{n}, B {}x{}, side {:?}",
            b.rows(),
            b.cols(),
            how.side
        ));
    }
    if let Some(i) = (0..n).find(|&i| c[(i, i)] == 0.0) {
        return Err(Error::SingularTriangular { index: i });
    }
    // X·op(C) = B  ⇔  op(C)ᵀ·Xᵀ = Bᵀ.
    Ok(match how.side {
        Side::Left => left_solve(c, b, how.transpose, how.op_lower()),
        Side::Right => {
            left_solve(c, &b.transpose(), !how.transpose, !how.op_lower()).transpose()
        }
    })
}

fn left_solve(c: &Matrix, b: &Matrix, transpose: bool, op_lower: bool) -> Matrix {
    let n = c.rows();
    let entry = |i: usize, j: usize| if transpose { c[(j, i)] } else { c[(i, j)] };
    let mut x = b.clone();
    let cols = b.cols();
    let order: Vec<usize> = if op_lower { (0..n).collect() } else { (0..n).rev().collect() };
    for (pos, &i) in order.iter().enumerate() {
        for col in 0..cols {
            let mut s = x[(i, col)];
            for &j in &order[..pos] {
                s -= entry(i, j) * x[(j, col)];
            }
            x[(i, col)] = s / entry(i, i);
        }
    }
    x
}

/// LU factorization with partial pivoting, `P·A = L·U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return contract(format!("LU needs a square matrix, got {}x{}", n, a.cols()));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&x, &y| lu[(x, k)].abs().total_cmp(&lu[(y, k)].abs()))
                .unwrap();
            if lu[(p, k)] == 0.0 {
                return Err(Error::Singular { index: k });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let t = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = t;
                }
            }
            let pivot = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                for j in k + 1..n {
                    lu[(i, j)] -= f * lu[(k, j)];
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    /// Solves `A·X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(b.rows(), n, "LU solve shape mismatch");
        let pb = Matrix::from_fn(n, b.cols(), |i, j| b[(self.perm[i], j)]);
        let y = left_solve_unit_lower(&self.lu, &pb);
        left_solve(&self.lu, &y, false, false)
    }

    /// Solves `Aᵀ·X = B`.
    pub fn solve_transpose(&self, b: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(b.rows(), n, "LU solve shape mismatch");
        // Aᵀ = Uᵀ Lᵀ P
        let z = left_solve(&self.lu, b, true, true);
        let w = left_solve_unit_upper_t(&self.lu, &z);
        let mut x = Matrix::zeros(n, b.cols());
        for i in 0..n {
            for j in 0..b.cols() {
                x[(self.perm[i], j)] = w[(i, j)];
            }
        }
        x
    }
}

fn left_solve_unit_lower(lu: &Matrix, b: &Matrix) -> Matrix {
    let n = lu.rows();
    let mut x = b.clone();
    for i in 0..n {
        for col in 0..b.cols() {
            let mut s = x[(i, col)];
            for j in 0..i {
                s -= lu[(i, j)] * x[(j, col)];
            }
            x[(i, col)] = s;
        }
    }
    x
}

/// Solves `Lᵀ·X = B` with `L` the unit lower factor stored in `lu`.
fn left_solve_unit_upper_t(lu: &Matrix, b: &Matrix) -> Matrix {
    let n = lu.rows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for col in 0..b.cols() {
            let mut s = x[(i, col)];
            for j in i + 1..n {
                s -= lu[(j, i)] * x[(j, col)];
            }
            x[(i, col)] = s;
        }
    }
    x
}

/// Inverse of a small square matrix via LU.
pub fn inverse(a: &Matrix) -> Result<Matrix> {
    Ok(Lu::factor(a)?.solve(&Matrix::identity(a.rows())))
}
