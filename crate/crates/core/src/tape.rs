//! Eager reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every primitive as it is evaluated. Leaves are either
//! parameters (gradients wanted) or constants. [`Graph::backward`] walks the
//! tape in reverse insertion order, which is a valid reverse topological
//! order because operands always precede their results.

use crate::densela::{cholesky_lower, solve_triangular, Lu, Matrix, Side, TriSolve};
use crate::error::{contract, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Hadamard(Var, Var),
    Div(Var, Var),
    Elementwise(Var, Activation),
    /// `n×1` vector to `n×n` diagonal.
    DiagEmbed(Var),
    /// `diag(v)·M` with `v` of shape `rows×1`.
    ScaleRows { v: Var, m: Var },
    /// `M·diag(v)` with `v` of shape `1×cols`.
    ScaleCols { m: Var, v: Var },
    /// Euclidean norm of every column, `1×cols`.
    ColNorms(Var),
    /// Adds an `rows×1` column to every column.
    AddColumn { m: Var, b: Var },
    /// Strict-lower entries (column vector) to a skew-symmetric `k×k` matrix.
    Skew { v: Var, k: usize },
    Cholesky(Var),
    TriSolve { c: Var, b: Var, how: TriSolve },
    /// `(I − S)^{-1}(I + S)`, keeping the factorization of `I − S`.
    Cayley { s: Var, lu: Box<Lu> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
    MeanSquaredError { pred: Var, target: Var },
    Sum(Var),
    SliceRows { m: Var, start: usize },
    SliceCols { m: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Hadamard(..) => "hadamard",
            Op::Div(..) => "div",
            Op::Elementwise(..) => "elementwise",
            Op::DiagEmbed(..) => "diag_embed",
            Op::ScaleRows { .. } => "scale_rows",
            Op::ScaleCols { .. } => "scale_cols",
            Op::ColNorms(..) => "col_norms",
            Op::AddColumn { .. } => "add_column",
            Op::Skew { .. } => "skew",
            Op::Cholesky(..) => "cholesky",
            Op::TriSolve { .. } => "triangular_solve",
            Op::Cayley { .. } => "cayley",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MeanSquaredError { .. } => "mean_squared_error",
            Op::Sum(..) => "sum",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros of the node's shape when absent.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = g.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[track_caller]
fn shape_panic(op: &str, shapes: &[(usize, usize)]) -> ! {
    let s: Vec<String> = shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect();
    panic!("contract violation: {op} got incompatible shapes [{}]", s.join(", "));
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A frozen leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    #[track_caller]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        if self.shape(a).1 != self.shape(b).0 {
            shape_panic("matmul", &[self.shape(a), self.shape(b)]);
        }
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    #[track_caller]
    fn check_same(&self, op: &str, a: Var, b: Var) {
        if self.shape(a) != self.shape(b) {
            shape_panic(op, &[self.shape(a), self.shape(b)]);
        }
    }

    #[track_caller]
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same("add", a, b);
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    #[track_caller]
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same("sub", a, b);
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    #[track_caller]
    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        self.check_same("hadamard", a, b);
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b), &[a, b])
    }

    #[track_caller]
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same("div", a, b);
        let v = Matrix::from_fn(self.shape(a).0, self.shape(a).1, |i, j| {
            self.value(a)[(i, j)] / self.value(b)[(i, j)]
        });
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn activation(&mut self, a: Var, f: Activation) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        self.push(v, Op::Elementwise(a, f), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    #[track_caller]
    pub fn diag_embed(&mut self, v: Var) -> Var {
        if self.shape(v).1 != 1 {
            shape_panic("diag_embed", &[self.shape(v)]);
        }
        let d = Matrix::diag(self.value(v).as_slice());
        self.push(d, Op::DiagEmbed(v), &[v])
    }

    #[track_caller]
    pub fn scale_rows(&mut self, v: Var, m: Var) -> Var {
        let (vr, vc) = self.shape(v);
        if vc != 1 || vr != self.shape(m).0 {
            shape_panic("scale_rows", &[self.shape(v), self.shape(m)]);
        }
        let (vv, mv) = (self.value(v), self.value(m));
        let out = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| vv[(i, 0)] * mv[(i, j)]);
        self.push(out, Op::ScaleRows { v, m }, &[v, m])
    }

    #[track_caller]
    pub fn scale_cols(&mut self, m: Var, v: Var) -> Var {
        let (vr, vc) = self.shape(v);
        if vr != 1 || vc != self.shape(m).1 {
            shape_panic("scale_cols", &[self.shape(m), self.shape(v)]);
        }
        let (vv, mv) = (self.value(v), self.value(m));
        let out = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| mv[(i, j)] * vv[(0, j)]);
        self.push(out, Op::ScaleCols { m, v }, &[m, v])
    }

    pub fn col_norms(&mut self, m: Var) -> Var {
        let mv = self.value(m);
        let norms = Matrix::from_fn(1, mv.cols(), |_, j| {
            (0..mv.rows()).map(|i| mv[(i, j)] * mv[(i, j)]).sum::<f64>().sqrt()
        });
        self.push(norms, Op::ColNorms(m), &[m])
    }

    #[track_caller]
    pub fn add_column(&mut self, m: Var, b: Var) -> Var {
        if self.shape(b) != (self.shape(m).0, 1) {
            shape_panic("add_column", &[self.shape(m), self.shape(b)]);
        }
        let (mv, bv) = (self.value(m), self.value(b));
        let out = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| mv[(i, j)] + bv[(i, 0)]);
        self.push(out, Op::AddColumn { m, b }, &[m, b])
    }

    /// Builds skew-symmetric `S` from its strict-lower entries, listed row by
    /// row (`S[1][0], S[2][0], S[2][1], …`), with `S[j][i] = −S[i][j]`.
    #[track_caller]
    pub fn skew(&mut self, v: Var, k: usize) -> Var {
        if self.shape(v) != (k * k.saturating_sub(1) / 2, 1) {
            shape_panic("skew", &[self.shape(v), (k, k)]);
        }
        let s = skew_from_lower(self.value(v).as_slice(), k);
        self.push(s, Op::Skew { v, k }, &[v])
    }

    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let c = cholesky_lower(self.value(a))?;
        Ok(self.push(c, Op::Cholesky(a), &[a]))
    }

    pub fn solve_triangular(&mut self, c: Var, b: Var, how: TriSolve) -> Result<Var> {
        let x = solve_triangular(self.value(c), self.value(b), how)?;
        Ok(self.push(x, Op::TriSolve { c, b, how }, &[c, b]))
    }

    /// Cayley transform `(I − S)^{-1}(I + S)` of a skew-symmetric `S`.
    pub fn cayley(&mut self, s: Var) -> Result<Var> {
        let sv = self.value(s);
        let k = sv.rows();
        if sv.cols() != k || !sv.add(&sv.transpose()).max_abs().le(&1e-12) {
            return contract(format!("cayley needs a skew-symmetric square matrix, got {}x{}", k, sv.cols()));
        }
        let (g, lu) = cayley_parts(sv)?;
        Ok(self.push(g, Op::Cayley { s, lu: Box::new(lu) }, &[s]))
    }

    /// Mean cross-entropy of column-wise softmax over `logits` (`classes×batch`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (c, b) = lv.shape();
        if labels.len() != b {
            return contract(format!("softmax_cross_entropy: {} labels for batch of {b}", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return contract(format!("softmax_cross_entropy: label {bad} out of range for {c} classes"));
        }
        let mut probs = Matrix::zeros(c, b);
        let mut loss = 0.0;
        for j in 0..b {
            let max = (0..c).map(|i| lv[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|i| (lv[(i, j)] - max).exp()).sum();
            for i in 0..c {
                probs[(i, j)] = (lv[(i, j)] - max).exp() / z;
            }
            loss -= lv[(labels[j], j)] - max - z.ln();
        }
        let out = Matrix::from_vec(1, 1, vec![loss / b as f64]);
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Mean of squared entries of `pred − target`.
    #[track_caller]
    pub fn mean_squared_error(&mut self, pred: Var, target: Var) -> Var {
        self.check_same("mean_squared_error", pred, target);
        let d = self.value(pred).sub(self.value(target));
        let out = Matrix::from_vec(1, 1, vec![d.as_slice().iter().map(|x| x * x).sum::<f64>() / d.len() as f64]);
        self.push(out, Op::MeanSquaredError { pred, target }, &[pred, target])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn slice_rows(&mut self, m: Var, start: usize, end: usize) -> Var {
        let out = self.value(m).slice_rows(start, end);
        self.push(out, Op::SliceRows { m, start }, &[m])
    }

    pub fn slice_cols(&mut self, m: Var, start: usize, end: usize) -> Var {
        let out = self.value(m).slice_cols(start, end);
        self.push(out, Op::SliceCols { m, start }, &[m])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Matrix::vstack(&vals);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Matrix::hstack(&vals);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return contract(format!("backward needs a 1x1 loss, got {r}x{c}"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            let acc = |v: Var, g: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, up.matmul_t(val(*b)), &mut grads);
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, val(*a).t_matmul(&up), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, up.clone(), &mut grads);
                    acc(*b, up.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, up.clone(), &mut grads);
                    acc(*b, up.scale(-1.0), &mut grads);
                }
                Op::Scale(a, s) => acc(*a, up.scale(*s), &mut grads),
                Op::Transpose(a) => acc(*a, up.transpose(), &mut grads),
                Op::Hadamard(a, b) => {
                    acc(*a, up.hadamard(val(*b)), &mut grads);
                    acc(*b, up.hadamard(val(*a)), &mut grads);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = Matrix::from_fn(up.rows(), up.cols(), |i, j| up[(i, j)] / bv[(i, j)]);
                    let gb = Matrix::from_fn(up.rows(), up.cols(), |i, j| {
                        -up[(i, j)] * av[(i, j)] / (bv[(i, j)] * bv[(i, j)])
                    });
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Elementwise(a, f) => {
                    let out = &node.value;
                    let g = Matrix::from_fn(up.rows(), up.cols(), |i, j| {
                        let d = match f {
                            Activation::Tanh => 1.0 - out[(i, j)] * out[(i, j)],
                            Activation::Relu => {
                                if val(*a)[(i, j)] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        up[(i, j)] * d
                    });
                    acc(*a, g, &mut grads);
                }
                Op::DiagEmbed(v) => {
                    let n = up.rows();
                    acc(*v, Matrix::from_fn(n, 1, |i, _| up[(i, i)]), &mut grads);
                }
                Op::ScaleRows { v, m } => {
                    let (vv, mv) = (val(*v), val(*m));
                    let gv = Matrix::from_fn(vv.rows(), 1, |i, _| {
                        (0..mv.cols()).map(|j| up[(i, j)] * mv[(i, j)]).sum()
                    });
                    let gm = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| up[(i, j)] * vv[(i, 0)]);
                    acc(*v, gv, &mut grads);
                    acc(*m, gm, &mut grads);
                }
                Op::ScaleCols { m, v } => {
                    let (vv, mv) = (val(*v), val(*m));
                    let gv = Matrix::from_fn(1, vv.cols(), |_, j| {
                        (0..mv.rows()).map(|i| up[(i, j)] * mv[(i, j)]).sum()
                    });
                    let gm = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| up[(i, j)] * vv[(0, j)]);
                    acc(*v, gv, &mut grads);
                    acc(*m, gm, &mut grads);
                }
                Op::ColNorms(m) => {
                    let (mv, norms) = (val(*m), &node.value);
                    let g = Matrix::from_fn(mv.rows(), mv.cols(), |i, j| {
                        let n = norms[(0, j)];
                        if n == 0.0 {
                            0.0
                        } else {
                            up[(0, j)] * mv[(i, j)] / n
                        }
                    });
                    acc(*m, g, &mut grads);
                }
                Op::AddColumn { m, b } => {
                    let gb = Matrix::from_fn(up.rows(), 1, |i, _| up.row(i).iter().sum());
                    acc(*m, up.clone(), &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Skew { v, k } => {
                    let mut g = Vec::with_capacity(k * k.saturating_sub(1) / 2);
                    for i in 1..*k {
                        for j in 0..i {
                            g.push(up[(i, j)] - up[(j, i)]);
                        }
                    }
                    acc(*v, Matrix::from_vec(g.len(), 1, g), &mut grads);
                }
                Op::Cholesky(a) => acc(*a, cholesky_adjoint(&node.value, &up)?, &mut grads),
                Op::TriSolve { c, b, how } => {
                    let (gc, gb) = trisolve_adjoint(val(*c), &node.value, &up, *how)?;
                    acc(*c, gc, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Cayley { s, lu } => {
                    // dG = M^{-1} dS (I + G) with M = I − S, so S̄ = M^{-T} Ḡ (I + G)ᵀ.
                    let k = up.rows();
                    let i_plus_g = node.value.add(&Matrix::identity(k));
                    let gs = lu.solve_transpose(&up).matmul_t(&i_plus_g);
                    acc(*s, gs, &mut grads);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let b = labels.len() as f64;
                    let scale = up[(0, 0)] / b;
                    let mut g = probs.clone();
                    for (j, &y) in labels.iter().enumerate() {
                        g[(y, j)] -= 1.0;
                    }
                    acc(*logits, g.scale(scale), &mut grads);
                }
                Op::MeanSquaredError { pred, target } => {
                    let d = val(*pred).sub(val(*target));
                    let g = d.scale(2.0 * up[(0, 0)] / d.len() as f64);
                    acc(*target, g.scale(-1.0), &mut grads);
                    acc(*pred, g, &mut grads);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, up[(0, 0)]), &mut grads);
                }
                Op::SliceRows { m, start } => {
                    let (r, c) = val(*m).shape();
                    let mut g = Matrix::zeros(r, c);
                    for i in 0..up.rows() {
                        for j in 0..c {
                            g[(start + i, j)] = up[(i, j)];
                        }
                    }
                    acc(*m, g, &mut grads);
                }
                Op::SliceCols { m, start } => {
                    let (r, c) = val(*m).shape();
                    let mut g = Matrix::zeros(r, c);
                    for i in 0..r {
                        for j in 0..up.cols() {
                            g[(i, start + j)] = up[(i, j)];
                        }
                    }
                    acc(*m, g, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = val(*p).rows();
                        acc(*p, up.slice_rows(at, at + rows), &mut grads);
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let cols = val(*p).cols();
                        acc(*p, up.slice_cols(at, at + cols), &mut grads);
                        at += cols;
                    }
                }
            }
            // Keep leaf gradients; interior ones were consumed above.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(up);
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn skew_from_lower(entries: &[f64], k: usize) -> Matrix {
    let mut s = Matrix::zeros(k, k);
    let mut it = entries.iter();
    for i in 1..k {
        for j in 0..i {
            let v = *it.next().expect("skew entry count");
            s[(i, j)] = v;
            s[(j, i)] = -v;
        }
    }
    s
}

pub(crate) fn cayley_parts(s: &Matrix) -> Result<(Matrix, Lu)> {
    let k = s.rows();
    let eye = Matrix::identity(k);
    let lu = Lu::factor(&eye.sub(s))?;
    Ok((lu.solve(&eye.add(s)), lu))
}

/// Adjoint of `C = chol(A)` for symmetric `A`:
/// `Ā = sym(C^{-T} Φ(Cᵀ C̄) C^{-1})`, with `Φ` taking the lower triangle and halving the diagonal.
fn cholesky_adjoint(c: &Matrix, c_bar: &Matrix) -> Result<Matrix> {
    let n = c.rows();
    let mut phi = c.t_matmul(c_bar);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                phi[(i, j)] = 0.0;
            } else if i == j {
                phi[(i, j)] *= 0.5;
            }
        }
    }
    // C^{-T} Φ C^{-1}: left solve with Cᵀ, then right solve with C.
    let left = solve_triangular(c, &phi, TriSolve::new(Side::Left, true, true))?;
    let s = solve_triangular(c, &left, TriSolve::new(Side::Right, true, false))?;
    Ok(s.add(&s.transpose()).scale(0.5))
}

fn trisolve_adjoint(c: &Matrix, x: &Matrix, x_bar: &Matrix, how: TriSolve) -> Result<(Matrix, Matrix)> {
    let (b_bar, op_c_bar) = match how.side {
        // op(C) X = B:  B̄ = op(C)^{-T} X̄,  op(C)̄ = −B̄ Xᵀ
        Side::Left => {
            let b_bar = solve_triangular(c, x_bar, TriSolve { transpose: !how.transpose, ..how })?;
            let g = b_bar.matmul_t(x).scale(-1.0);
            (b_bar, g)
        }
        // X op(C) = B:  B̄ = X̄ op(C)^{-T},  op(C)̄ = −Xᵀ B̄
        Side::Right => {
            let b_bar = solve_triangular(c, x_bar, TriSolve { transpose: !how.transpose, ..how })?;
            let g = x.t_matmul(&b_bar).scale(-1.0);
            (b_bar, g)
        }
    };
    let mut c_bar = if how.transpose { op_c_bar.transpose() } else { op_c_bar };
    let n = c.rows();
    for i in 0..n {
        for j in 0..n {
            if (how.lower && j > i) || (!how.lower && j < i) {
                c_bar[(i, j)] = 0.0;
            }
        }
    }
    Ok((c_bar, b_bar))
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `build` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every parameter.
///
/// Error per entry is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(build: F, params: &[Matrix], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || tol <= 0.0 {
        return contract("grad_check needs eps > 0 and tol > 0");
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|v| grads.get_or_zeros(&g, *v)).collect();

    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss)[(0, 0)])
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), entries: 0, passed: true };
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = p.as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + eps;
            let fp = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig - eps;
            let fm = eval(&work)?;
            work[pi].as_mut_slice()[e] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("loss at perturbed parameter {pi} entry {e}")));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].as_slice()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, e);
            }
            report.entries += 1;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
