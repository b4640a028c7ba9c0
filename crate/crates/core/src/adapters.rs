//! Adapter parameterizations of a frozen weight matrix.
//!
//! Every weight is stored in "tall" orientation (`m ≥ n`); layers with more
//! inputs than outputs keep the transpose and set [`DecomposedWeight::is_transposed`].
//! Forward passes and merges take and return the layer's own orientation.
//!
//! * SSVD: `W' = U (Σ + ΔΣ) G Vᵀ`, where `ΔΣ` and `G = cayley(S)` touch only
//!   the top `k` singular components.
//! * SSVD-O: additionally shifts the first `l` left singular vectors,
//!   `U' = U + U₂ [Q 0]`, with `Q = L C^{-T}` and `C = chol(LᵀL + τI)`.
//! * LoRA `W0 + BA`, PiSSA `W_res + BA`, DoRA `(W0 + BA)·diag(m / ‖W0 + BA‖_c)`.
//! * Full: every entry of the weight is trainable.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::densela::{cholesky_lower, solve_triangular, svd_full, Matrix, Side, SvdFactors, TriSolve};
use crate::error::{contract, Error, Result};
use crate::tape::{cayley_parts, skew_from_lower, Graph, Var};

/// Default `τ` for the SSVD-O Cholesky parameterization.
pub const DEFAULT_TAU: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ssvd,
    SsvdO,
    Lora,
    Dora,
    Pissa,
    /// Full fine-tuning of the weight (reference baseline, not an adapter).
    Full,
}

impl Method {
    pub const ADAPTERS: [Method; 5] = [Method::Ssvd, Method::SsvdO, Method::Lora, Method::Dora, Method::Pissa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ssvd => "ssvd",
            Method::SsvdO => "ssvd-o",
            Method::Lora => "lora",
            Method::Dora => "dora",
            Method::Pissa => "pissa",
            Method::Full => "full",
        }
    }

    pub fn uses_inner(self) -> bool {
        matches!(self, Method::Ssvd | Method::SsvdO)
    }

    pub fn uses_outer(self) -> bool {
        self == Method::SsvdO
    }

    pub fn uses_rank(self) -> bool {
        matches!(self, Method::Lora | Method::Dora | Method::Pissa)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "ssvd" => Method::Ssvd,
            "ssvd-o" | "ssvdo" | "ssvd_o" => Method::SsvdO,
            "lora" => Method::Lora,
            "dora" => Method::Dora,
            "pissa" => Method::Pissa,
            "full" => Method::Full,
            other => return Err(Error::Parse(format!("unknown method '{other}'"))),
        })
    }
}

/// Per-layer integer configuration: adapted singular components `k`,
/// outer rank `l`, low rank `r`. Fields a method does not use are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ranks {
    pub k: usize,
    pub l: usize,
    pub r: usize,
}

/// `k = round(p·n)` clamped to `[1, n]`.
pub fn inner_rank(p: f64, n: usize) -> usize {
    ((p * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Exact trainable-parameter count of one adapted `m×n` weight (`m ≥ n`).
pub fn param_count(method: Method, m: usize, n: usize, ranks: Ranks) -> Result<usize> {
    if m < n || n == 0 {
        return contract(format!("param_count needs m >= n >= 1, got {m}x{n}"));
    }
    let Ranks { k, l, r } = ranks;
    let inner = |k: usize| -> Result<usize> {
        if k > n {
            return contract(format!("k = {k} exceeds n = {n}"));
        }
        Ok(k * (k + 1) / 2)
    };
    let low_rank = |r: usize| -> Result<usize> {
        if r > n {
            return contract(format!("r = {r} exceeds n = {n}"));
        }
        Ok(r * (m + n))
    };
    match method {
        Method::Ssvd => inner(k),
        Method::SsvdO => {
            let limit = n.min(m - n);
            if l > limit {
                return contract(format!("l = {l} exceeds min(n, m - n) = {limit} for {m}x{n}"));
            }
            Ok(inner(k)? + (m - n) * l)
        }
        Method::Lora | Method::Pissa => low_rank(r),
        Method::Dora => Ok(low_rank(r)? + n),
        Method::Full => Ok(m * n),
    }
}

/// A frozen weight with its full SVD, stored with `m ≥ n`.
#[derive(Debug, Clone)]
pub struct DecomposedWeight {
    w0: Matrix,
    factors: SvdFactors,
    transposed: bool,
    vt: Matrix,
    ut: Matrix,
    u2t: Option<Matrix>,
}

impl DecomposedWeight {
    /// Decomposes a layer weight of shape `outputs × inputs`, storing the
    /// transpose when the layer has more inputs than outputs.
    pub fn decompose(layer_weight: &Matrix) -> Result<Self> {
        let transposed = layer_weight.rows() < layer_weight.cols();
        let w0 = if transposed { layer_weight.transpose() } else { layer_weight.clone() };
        let factors = svd_full(&w0)?;
        Ok(Self::assemble(w0, factors, transposed))
    }

    /// Rebuilds from stored parts, checking shapes and reconstruction.
    pub fn from_parts(w0: Matrix, factors: SvdFactors, transposed: bool) -> Result<Self> {
        let (m, n) = w0.shape();
        if m < n || factors.u.shape() != (m, n) || factors.v.shape() != (n, n) || factors.sigma.len() != n {
            return contract(format!("decomposition parts do not match a {m}x{n} weight"));
        }
        match &factors.u2 {
            Some(u2) if u2.shape() != (m, m - n) => return contract("U2 has the wrong shape"),
            None if m > n => return contract("U2 missing for a rectangular weight"),
            _ => {}
        }
        let err = factors.reconstruct().rel_diff(&w0);
        if err > 1e-10 && w0.frobenius_norm() > 0.0 {
            return Err(Error::Numeric(format!("stored factors reconstruct with relative error {err:e}")));
        }
        Ok(Self::assemble(w0, factors, transposed))
    }

    fn assemble(w0: Matrix, factors: SvdFactors, transposed: bool) -> Self {
        let vt = factors.v.transpose();
        let ut = factors.u.transpose();
        let u2t = factors.u2.as_ref().map(Matrix::transpose);
        Self { w0, factors, transposed, vt, ut, u2t }
    }

    pub fn m(&self) -> usize {
        self.w0.rows()
    }

    pub fn n(&self) -> usize {
        self.w0.cols()
    }

    /// Stored (tall) weight.
    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn factors(&self) -> &SvdFactors {
        &self.factors
    }

    pub fn is_transposed(&self) -> bool {
        self.transposed
    }

    /// `(outputs, inputs)` of the original layer.
    pub fn layer_shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.n(), self.m())
        } else {
            (self.m(), self.n())
        }
    }

    /// Converts a stored-orientation matrix back to layer orientation.
    pub fn to_layer(&self, stored: Matrix) -> Matrix {
        if self.transposed {
            stored.transpose()
        } else {
            stored
        }
    }

    pub fn layer_weight(&self) -> Matrix {
        self.to_layer(self.w0.clone())
    }

    pub fn reconstruction_error(&self) -> f64 {
        self.factors.reconstruct().rel_diff(&self.w0)
    }
}

/// Cayley transform `(I − S)^{-1}(I + S)` of a skew-symmetric `S`.
pub fn cayley(s: &Matrix) -> Result<Matrix> {
    if s.rows() != s.cols() || s.add(&s.transpose()).max_abs() > 1e-12 {
        return contract(format!("cayley needs a skew-symmetric square matrix, got {}x{}", s.rows(), s.cols()));
    }
    Ok(cayley_parts(s)?.0)
}

/// `Q = L·C^{-T}` with `C = chol(LᵀL + τI)` lower-triangular.
pub fn build_q(l: &Matrix, tau: f64) -> Result<Matrix> {
    if tau <= 0.0 || !tau.is_finite() {
        return contract(format!("tau must be positive, got {tau}"));
    }
    let cols = l.cols();
    let gram = l.t_matmul(l).add(&Matrix::identity(cols).scale(tau));
    let c = cholesky_lower(&gram)?;
    solve_triangular(&c, l, TriSolve::new(Side::Right, true, true))
}

/// Resolved configuration for building adapter states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub method: Method,
    /// Inner ratio in `(0, 1]`.
    pub p: f64,
    pub l: usize,
    pub r: usize,
    pub tau: f64,
}

impl AdapterConfig {
    pub fn new(method: Method) -> Self {
        Self { method, p: 1.0, l: 0, r: 0, tau: DEFAULT_TAU }
    }

    pub fn with_p(mut self, p: f64) -> Self {
        self.p = p;
        self
    }

    pub fn with_l(mut self, l: usize) -> Self {
        self.l = l;
        self
    }

    pub fn with_r(mut self, r: usize) -> Self {
        self.r = r;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    /// Integer ranks for an `m×n` stored weight.
    pub fn ranks_for(&self, _m: usize, n: usize) -> Ranks {
        Ranks { k: if self.method.uses_inner() { inner_rank(self.p, n) } else { 0 }, l: self.l, r: self.r }
    }
}

/// SSVD inner transform: skew parameter for `G_k` and singular-value shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct SsvdState {
    pub k: usize,
    /// Strict-lower entries of `S`, `k(k−1)/2 × 1`.
    pub skew: Matrix,
    /// `ΔΣ_k`, `k × 1`.
    pub delta_sigma: Matrix,
}

impl SsvdState {
    pub fn new(k: usize) -> Self {
        Self { k, skew: Matrix::zeros(k * k.saturating_sub(1) / 2, 1), delta_sigma: Matrix::zeros(k, 1) }
    }

    pub fn skew_matrix(&self) -> Matrix {
        skew_from_lower(self.skew.as_slice(), self.k)
    }

    /// Realized `G_k`.
    pub fn rotation(&self) -> Result<Matrix> {
        cayley(&self.skew_matrix())
    }
}

/// SSVD-O: inner transform plus the outer factor `L` (`(m−n) × l`).
#[derive(Debug, Clone, PartialEq)]
pub struct SsvdOState {
    pub inner: SsvdState,
    pub l: usize,
    pub factor: Matrix,
    pub tau: f64,
}

impl SsvdOState {
    pub fn q(&self) -> Result<Matrix> {
        build_q(&self.factor, self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowRankKind {
    Lora,
    Dora,
    Pissa,
}

/// LoRA / DoRA / PiSSA factors `B` (`m×r`) and `A` (`r×n`).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankState {
    pub kind: LowRankKind,
    pub r: usize,
    pub a: Matrix,
    pub b: Matrix,
    /// DoRA magnitude vector, `1×n`.
    pub magnitude: Option<Matrix>,
    /// PiSSA frozen residual `W0 − BA` at init.
    pub residual: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub weight: Matrix,
}

/// Trainable state of one adapted weight.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterState {
    Ssvd(SsvdState),
    SsvdO(SsvdOState),
    LowRank(LowRankState),
    Full(FullState),
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl AdapterState {
    /// Fresh state whose forward pass equals the frozen layer.
    pub fn init(cfg: &AdapterConfig, dw: &DecomposedWeight, rng: &mut impl Rng) -> Result<Self> {
        let (m, n) = (dw.m(), dw.n());
        let ranks = cfg.ranks_for(m, n);
        param_count(cfg.method, m, n, ranks)?;
        Ok(match cfg.method {
            Method::Ssvd => AdapterState::Ssvd(SsvdState::new(ranks.k)),
            Method::SsvdO => {
                if cfg.tau <= 0.0 {
                    return contract(format!("tau must be positive, got {}", cfg.tau));
                }
                AdapterState::SsvdO(SsvdOState {
                    inner: SsvdState::new(ranks.k),
                    l: ranks.l,
                    factor: Matrix::zeros(m - n, ranks.l),
                    tau: cfg.tau,
                })
            }
            Method::Lora | Method::Dora => {
                let r = ranks.r;
                if r == 0 {
                    return contract("low-rank adapters need r >= 1");
                }
                let a = gaussian(r, n, 1.0 / (n as f64).sqrt(), rng);
                let b = Matrix::zeros(m, r);
                let (kind, magnitude) = if cfg.method == Method::Dora {
                    let norms = column_norms(dw.w0());
                    if let Some(j) = norms.as_slice().iter().position(|v| *v == 0.0) {
                        return contract(format!("DoRA needs non-zero weight columns; column {j} is zero"));
                    }
                    (LowRankKind::Dora, Some(norms))
                } else {
                    (LowRankKind::Lora, None)
                };
                AdapterState::LowRank(LowRankState { kind, r, a, b, magnitude, residual: None })
            }
            Method::Pissa => {
                let r = ranks.r;
                if r == 0 {
                    return contract("low-rank adapters need r >= 1");
                }
                let f = dw.factors();
                let roots: Vec<f64> = f.sigma[..r].iter().map(|s| s.sqrt()).collect();
                let b = Matrix::from_fn(m, r, |i, j| f.u[(i, j)] * roots[j]);
                let a = Matrix::from_fn(r, n, |i, j| roots[i] * f.v[(j, i)]);
                let residual = dw.w0().sub(&b.matmul(&a));
                AdapterState::LowRank(LowRankState {
                    kind: LowRankKind::Pissa,
                    r,
                    a,
                    b,
                    magnitude: None,
                    residual: Some(residual),
                })
            }
            Method::Full => AdapterState::Full(FullState { weight: dw.w0().clone() }),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            AdapterState::Ssvd(_) => Method::Ssvd,
            AdapterState::SsvdO(_) => Method::SsvdO,
            AdapterState::LowRank(s) => match s.kind {
                LowRankKind::Lora => Method::Lora,
                LowRankKind::Dora => Method::Dora,
                LowRankKind::Pissa => Method::Pissa,
            },
            AdapterState::Full(_) => Method::Full,
        }
    }

    pub fn ranks(&self) -> Ranks {
        match self {
            AdapterState::Ssvd(s) => Ranks { k: s.k, ..Ranks::default() },
            AdapterState::SsvdO(s) => Ranks { k: s.inner.k, l: s.l, r: 0 },
            AdapterState::LowRank(s) => Ranks { r: s.r, ..Ranks::default() },
            AdapterState::Full(_) => Ranks::default(),
        }
    }

    /// Trainable arrays in a fixed order; empty arrays are skipped.
    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out: Vec<(&'static str, &Matrix)> = match self {
            AdapterState::Ssvd(s) => vec![("skew", &s.skew), ("delta_sigma", &s.delta_sigma)],
            AdapterState::SsvdO(s) => vec![
                ("skew", &s.inner.skew),
                ("delta_sigma", &s.inner.delta_sigma),
                ("outer_factor", &s.factor),
            ],
            AdapterState::LowRank(s) => {
                let mut v = vec![("lora_a", &s.a), ("lora_b", &s.b)];
                if let Some(mag) = &s.magnitude {
                    v.push(("magnitude", mag));
                }
                v
            }
            AdapterState::Full(s) => vec![("weight", &s.weight)],
        };
        out.retain(|(_, m)| !m.is_empty());
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out: Vec<(&'static str, &mut Matrix)> = match self {
            AdapterState::Ssvd(s) => vec![("skew", &mut s.skew), ("delta_sigma", &mut s.delta_sigma)],
            AdapterState::SsvdO(s) => vec![
                ("skew", &mut s.inner.skew),
                ("delta_sigma", &mut s.inner.delta_sigma),
                ("outer_factor", &mut s.factor),
            ],
            AdapterState::LowRank(s) => {
                let mut v = vec![("lora_a", &mut s.a), ("lora_b", &mut s.b)];
                if let Some(mag) = &mut s.magnitude {
                    v.push(("magnitude", mag));
                }
                v
            }
            AdapterState::Full(s) => vec![("weight", &mut s.weight)],
        };
        out.retain(|(_, m)| !m.is_empty());
        out
    }

    /// Frozen arrays owned by the state (PiSSA residual).
    pub fn frozen(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            AdapterState::LowRank(LowRankState { residual: Some(r), .. }) => vec![("residual", r)],
            _ => Vec::new(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }

    /// Registers every trainable array as a tape parameter, in [`AdapterState::params`] order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|(_, m)| g.param(m.clone())).collect()
    }

    /// Registers the trainable arrays as constants (for evaluation).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params().into_iter().map(|(_, m)| g.constant(m.clone())).collect()
    }

    /// Layer output `y` (`outputs×batch`) for input `x` (`inputs×batch`),
    /// with `vars` as returned by [`AdapterState::bind`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], dw: &DecomposedWeight, x: Var) -> Result<Var> {
        let (outputs, inputs) = dw.layer_shape();
        if g.shape(x).0 != inputs {
            return contract(format!(
                "adapter forward: layer expects {inputs} inputs, got {}x{}",
                g.shape(x).0,
                g.shape(x).1
            ));
        }
        let named: Vec<&'static str> = self.params().iter().map(|(n, _)| *n).collect();
        if named.len() != vars.len() {
            return contract(format!("adapter forward: {} vars for {} parameters", vars.len(), named.len()));
        }
        let find = |name: &str| named.iter().position(|n| *n == name).map(|i| vars[i]);
        let y = match self {
            AdapterState::Ssvd(s) => {
                let inner = InnerVars { k: s.k, skew: find("skew"), delta_sigma: find("delta_sigma").unwrap() };
                ssvd_forward(g, dw, &inner, None, x)?
            }
            AdapterState::SsvdO(s) => {
                let inner =
                    InnerVars { k: s.inner.k, skew: find("skew"), delta_sigma: find("delta_sigma").unwrap() };
                let outer = match find("outer_factor") {
                    Some(l) => Some(q_on_tape(g, l, s.tau)?),
                    None => None,
                };
                ssvd_forward(g, dw, &inner, outer, x)?
            }
            AdapterState::LowRank(s) => {
                let (a, b) = (find("lora_a").unwrap(), find("lora_b").unwrap());
                match s.kind {
                    LowRankKind::Lora | LowRankKind::Pissa => {
                        let base_w = s.residual.as_ref().unwrap_or(dw.w0());
                        let base = if dw.is_transposed() {
                            g.constant(base_w.transpose())
                        } else {
                            g.constant(base_w.clone())
                        };
                        let base_y = g.matmul(base, x);
                        let delta = if dw.is_transposed() {
                            let bt = g.transpose(b);
                            let at = g.transpose(a);
                            let h = g.matmul(bt, x);
                            g.matmul(at, h)
                        } else {
                            let h = g.matmul(a, x);
                            g.matmul(b, h)
                        };
                        g.add(base_y, delta)
                    }
                    LowRankKind::Dora => {
                        let mag = find("magnitude").unwrap();
                        let w0 = g.constant(dw.w0().clone());
                        let ba = g.matmul(b, a);
                        let dir = g.add(w0, ba);
                        let norms = g.col_norms(dir);
                        let ratio = g.div(mag, norms);
                        let w = g.scale_cols(dir, ratio);
                        let w = if dw.is_transposed() { g.transpose(w) } else { w };
                        g.matmul(w, x)
                    }
                }
            }
            AdapterState::Full(_) => {
                let w = find("weight").unwrap();
                let w = if dw.is_transposed() { g.transpose(w) } else { w };
                g.matmul(w, x)
            }
        };
        debug_assert_eq!(g.shape(y).0, outputs);
        Ok(y)
    }

    /// Forward pass without gradient tracking.
    pub fn apply(&self, dw: &DecomposedWeight, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &vars, dw, xv)?;
        Ok(g.value(y).clone())
    }

    /// Folds the adapter into a plain weight in layer orientation.
    pub fn merge(&self, dw: &DecomposedWeight) -> Result<Matrix> {
        let stored = match self {
            AdapterState::Ssvd(s) => merge_ssvd(dw, s, None)?,
            AdapterState::SsvdO(s) => {
                let q = if s.l > 0 { Some(s.q()?) } else { None };
                merge_ssvd(dw, &s.inner, q.as_ref())?
            }
            AdapterState::LowRank(s) => {
                let ba = s.b.matmul(&s.a);
                match s.kind {
                    LowRankKind::Lora => dw.w0().add(&ba),
                    LowRankKind::Pissa => s.residual.as_ref().expect("PiSSA residual").add(&ba),
                    LowRankKind::Dora => {
                        let dir = dw.w0().add(&ba);
                        let norms = column_norms(&dir);
                        let mag = s.magnitude.as_ref().expect("DoRA magnitude");
                        Matrix::from_fn(dir.rows(), dir.cols(), |i, j| dir[(i, j)] * mag[(0, j)] / norms[(0, j)])
                    }
                }
            }
            AdapterState::Full(s) => s.weight.clone(),
        };
        Ok(dw.to_layer(stored))
    }

    /// Rebuilds a state from named arrays (e.g. read from a checkpoint).
    pub fn from_arrays(
        method: Method,
        ranks: Ranks,
        tau: f64,
        arrays: &[(String, Matrix)],
        dw: &DecomposedWeight,
    ) -> Result<Self> {
        let get = |name: &str| arrays.iter().find(|(n, _)| n == name).map(|(_, m)| m.clone());
        let need = |name: &str| get(name).ok_or_else(|| Error::Parse(format!("missing array '{name}'")));
        let (m, n) = (dw.m(), dw.n());
        let inner = |k: usize| -> Result<SsvdState> {
            let skew = get("skew").unwrap_or_else(|| Matrix::zeros(0, 1));
            let delta_sigma = need("delta_sigma")?;
            if skew.len() != k * k.saturating_sub(1) / 2 || delta_sigma.shape() != (k, 1) {
                return contract(format!("inner arrays do not match k = {k}"));
            }
            Ok(SsvdState { k, skew, delta_sigma })
        };
        let state = match method {
            Method::Ssvd => AdapterState::Ssvd(inner(ranks.k)?),
            Method::SsvdO => {
                let factor = get("outer_factor").unwrap_or_else(|| Matrix::zeros(m - n, 0));
                if factor.rows() != m - n || factor.cols() != ranks.l {
                    return contract("outer factor does not match (m - n) x l");
                }
                AdapterState::SsvdO(SsvdOState { inner: inner(ranks.k)?, l: ranks.l, factor, tau })
            }
            Method::Lora | Method::Dora | Method::Pissa => {
                let kind = match method {
                    Method::Lora => LowRankKind::Lora,
                    Method::Dora => LowRankKind::Dora,
                    _ => LowRankKind::Pissa,
                };
                let a = need("lora_a")?;
                let b = need("lora_b")?;
                if a.shape() != (ranks.r, n) || b.shape() != (m, ranks.r) {
                    return contract("low-rank factors do not match the weight");
                }
                let magnitude = if kind == LowRankKind::Dora { Some(need("magnitude")?) } else { None };
                let residual = if kind == LowRankKind::Pissa { Some(need("residual")?) } else { None };
                AdapterState::LowRank(LowRankState { kind, r: ranks.r, a, b, magnitude, residual })
            }
            Method::Full => AdapterState::Full(FullState { weight: need("weight")? }),
        };
        Ok(state)
    }
}

pub(crate) fn column_norms(w: &Matrix) -> Matrix {
    Matrix::from_fn(1, w.cols(), |_, j| (0..w.rows()).map(|i| w[(i, j)] * w[(i, j)]).sum::<f64>().sqrt())
}

struct InnerVars {
    k: usize,
    skew: Option<Var>,
    delta_sigma: Var,
}

fn q_on_tape(g: &mut Graph, l: Var, tau: f64) -> Result<Var> {
    let cols = g.shape(l).1;
    let lt = g.transpose(l);
    let gram = g.matmul(lt, l);
    let reg = g.constant(Matrix::identity(cols).scale(tau));
    let a = g.add(gram, reg);
    let c = g.cholesky(a)?;
    g.solve_triangular(c, l, TriSolve::new(Side::Right, true, true))
}

/// Effective singular values `σ + [ΔΣ_k; 0]` as an `n×1` node.
fn shifted_sigma(g: &mut Graph, dw: &DecomposedWeight, inner: &InnerVars) -> Var {
    let n = dw.n();
    let sigma = &dw.factors().sigma;
    let top = g.constant(Matrix::column(&sigma[..inner.k]));
    let top = g.add(top, inner.delta_sigma);
    if inner.k == n {
        top
    } else {
        let rest = g.constant(Matrix::column(&sigma[inner.k..]));
        g.concat_rows(&[top, rest])
    }
}

/// Applies `G_k` (or `G_kᵀ`) to the top `k` rows of `z`.
fn rotate_top(g: &mut Graph, inner: &InnerVars, z: Var, transpose: bool) -> Result<Var> {
    let Some(skew) = inner.skew else { return Ok(z) };
    let s = g.skew(skew, inner.k);
    let rot = g.cayley(s)?;
    let rot = if transpose { g.transpose(rot) } else { rot };
    let rows = g.shape(z).0;
    if inner.k == rows {
        return Ok(g.matmul(rot, z));
    }
    let top = g.slice_rows(z, 0, inner.k);
    let rest = g.slice_rows(z, inner.k, rows);
    let top = g.matmul(rot, top);
    Ok(g.concat_rows(&[top, rest]))
}

fn ssvd_forward(
    g: &mut Graph,
    dw: &DecomposedWeight,
    inner: &InnerVars,
    q: Option<Var>,
    x: Var,
) -> Result<Var> {
    let n = dw.n();
    let f = dw.factors();
    let sig = shifted_sigma(g, dw, inner);
    if !dw.is_transposed() {
        // y = (U + U2 [Q 0]) Σ' G Vᵀ x
        let vt = g.constant(dw.vt.clone());
        let z = g.matmul(vt, x);
        let z = rotate_top(g, inner, z, false)?;
        let z = g.scale_rows(sig, z);
        let u = g.constant(f.u.clone());
        let y = g.matmul(u, z);
        match q {
            Some(q) => {
                let l = g.shape(q).1;
                let zl = if l == n { z } else { g.slice_rows(z, 0, l) };
                let shifted = g.matmul(q, zl);
                let u2 = g.constant(f.u2.clone().expect("U2 present when l > 0"));
                let extra = g.matmul(u2, shifted);
                Ok(g.add(y, extra))
            }
            None => Ok(y),
        }
    } else {
        // y = V Gᵀ Σ' (U + U2 [Q 0])ᵀ x
        let ut = g.constant(dw.ut.clone());
        let mut t = g.matmul(ut, x);
        if let Some(q) = q {
            let l = g.shape(q).1;
            let u2t = g.constant(dw.u2t.clone().expect("U2 present when l > 0"));
            let p = g.matmul(u2t, x);
            let qt = g.transpose(q);
            let shift = g.matmul(qt, p);
            if l == n {
                t = g.add(t, shift);
            } else {
                let top = g.slice_rows(t, 0, l);
                let rest = g.slice_rows(t, l, n);
                let top = g.add(top, shift);
                t = g.concat_rows(&[top, rest]);
            }
        }
        let t = g.scale_rows(sig, t);
        let t = rotate_top(g, inner, t, true)?;
        let v = g.constant(f.v.clone());
        Ok(g.matmul(v, t))
    }
}

/// Stored-orientation `W' = U' Σ' G Vᵀ` built with plain matrix algebra.
fn merge_ssvd(dw: &DecomposedWeight, inner: &SsvdState, q: Option<&Matrix>) -> Result<Matrix> {
    let (m, n) = (dw.m(), dw.n());
    let f = dw.factors();
    let mut g_full = Matrix::identity(n);
    if inner.k >= 2 {
        let gk = inner.rotation()?;
        for i in 0..inner.k {
            for j in 0..inner.k {
                g_full[(i, j)] = gk[(i, j)];
            }
        }
    }
    let mut sig = f.sigma.clone();
    for (s, d) in sig.iter_mut().zip(inner.delta_sigma.as_slice()) {
        *s += d;
    }
    let mut u_shift = f.u.clone();
    if let Some(q) = q {
        let u2q = f.u2.as_ref().expect("U2 present when l > 0").matmul(q);
        for i in 0..m {
            for j in 0..q.cols() {
                u_shift[(i, j)] += u2q[(i, j)];
            }
        }
    }
    let us = Matrix::from_fn(m, n, |i, j| u_shift[(i, j)] * sig[j]);
    Ok(us.matmul(&g_full).matmul(&dw.vt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        gaussian(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn decompose_orientation() {
        let dw = DecomposedWeight::decompose(&random(8, 4, 1)).unwrap();
        assert!(!dw.is_transposed());
        assert_eq!((dw.m(), dw.n()), (8, 4));
        let dw = DecomposedWeight::decompose(&random(4, 8, 2)).unwrap();
        assert!(dw.is_transposed());
        assert_eq!((dw.m(), dw.n()), (8, 4));
        assert_eq!(dw.layer_shape(), (4, 8));
        let dw = DecomposedWeight::decompose(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(dw.factors().sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn cayley_examples() {
        assert_eq!(cayley(&Matrix::zeros(3, 3)).unwrap(), Matrix::identity(3));
        let s = Matrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        let g = cayley(&s).unwrap();
        let expect = Matrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        assert!(g.sub(&expect).max_abs() < 1e-15);
        assert!(cayley(&Matrix::identity(2)).is_err());
    }

    #[test]
    fn build_q_examples() {
        assert_eq!(build_q(&Matrix::zeros(5, 2), 0.01).unwrap(), Matrix::zeros(5, 2));
        // ‖v‖² = τ  ⇒  QᵀQ = ‖v‖² / (‖v‖² + τ) = 1/2
        let tau = 0.04;
        let v = Matrix::column(&[0.12, 0.16]);
        let q = build_q(&v, tau).unwrap();
        assert!((q.t_matmul(&q)[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(build_q(&v, 0.0).is_err());
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(param_count(Method::Ssvd, 8, 4, Ranks { k: 4, ..Default::default() }).unwrap(), 10);
        assert_eq!(param_count(Method::Lora, 8, 4, Ranks { r: 4, ..Default::default() }).unwrap(), 48);
        assert_eq!(param_count(Method::SsvdO, 8, 4, Ranks { k: 4, l: 2, r: 0 }).unwrap(), 18);
        assert_eq!(param_count(Method::Dora, 8, 4, Ranks { r: 4, ..Default::default() }).unwrap(), 52);
        assert!(param_count(Method::Ssvd, 8, 4, Ranks { k: 5, ..Default::default() }).is_err());
        assert!(param_count(Method::SsvdO, 8, 4, Ranks { k: 1, l: 5, r: 0 }).is_err());
        assert!(param_count(Method::SsvdO, 6, 4, Ranks { k: 1, l: 3, r: 0 }).is_err());
        assert!(param_count(Method::Lora, 8, 4, Ranks { r: 5, ..Default::default() }).is_err());
    }

    #[test]
    fn inner_rank_rounds_and_clamps() {
        assert_eq!(inner_rank(0.25, 4), 1);
        assert_eq!(inner_rank(0.5, 4), 2);
        assert_eq!(inner_rank(1.0, 4), 4);
        assert_eq!(inner_rank(0.01, 4), 1);
        assert_eq!(inner_rank(0.4, 32), 13);
    }

    #[test]
    fn zeroed_singular_values_kill_output() {
        let dw = DecomposedWeight::decompose(&random(6, 4, 3)).unwrap();
        let mut s = SsvdState::new(4);
        s.delta_sigma = Matrix::column(&dw.factors().sigma).scale(-1.0);
        let y = AdapterState::Ssvd(s).apply(&dw, &random(4, 3, 4)).unwrap();
        assert!(y.max_abs() < 1e-14);
    }

    #[test]
    fn init_matches_base_for_every_method() {
        for (shape, seed) in [((8, 4), 10), ((4, 8), 11), ((5, 5), 12)] {
            let w = random(shape.0, shape.1, seed);
            let dw = DecomposedWeight::decompose(&w).unwrap();
            let x = random(shape.1, 3, seed + 100);
            let base = w.matmul(&x);
            let l = if dw.m() > dw.n() { 2 } else { 0 };
            for method in [Method::Ssvd, Method::SsvdO, Method::Lora, Method::Dora, Method::Pissa, Method::Full] {
                let cfg = AdapterConfig::new(method).with_p(0.5).with_l(l).with_r(2);
                let st = AdapterState::init(&cfg, &dw, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let y = st.apply(&dw, &x).unwrap();
                assert!(y.rel_diff(&base) < 1e-12, "{method} {shape:?}");
                assert!(st.merge(&dw).unwrap().rel_diff(&w) < 1e-12, "{method} merge");
            }
        }
    }

    #[test]
    fn from_arrays_round_trips() {
        let dw = DecomposedWeight::decompose(&random(7, 3, 5)).unwrap();
        for method in [Method::Ssvd, Method::SsvdO, Method::Lora, Method::Dora, Method::Pissa, Method::Full] {
            let cfg = AdapterConfig::new(method).with_p(1.0).with_l(2).with_r(2);
            let mut st = AdapterState::init(&cfg, &dw, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            for (i, (_, m)) in st.params_mut().into_iter().enumerate() {
                m.as_mut_slice().iter_mut().enumerate().for_each(|(j, v)| *v += 0.01 * (i + j) as f64);
            }
            let arrays: Vec<(String, Matrix)> = st
                .params()
                .into_iter()
                .chain(st.frozen())
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect();
            let back = AdapterState::from_arrays(method, st.ranks(), cfg.tau, &arrays, &dw).unwrap();
            assert_eq!(back, st);
        }
    }
}
