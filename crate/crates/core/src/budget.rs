//! Trainable-parameter accounting and budget-constrained config enumeration.
//!
//! Manifest text format, one layer per line:
//!
//! ```text
//! # name  outputs  inputs  adapt
//! ff1.up    64  32  1
//! ff1.down  10  64  true
//! ```
//!
//! Counting always uses the tall orientation (`m = max`, `n = min`).

use std::collections::HashSet;
use std::str::FromStr;

use crate::adapters::{inner_rank, param_count, Method, Ranks};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerEntry {
    pub name: String,
    /// Layer outputs.
    pub m: usize,
    /// Layer inputs.
    pub n: usize,
    pub adapt: bool,
}

impl LayerEntry {
    /// `(m, n)` in tall orientation.
    pub fn tall(&self) -> (usize, usize) {
        (self.m.max(self.n), self.m.min(self.n))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerManifest {
    pub layers: Vec<LayerEntry>,
}

impl LayerManifest {
    pub fn new(layers: Vec<LayerEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if l.m == 0 || l.n == 0 {
                return contract(format!("layer '{}' has a zero dimension", l.name));
            }
            if !seen.insert(l.name.as_str()) {
                return contract(format!("duplicate layer name '{}'", l.name));
            }
        }
        Ok(Self { layers })
    }

    pub fn adapted(&self) -> impl Iterator<Item = &LayerEntry> {
        self.layers.iter().filter(|l| l.adapt)
    }
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" | "adapt" => Some(true),
        "0" | "false" | "no" | "n" | "frozen" => Some(false),
        _ => None,
    }
}

impl FromStr for LayerManifest {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("manifest line {}: expected 'name m n adapt', got '{line}'", lineno + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            layers.push(LayerEntry {
                name: fields[0].to_string(),
                m: fields[1].parse().map_err(|_| bad())?,
                n: fields[2].parse().map_err(|_| bad())?,
                adapt: parse_flag(fields[3]).ok_or_else(bad)?,
            });
        }
        LayerManifest::new(layers)
    }
}

/// Uniform configuration applied to every adapted layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanConfig {
    pub method: Method,
    /// Inner ratio, used by SSVD and SSVD-O.
    pub p: Option<f64>,
    /// Outer rank, used by SSVD-O.
    pub l: Option<usize>,
    /// Low rank, used by LoRA, DoRA and PiSSA.
    pub r: Option<usize>,
}

impl PlanConfig {
    pub fn ranks_for(&self, n: usize) -> Ranks {
        Ranks {
            k: if self.method.uses_inner() { inner_rank(self.p.unwrap_or(1.0), n) } else { 0 },
            l: if self.method.uses_outer() { self.l.unwrap_or(0) } else { 0 },
            r: if self.method.uses_rank() { self.r.unwrap_or(0) } else { 0 },
        }
    }
}

/// Per-layer counts for `cfg`; errors name the offending layer.
pub fn layer_counts(manifest: &LayerManifest, cfg: &PlanConfig) -> Result<Vec<(String, Ranks, usize)>> {
    manifest
        .adapted()
        .map(|layer| {
            let (m, n) = layer.tall();
            let ranks = cfg.ranks_for(n);
            param_count(cfg.method, m, n, ranks)
                .map(|c| (layer.name.clone(), ranks, c))
                .map_err(|e| match e {
                    Error::Contract(msg) => Error::Contract(format!("layer '{}' ({m}x{n}): {msg}", layer.name)),
                    other => other,
                })
        })
        .collect()
}

pub fn count_total(manifest: &LayerManifest, cfg: &PlanConfig) -> Result<usize> {
    Ok(layer_counts(manifest, cfg)?.iter().map(|(_, _, c)| c).sum())
}

/// Candidate values for each budget knob.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    /// Inner ratios as fractions in `(0, 1]`.
    pub p: Vec<f64>,
    pub l: Vec<usize>,
    pub r: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            p: vec![0.10, 0.22, 0.33, 0.40, 0.50, 0.75, 1.00],
            l: vec![0, 8, 64, 256],
            r: vec![4, 16, 64, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPlan {
    pub config: PlanConfig,
    /// `(layer name, ranks)` for every adapted layer.
    pub layers: Vec<(String, Ranks)>,
    pub total: usize,
    pub budget: f64,
    /// `total / budget`; zero for an unbounded budget.
    pub utilization: f64,
}

fn dedup_f64(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

fn dedup_usize(values: &[usize]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Every grid point for `method` whose total fits in `budget`, sorted by
/// total and then by `(p, l, r)`.
pub fn enumerate_configs(manifest: &LayerManifest, method: Method, budget: f64, grid: &Grid) -> Result<Vec<BudgetPlan>> {
    let ps: Vec<Option<f64>> =
        if method.uses_inner() { dedup_f64(&grid.p).into_iter().map(Some).collect() } else { vec![None] };
    let ls: Vec<Option<usize>> =
        if method.uses_outer() { dedup_usize(&grid.l).into_iter().map(Some).collect() } else { vec![None] };
    let rs: Vec<Option<usize>> =
        if method.uses_rank() { dedup_usize(&grid.r).into_iter().map(Some).collect() } else { vec![None] };

    let mut plans = Vec::new();
    for &p in &ps {
        if let Some(p) = p {
            if !(p > 0.0 && p <= 1.0) {
                return contract(format!("inner ratio {p} outside (0, 1]"));
            }
        }
        for &l in &ls {
            for &r in &rs {
                let config = PlanConfig { method, p, l, r };
                let counts = layer_counts(manifest, &config)?;
                let total: usize = counts.iter().map(|(_, _, c)| c).sum();
                if (total as f64) <= budget {
                    plans.push(BudgetPlan {
                        config,
                        layers: counts.into_iter().map(|(n, r, _)| (n, r)).collect(),
                        total,
                        budget,
                        utilization: if budget.is_finite() { total as f64 / budget } else { 0.0 },
                    });
                }
            }
        }
    }
    plans.sort_by(|a, b| {
        a.total
            .cmp(&b.total)
            .then(a.config.p.unwrap_or(0.0).total_cmp(&b.config.p.unwrap_or(0.0)))
            .then(a.config.l.cmp(&b.config.l))
            .then(a.config.r.cmp(&b.config.r))
    });
    Ok(plans)
}

/// Count at the method's largest configuration on every adapted layer.
pub fn max_budget(manifest: &LayerManifest, method: Method) -> usize {
    manifest
        .adapted()
        .map(|layer| {
            let (m, n) = layer.tall();
            let ranks = Ranks { k: n, l: if method.uses_outer() { n.min(m - n) } else { 0 }, r: n };
            param_count(method, m, n, ranks).expect("maximal config is always valid")
        })
        .sum()
}
