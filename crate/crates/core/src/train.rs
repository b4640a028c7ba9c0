//! Mini-batch training of adapter parameters (and of plain MLPs for
//! pretraining) with SGD or Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdapterConfig, AdapterState, DecomposedWeight};
use crate::densela::Matrix;
use crate::error::{contract, Error, Result};
use crate::tape::{Graph, Var};
use crate::tasks::{Dataset, Dense, Mlp};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            _ => Err(format!("unknown optimizer '{s}' (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl OptimState {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimKind::Sgd, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: vec![], second: vec![] }
    }

    pub fn adam(lr: f64) -> Self {
        Self { kind: OptimKind::Adam, ..Self::sgd(lr) }
    }

    pub fn new(kind: OptimKind, lr: f64) -> Self {
        match kind {
            OptimKind::Sgd => Self::sgd(lr),
            OptimKind::Adam => Self::adam(lr),
        }
    }

    /// Adam moment estimates, one pair per parameter (empty before the first step).
    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.first, &self.second)
    }

    /// Applies one update to every parameter. `names` label errors.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return contract(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return contract(format!("gradient shape mismatch for parameter {i}"));
            }
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFinite(format!("gradient of parameter '{name}'")));
            }
        }
        match self.kind {
            OptimKind::Sgd => sgd_step(params, grads, self.lr),
            OptimKind::Adam => {
                if self.first.is_empty() {
                    self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
                    self.second = self.first.clone();
                } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
                    return contract("optimizer state does not match the parameter set");
                }
                adam_step(params, grads, &mut self.first, &mut self.second, self.step + 1, self.lr, self.beta1, self.beta2, self.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *x -= lr * d;
        }
    }
}

/// Bias-corrected Adam update for step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    first: &mut [Matrix],
    second: &mut [Matrix],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut()) {
        let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimKind,
    /// Record every `log_every`-th step (and always the last one).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, lr: 1e-3, seed: 0, optimizer: OptimKind::Adam, log_every: 1 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return contract("epochs and batch size must be at least 1");
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return contract(format!("learning rate must be non-negative, got {}", self.lr));
        }
        Ok(())
    }
}

/// Loss and batch error at one optimizer step (before the update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub error: f64,
}

/// Deterministic shuffled mini-batch index lists for one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn batch_error(logits: &Matrix, labels: &[usize]) -> f64 {
    let wrong = (0..logits.cols())
        .filter(|&j| {
            let pred = (0..logits.rows()).max_by(|&a, &b| logits[(a, j)].total_cmp(&logits[(b, j)])).unwrap();
            pred != labels[j]
        })
        .count();
    wrong as f64 / labels.len() as f64
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

// One slot per layer; boxing would buy nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum Slot {
    Frozen,
    Adapted { dw: DecomposedWeight, state: AdapterState },
}

/// A frozen MLP with adapters attached to some of its weight matrices.
/// Biases always stay frozen.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    base: Mlp,
    slots: Vec<Slot>,
}

impl AdaptedModel {
    /// Attaches freshly initialized adapters to the layers flagged in `adapt`.
    pub fn new(base: &Mlp, cfg: &AdapterConfig, adapt: &[bool], seed: u64) -> Result<Self> {
        let per_layer: Vec<Option<AdapterConfig>> = adapt.iter().map(|&on| on.then_some(*cfg)).collect();
        Self::per_layer(base, &per_layer, seed)
    }

    /// Attaches adapters with an individual config per layer (`None` keeps it frozen).
    pub fn per_layer(base: &Mlp, configs: &[Option<AdapterConfig>], seed: u64) -> Result<Self> {
        if configs.len() != base.layers.len() {
            return contract(format!("{} layer configs for {} layers", configs.len(), base.layers.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots = base
            .layers
            .iter()
            .zip(configs)
            .map(|(layer, cfg)| {
                let Some(cfg) = cfg else {
                    return Ok(Slot::Frozen);
                };
                let dw = DecomposedWeight::decompose(&layer.weight)?;
                let state = AdapterState::init(cfg, &dw, &mut rng)?;
                Ok(Slot::Adapted { dw, state })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { base: base.clone(), slots })
    }

    /// Rebuilds a model from existing decompositions and states.
    pub fn from_parts(base: &Mlp, parts: Vec<Option<(DecomposedWeight, AdapterState)>>) -> Result<Self> {
        if parts.len() != base.layers.len() {
            return contract("one entry per layer required");
        }
        let slots = parts
            .into_iter()
            .map(|p| match p {
                None => Slot::Frozen,
                Some((dw, state)) => Slot::Adapted { dw, state },
            })
            .collect();
        Ok(Self { base: base.clone(), slots })
    }

    pub fn base(&self) -> &Mlp {
        &self.base
    }

    /// `(layer index, decomposition, state)` of every adapted layer.
    pub fn adapted(&self) -> impl Iterator<Item = (usize, &DecomposedWeight, &AdapterState)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| match s {
            Slot::Adapted { dw, state } => Some((i, dw, state)),
            Slot::Frozen => None,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.adapted().map(|(_, _, s)| s.trainable_count()).sum()
    }

    /// Names like `layer0.skew`, in binding order.
    pub fn param_names(&self) -> Vec<String> {
        self.adapted()
            .flat_map(|(i, _, s)| s.params().into_iter().map(move |(n, _)| format!("layer{i}.{n}")))
            .collect()
    }

    /// Logits (`classes×batch`) on the tape; returns the bound parameter vars too.
    pub fn forward_tape(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut vars = Vec::new();
        let last = self.slots.len() - 1;
        for (i, (slot, layer)) in self.slots.iter().zip(&self.base.layers).enumerate() {
            let z = match slot {
                Slot::Frozen => {
                    let w = g.constant(layer.weight.clone());
                    g.matmul(w, h)
                }
                Slot::Adapted { dw, state } => {
                    let bound = state.bind(g);
                    let z = state.forward(g, &bound, dw, h)?;
                    vars.extend(bound);
                    z
                }
            };
            let b = g.constant(layer.bias.clone());
            let z = g.add_column(z, b);
            h = if i == last { z } else { g.activation(z, self.base.activation) };
        }
        Ok((h, vars))
    }

    /// The plain MLP with every adapter merged into its weight.
    pub fn merged(&self) -> Result<Mlp> {
        let mut out = self.base.clone();
        for (i, dw, state) in self.adapted() {
            out.layers[i] = Dense { weight: state.merge(dw)?, bias: self.base.layers[i].bias.clone() };
        }
        Ok(out)
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.slots
            .iter_mut()
            .flat_map(|s| match s {
                Slot::Adapted { state, .. } => state.params_mut().into_iter().map(|(_, m)| m).collect(),
                Slot::Frozen => Vec::new(),
            })
            .collect()
    }

    /// Mean loss and gradients on one batch.
    pub fn loss_and_grads(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, f64, Vec<Matrix>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (logits, vars) = self.forward_tape(&mut g, xv)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let grads = g.backward(loss)?;
        let err = batch_error(g.value(logits), labels);
        Ok((g.value(loss)[(0, 0)], err, vars.iter().map(|v| grads.get_or_zeros(&g, *v)).collect()))
    }

    /// One optimizer update on a batch; returns the pre-update loss and error.
    pub fn step(&mut self, x: &Matrix, labels: &[usize], opt: &mut OptimState) -> Result<(f64, f64)> {
        let (loss, err, grads) = self.loss_and_grads(x, labels)?;
        let names = self.param_names();
        let mut params = self.params_mut();
        opt.update(&mut params, &grads, &names)?;
        Ok((loss, err))
    }
}

/// Trains the adapters of `model` on `data`. Returns the logged step records.
pub fn train_loop(model: &mut AdaptedModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr);
    let mut records = Vec::new();
    let mut step = 0;
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let (x, y) = data.gather(&batch);
            let (loss, err) = model.step(&x, &y, &mut opt)?;
            check_loss(step, loss)?;
            step += 1;
            if step % cfg.log_every.max(1) == 0 || step == total_steps {
                records.push(StepRecord { step, loss, error: err });
            }
        }
    }
    Ok(records)
}

/// Trains every weight and bias of `mlp` (used for pretraining students).
pub fn train_mlp(mlp: &mut Mlp, data: &Dataset, cfg: &TrainConfig, opt: &mut OptimState, epoch_offset: usize) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        for (bi, batch) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch + epoch_offset).into_iter().enumerate() {
            let (x, y) = data.gather(&batch);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let mut vars = Vec::new();
            let mut h = xv;
            let last = mlp.layers.len() - 1;
            for (i, layer) in mlp.layers.iter().enumerate() {
                let w = g.param(layer.weight.clone());
                let b = g.param(layer.bias.clone());
                vars.push(w);
                vars.push(b);
                let z = g.matmul(w, h);
                let z = g.add_column(z, b);
                h = if i == last { z } else { g.activation(z, mlp.activation) };
            }
            let loss = g.softmax_cross_entropy(h, &y)?;
            let lv = g.value(loss)[(0, 0)];
            check_loss(opt.step as usize, lv)?;
            let grads = g.backward(loss)?;
            let grads: Vec<Matrix> = vars.iter().map(|v| grads.get_or_zeros(&g, *v)).collect();
            let names: Vec<String> = (0..mlp.layers.len()).flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")]).collect();
            let mut params: Vec<&mut Matrix> = mlp.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
            opt.update(&mut params, &grads, &names)?;
            if bi % cfg.log_every.max(1) == 0 {
                records.push(StepRecord { step: opt.step as usize, loss: lv, error: batch_error(g.value(h), &y) });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = Matrix::filled(1, 1, 1.0);
        sgd_step(&mut [&mut p], &[Matrix::filled(1, 1, 2.0)], 0.1);
        assert!((p[(0, 0)] - 0.8).abs() < 1e-15);
        let mut q = Matrix::filled(2, 2, 3.0);
        sgd_step(&mut [&mut q], &[Matrix::zeros(2, 2)], 0.1);
        assert_eq!(q, Matrix::filled(2, 2, 3.0));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for c in [-3.0, 1e-3, 250.0] {
            let mut p = Matrix::filled(1, 1, 0.5);
            let mut opt = OptimState::adam(0.01);
            opt.update(&mut [&mut p], &[Matrix::filled(1, 1, c)], &[]).unwrap();
            // m̂ = c, v̂ = c², update = lr·c/(|c| + eps)
            let expect = 0.01 * c / (c.abs() + 1e-8);
            assert!((0.5 - p[(0, 0)] - expect).abs() < 1e-15);
            assert!(((0.5 - p[(0, 0)]).abs() - 0.01).abs() < 1e-7);
            assert_eq!(opt.step, 1);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Matrix::zeros(1, 2);
        let mut opt = OptimState::sgd(0.1);
        let g = Matrix::from_vec(1, 2, vec![0.0, f64::NAN]);
        let err = opt.update(&mut [&mut p], &[g], &["layer0.skew".into()]).unwrap_err();
        assert!(err.to_string().contains("layer0.skew"));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 3, 7, 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 3, 7, 2));
        assert_ne!(b, epoch_batches(10, 3, 7, 3));
    }
}
