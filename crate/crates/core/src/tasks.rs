//! Synthetic pretrain / adapt / forget tasks.
//!
//! A frozen random teacher MLP labels standard-normal inputs. A [`ShiftSpec`]
//! moves the task to a target domain by rotating a subspace of the inputs
//! (the student sees `R·x + b`) and by permuting a subset of the class labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::densela::{svd_full, Matrix};
use crate::error::{contract, Error, Result};
use crate::tape::Activation;
use crate::train::{train_mlp, OptimState, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `outputs × inputs`.
    pub weight: Matrix,
    /// `outputs × 1`.
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng) * std)
}

impl Mlp {
    /// Random MLP with layer widths `sizes` (input first), weights `N(0, 1/fan_in)`
    /// and zero biases.
    pub fn random(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return contract(format!("MLP needs at least two positive widths, got {sizes:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: gaussian(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), &mut rng),
                bias: Matrix::zeros(w[1], 1),
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.weight.rows())).collect()
    }

    /// Logits for a batch of column inputs.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matmul(&h);
            for r in 0..z.rows() {
                let b = layer.bias[(r, 0)];
                for c in 0..z.cols() {
                    z[(r, c)] += b;
                }
            }
            h = if i == last { z } else { z.map(|v| self.activation.apply(v)) };
        }
        h
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        argmax_columns(&self.forward(x))
    }

    /// Fraction of misclassified examples.
    pub fn error_rate(&self, data: &Dataset) -> f64 {
        let pred = self.predict(&data.inputs);
        pred.iter().zip(&data.labels).filter(|(p, y)| p != y).count() as f64 / data.len() as f64
    }

    /// Mean cross-entropy and error rate.
    pub fn evaluate(&self, data: &Dataset) -> (f64, f64) {
        let logits = self.forward(&data.inputs);
        let mut loss = 0.0;
        let mut wrong = 0;
        for j in 0..logits.cols() {
            let col: Vec<f64> = (0..logits.rows()).map(|i| logits[(i, j)]).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = col.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - col[data.labels[j]];
            if argmax(&col) != data.labels[j] {
                wrong += 1;
            }
        }
        (loss / data.len() as f64, wrong as f64 / data.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    (0..m.cols()).map(|j| argmax(&m.col(j))).collect()
}

/// Minimum share of every class in the balance check.
pub const MIN_CLASS_SHARE: f64 = 0.01;
const BALANCE_SAMPLES: usize = 10_000;
const TEACHER_RETRIES: u64 = 64;
/// Keeps student initializations distinct from teachers built with the same seed.
const STUDENT_SALT: u64 = 0x5757_0DE7_5EED_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTask {
    pub teacher: Mlp,
    pub d: usize,
    pub classes: usize,
    /// Seed actually used (may exceed the requested one after retries).
    pub seed: u64,
}

/// Random teacher `d → hidden… → classes` whose argmax labels are non-degenerate:
/// every class takes at least 1% of 10k standard-normal inputs. Degenerate
/// draws are retried with the next seed.
pub fn make_teacher(d: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<TeacherTask> {
    if d < 2 || classes < 2 {
        return contract(format!("teacher needs d >= 2 and classes >= 2, got d={d}, classes={classes}"));
    }
    if hidden.is_empty() || hidden.len() > 2 {
        return contract("teacher uses one or two hidden layers");
    }
    let sizes: Vec<usize> = std::iter::once(d).chain(hidden.iter().copied()).chain(std::iter::once(classes)).collect();
    for attempt in 0..TEACHER_RETRIES {
        let s = seed + attempt;
        let teacher = Mlp::random(&sizes, Activation::Tanh, s)?;
        let probe = gaussian(d, BALANCE_SAMPLES, 1.0, &mut ChaCha8Rng::seed_from_u64(s ^ 0xBA1A_4CE5));
        if class_shares(&teacher.predict(&probe), classes).iter().all(|&f| f >= MIN_CLASS_SHARE) {
            return Ok(TeacherTask { teacher, d, classes, seed: s });
        }
    }
    Err(Error::Numeric(format!(
        "no non-degenerate teacher found for seeds {seed}..{}",
        seed + TEACHER_RETRIES
    )))
}

pub fn class_shares(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts.iter().map(|&c| c as f64 / labels.len().max(1) as f64).collect()
}

/// Knobs that define a [`ShiftSpec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftStrength {
    /// Dimension of the rotated input subspace (rotated in `s/2` planes).
    pub s: usize,
    /// Rotation angle per plane, in degrees.
    pub theta_deg: f64,
    /// Number of classes in the label cycle (0 or ≥ 2).
    pub permuted: usize,
    /// Euclidean norm of the input offset `b`.
    pub bias_norm: f64,
}

impl ShiftStrength {
    pub const NONE: ShiftStrength = ShiftStrength { s: 0, theta_deg: 0.0, permuted: 0, bias_norm: 0.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    /// Orthogonal `d×d`, equal to the identity off the rotated subspace.
    pub rotation: Matrix,
    pub bias: Vec<f64>,
    /// `permutation[teacher_class] = target_class`.
    pub permutation: Vec<usize>,
    pub strength: ShiftStrength,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn new(d: usize, classes: usize, strength: ShiftStrength, seed: u64) -> Result<Self> {
        let ShiftStrength { s, theta_deg, permuted, bias_norm } = strength;
        if s > d {
            return contract(format!("rotated subspace dimension {s} exceeds d = {d}"));
        }
        if permuted == 1 || permuted > classes {
            return contract(format!("permuted class count must be 0 or in 2..={classes}, got {permuted}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = svd_full(&gaussian(d, d, 1.0, &mut rng))?.u;
        let (sin, cos) = theta_deg.to_radians().sin_cos();
        let mut rotation = Matrix::identity(d);
        for plane in 0..s / 2 {
            let a = basis.col(2 * plane);
            let b = basis.col(2 * plane + 1);
            for i in 0..d {
                for j in 0..d {
                    rotation[(i, j)] += (cos - 1.0) * (a[i] * a[j] + b[i] * b[j]) + sin * (b[i] * a[j] - a[i] * b[j]);
                }
            }
        }
        let dir: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bias = dir.iter().map(|v| v / norm * bias_norm).collect();

        let mut permutation: Vec<usize> = (0..classes).collect();
        if permuted >= 2 {
            let mut chosen: Vec<usize> = (0..classes).collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(permuted);
            for (i, &c) in chosen.iter().enumerate() {
                permutation[c] = chosen[(i + 1) % permuted];
            }
        }
        Ok(Self { rotation, bias, permutation, strength, seed })
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix::identity(self.rotation.rows())
            && self.bias.iter().all(|b| *b == 0.0)
            && self.permutation.iter().enumerate().all(|(i, p)| i == *p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Source,
    Shifted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `d × N`, one example per column.
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Columns `idx` as a batch.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.inputs.rows();
        let x = Matrix::from_fn(d, idx.len(), |i, j| self.inputs[(i, idx[j])]);
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// `n` examples with `x ~ N(0, I)`. Under a shift the model sees `R·x + b`
/// and the label becomes `permutation[teacher(x)]`.
pub fn gen_data(task: &TeacherTask, shift: Option<&ShiftSpec>, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return contract("dataset size must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(task.d, n, 1.0, &mut rng);
    let labels = task.teacher.predict(&x);
    Ok(match shift {
        None => Dataset { inputs: x, labels, split: Split::Train, provenance: Provenance::Source },
        Some(sh) => {
            if sh.rotation.rows() != task.d || sh.permutation.len() != task.classes {
                return contract("shift does not match the task dimensions");
            }
            let mut xs = sh.rotation.matmul(&x);
            for i in 0..task.d {
                for j in 0..n {
                    xs[(i, j)] += sh.bias[i];
                }
            }
            let labels = labels.iter().map(|&y| sh.permutation[y]).collect();
            Dataset { inputs: xs, labels, split: Split::Train, provenance: Provenance::Shifted }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub hidden: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Stop once source test error is at or below this; `None` trains for `max_epochs`.
    pub target_error: Option<f64>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { hidden: vec![64], n_train: 65_536, n_test: 2048, target_error: Some(0.10), max_epochs: 200, batch_size: 128, lr: 3e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub student: Mlp,
    pub source_test_error: f64,
    pub epochs: usize,
}

/// Seeds of the source splits used for pretraining, derived from the task seed.
pub fn source_seeds(task: &TeacherTask) -> (u64, u64) {
    (task.seed.wrapping_mul(1_000_003).wrapping_add(11), task.seed.wrapping_mul(1_000_003).wrapping_add(12))
}

/// Fits a student with the teacher's widths on source data.
pub fn pretrain_student(task: &TeacherTask, opts: &PretrainOptions, seed: u64) -> Result<Pretrained> {
    let mut sizes = vec![task.d];
    sizes.extend(&opts.hidden);
    sizes.push(task.classes);
    let mut student = Mlp::random(&sizes, task.teacher.activation, seed ^ STUDENT_SALT)?;
    let (train_seed, test_seed) = source_seeds(task);
    let train = gen_data(task, None, opts.n_train, train_seed)?;
    let test = gen_data(task, None, opts.n_test, test_seed)?.with_split(Split::Test);

    let cfg = TrainConfig { epochs: 1, batch_size: opts.batch_size, lr: opts.lr, seed, log_every: usize::MAX, ..Default::default() };
    let mut opt = OptimState::adam(opts.lr);
    let mut err = student.error_rate(&test);
    let mut epochs = 0;
    while epochs < opts.max_epochs && opts.target_error.is_none_or(|t| err > t) {
        train_mlp(&mut student, &train, &cfg, &mut opt, epochs)?;
        epochs += 1;
        err = student.error_rate(&test);
    }
    if let Some(t) = opts.target_error {
        if err > t {
            return Err(Error::Numeric(format!(
                "pretraining stopped at source test error {err:.4} > target {t} after {epochs} epochs"
            )));
        }
    }
    Ok(Pretrained { student, source_test_error: err, epochs })
}
