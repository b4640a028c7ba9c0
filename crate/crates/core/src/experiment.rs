//! Pretrain → zero-shot → adapt → evaluate pipeline on the synthetic tasks.

use std::time::Instant;

use crate::adapters::{AdapterConfig, Method};
use crate::error::{contract, Result};
use crate::metrics::RunMetrics;
use crate::tasks::{gen_data, make_teacher, pretrain_student, Dataset, Mlp, PretrainOptions, Pretrained, ShiftSpec, ShiftStrength, Split, TeacherTask};
use crate::train::{train_loop, AdaptedModel, StepRecord, TrainConfig};

/// Everything that defines the source task, the student and the target shift.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub d: usize,
    pub classes: usize,
    /// Hidden widths shared by teacher and student.
    pub hidden: Vec<usize>,
    pub task_seed: u64,
    pub student_seed: u64,
    pub pretrain: PretrainOptions,
    pub shift: ShiftStrength,
    pub shift_seed: u64,
    pub n_target_train: usize,
    pub n_test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            d: 32,
            classes: 10,
            hidden: vec![64],
            task_seed: 0,
            student_seed: 0,
            pretrain: PretrainOptions::default(),
            shift: ShiftStrength { s: 16, theta_deg: 60.0, permuted: 0, bias_norm: 0.0 },
            shift_seed: 0,
            n_target_train: 8192,
            n_test: 2048,
        }
    }
}

/// Data and frozen base model shared by every run on one task.
#[derive(Debug, Clone)]
pub struct Environment {
    pub task: TeacherTask,
    pub pretrained: Pretrained,
    pub shift: ShiftSpec,
    pub target_train: Dataset,
    pub target_test: Dataset,
    /// One test set per source domain.
    pub source_tests: Vec<Dataset>,
}

fn derived_seed(base: u64, salt: u64) -> u64 {
    base.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(salt)
}

impl Environment {
    /// Builds the task and pretrains the student.
    pub fn prepare(cfg: &TaskConfig) -> Result<Self> {
        let task = make_teacher(cfg.d, &cfg.hidden, cfg.classes, cfg.task_seed)?;
        let mut pre = cfg.pretrain.clone();
        pre.hidden = cfg.hidden.clone();
        let pretrained = pretrain_student(&task, &pre, cfg.student_seed)?;
        Self::with_student(cfg, task, pretrained)
    }

    /// Builds target and source evaluation data around an existing student.
    pub fn with_student(cfg: &TaskConfig, task: TeacherTask, pretrained: Pretrained) -> Result<Self> {
        if pretrained.student.input_dim() != task.d || pretrained.student.output_dim() != task.classes {
            return contract("student does not match the task dimensions");
        }
        let shift = ShiftSpec::new(task.d, task.classes, cfg.shift, cfg.shift_seed)?;
        let s = derived_seed(cfg.shift_seed, task.seed);
        let target_train = gen_data(&task, Some(&shift), cfg.n_target_train, s.wrapping_add(1))?;
        let target_test = gen_data(&task, Some(&shift), cfg.n_test, s.wrapping_add(2))?.with_split(Split::Test);
        let source_test = gen_data(&task, None, cfg.n_test, s.wrapping_add(3))?.with_split(Split::Test);
        Ok(Self { task, pretrained, shift, target_train, target_test, source_tests: vec![source_test] })
    }

    pub fn student(&self) -> &Mlp {
        &self.pretrained.student
    }
}

/// Adapter configuration for every layer of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    /// Reported method and knobs.
    pub summary: AdapterConfig,
    /// `None` keeps a layer frozen.
    pub layers: Vec<Option<AdapterConfig>>,
}

impl LayerPlan {
    /// The same config on every layer flagged in `adapt`.
    pub fn uniform(cfg: AdapterConfig, adapt: &[bool]) -> Self {
        Self { summary: cfg, layers: adapt.iter().map(|&on| on.then_some(cfg)).collect() }
    }

    /// `cfg` on every layer of `mlp`.
    pub fn all(cfg: AdapterConfig, mlp: &Mlp) -> Self {
        Self::uniform(cfg, &vec![true; mlp.layers.len()])
    }

    /// The method's largest configuration on every layer: `p = 1`, `l = min(n, m − n)`
    /// and `r = n` in each layer's tall orientation. The summary reports the largest `l`/`r`.
    pub fn max(method: Method, tau: f64, mlp: &Mlp) -> Self {
        let layers: Vec<Option<AdapterConfig>> = mlp
            .layers
            .iter()
            .map(|layer| {
                let (a, b) = layer.weight.shape();
                let (m, n) = (a.max(b), a.min(b));
                let mut cfg = AdapterConfig::new(method).with_tau(tau);
                if method.uses_outer() {
                    cfg = cfg.with_l(n.min(m - n));
                }
                if method.uses_rank() {
                    cfg = cfg.with_r(n);
                }
                Some(cfg)
            })
            .collect();
        let mut summary = AdapterConfig::new(method).with_tau(tau);
        summary.l = layers.iter().flatten().map(|c| c.l).max().unwrap_or(0);
        summary.r = layers.iter().flatten().map(|c| c.r).max().unwrap_or(0);
        Self { summary, layers }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub records: Vec<StepRecord>,
    pub model: AdaptedModel,
}

/// Short label such as `ssvd-o_p40_l8` or `lora_r4`.
pub fn run_label(cfg: &AdapterConfig) -> String {
    let mut s = cfg.method.as_str().to_string();
    if cfg.method.uses_inner() {
        s.push_str(&format!("_p{}", (cfg.p * 100.0).round()));
    }
    if cfg.method.uses_outer() {
        s.push_str(&format!("_l{}", cfg.l));
    }
    if cfg.method.uses_rank() {
        s.push_str(&format!("_r{}", cfg.r));
    }
    s
}

/// Adapts the environment's student to the target domain and evaluates it.
/// All evaluations use the merged weights.
pub fn run_adaptation(env: &Environment, plan: &LayerPlan, train: &TrainConfig, run_id: &str) -> Result<RunOutcome> {
    let adapter = &plan.summary;
    let start = Instant::now();
    let base = env.student();
    let zero_shot = base.error_rate(&env.target_test);
    let source_before: Vec<f64> = env.source_tests.iter().map(|d| base.error_rate(d)).collect();

    let mut model = AdaptedModel::per_layer(base, &plan.layers, train.seed)?;
    let records = train_loop(&mut model, &env.target_train, train)?;
    let merged = model.merged()?;
    let target = merged.error_rate(&env.target_test);
    let source_after: Vec<f64> = env.source_tests.iter().map(|d| merged.error_rate(d)).collect();

    let metrics = RunMetrics {
        run_id: run_id.to_string(),
        method: adapter.method,
        p: adapter.method.uses_inner().then_some(adapter.p),
        l: adapter.method.uses_outer().then_some(adapter.l),
        r: adapter.method.uses_rank().then_some(adapter.r),
        trainable: model.trainable_count(),
        seed: train.seed,
        steps: train.epochs * env.target_train.len().div_ceil(train.batch_size),
        train_loss: records.iter().map(|r| (r.step, r.loss)).collect(),
        zero_shot_target_error: zero_shot,
        target_error: target,
        source_before,
        source_after,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { metrics, records, model })
}

/// Convenience for full fine-tuning of every layer.
pub fn full_config() -> AdapterConfig {
    AdapterConfig::new(Method::Full)
}
