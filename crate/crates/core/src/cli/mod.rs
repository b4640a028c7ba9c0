//! Command-line surface: decompose, plan, run, sweep and frontier.
//!
//! Exit codes: 0 success, 1 usage or contract error, 2 numeric failure.

pub mod checkpoint;
pub mod formats;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::adapters::{AdapterConfig, AdapterState, DecomposedWeight, Method, Ranks, DEFAULT_TAU};
use crate::budget::{enumerate_configs, Grid, LayerManifest};
use crate::densela::{Matrix, SvdFactors};
use crate::error::{contract, Error, Result};
use crate::experiment::{run_adaptation, run_label, Environment, LayerPlan, RunOutcome, TaskConfig};
use crate::metrics::{forgetting_score, frontier, learning_score, table1_frontier, FrontierPoint};
use crate::tape::Activation;
use crate::tasks::{make_teacher, pretrain_student, Dense, Mlp, PretrainOptions, Pretrained, ShiftStrength, TeacherTask};
use crate::train::{AdaptedModel, OptimKind, TrainConfig};

use checkpoint::{read_index, write_index, Container};
use formats::{fmt_f64, parse_weights_text, read_metrics_csv, write_frontier_csv, write_metrics_csv, write_plan_csv, MetricsRow};

/// Environment variable naming the pretrained-student cache directory.
pub const CACHE_ENV: &str = "SSVD_CACHE_DIR";

#[derive(Debug, Parser)]
#[command(name = "ssvd", version, about = "Structured SVD-guided adapters: decomposition, budgeting and adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose every layer of a weights file and write one container per layer.
    Decompose {
        #[arg(long)]
        weights: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// List the configurations that fit a trainable-parameter budget.
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        method: Method,
        /// Maximum trainable parameters; `inf` lists the whole grid.
        #[arg(long)]
        budget: f64,
        #[command(flatten)]
        grid: GridArgs,
        /// CSV destination (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain (or load) a student, adapt it to a shifted task and evaluate.
    Run(RunArgs),
    /// Run every grid point of a method, one output directory each.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Learning/forgetting frontier with Pareto flags.
    Frontier {
        /// Directory holding run outputs (searched for metrics.csv).
        #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
        runs: Option<PathBuf>,
        /// Built-in reference data; only `table1` is available.
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Inner ratios in percent, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub l_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub r_grid: Option<Vec<usize>>,
}

impl GridArgs {
    fn grid(&self) -> Grid {
        let d = Grid::default();
        Grid {
            p: self.p_grid.as_ref().map(|v| v.iter().map(|p| p / 100.0).collect()).unwrap_or(d.p),
            l: self.l_grid.clone().unwrap_or(d.l),
            r: self.r_grid.clone().unwrap_or(d.r),
        }
    }
}

/// Input shift, written `s=16,theta=60,perm=0,bias=0` (missing keys are zero) or `none`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftArg(pub ShiftStrength);

impl FromStr for ShiftArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut st = ShiftStrength::NONE;
        if s.trim() == "none" {
            return Ok(Self(st));
        }
        for kv in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got '{kv}'"))?;
            let bad = || format!("bad value for {k}: '{v}'");
            match k {
                "s" => st.s = v.parse().map_err(|_| bad())?,
                "theta" => st.theta_deg = v.parse().map_err(|_| bad())?,
                "perm" => st.permuted = v.parse().map_err(|_| bad())?,
                "bias" => st.bias_norm = v.parse().map_err(|_| bad())?,
                _ => return Err(format!("unknown shift key '{k}' (use s, theta, perm, bias)")),
            }
        }
        Ok(Self(st))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptLayers {
    All,
    /// Every layer except the classifier head.
    Hidden,
}

impl FromStr for AdaptLayers {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "hidden" => Ok(Self::Hidden),
            _ => Err(format!("expected 'all' or 'hidden', got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub task_seed: u64,
    /// Student initialization seed (defaults to the task seed).
    #[arg(long)]
    pub student_seed: Option<u64>,
    #[arg(long, default_value = "s=16,theta=60")]
    pub shift: ShiftArg,
    /// Seed of the shift (defaults to the task seed).
    #[arg(long)]
    pub shift_seed: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long)]
    pub method: Method,
    /// Inner ratio in percent.
    #[arg(long, default_value_t = 100.0)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub l: usize,
    #[arg(long, default_value_t = 4)]
    pub r: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Use the method's largest configuration on every adapted layer.
    #[arg(long)]
    pub max: bool,
    /// Which layers get adapters: `hidden` (classifier head frozen) or `all`.
    #[arg(long, default_value = "hidden")]
    pub adapt: AdaptLayers,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value = "adam")]
    pub optimizer: OptimKind,
    /// Seed of the adapter initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub log_every: usize,
    #[arg(long, default_value_t = 8192)]
    pub n_target_train: usize,
    #[arg(long, default_value_t = 2048)]
    pub n_test: usize,
    #[arg(long, default_value_t = 65_536)]
    pub pretrain_n: usize,
    #[arg(long, default_value_t = 200)]
    pub pretrain_max_epochs: usize,
    /// Source test error the student must reach.
    #[arg(long, default_value_t = 0.10)]
    pub pretrain_target: f64,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    fn task_config(&self) -> TaskConfig {
        TaskConfig {
            d: self.d,
            classes: self.classes,
            hidden: self.hidden.clone(),
            task_seed: self.task_seed,
            student_seed: self.student_seed.unwrap_or(self.task_seed),
            pretrain: PretrainOptions {
                hidden: self.hidden.clone(),
                n_train: self.pretrain_n,
                max_epochs: self.pretrain_max_epochs,
                target_error: Some(self.pretrain_target),
                ..Default::default()
            },
            shift: self.shift.0,
            shift_seed: self.shift_seed.unwrap_or(self.task_seed),
            n_target_train: self.n_target_train,
            n_test: self.n_test,
        }
    }

    fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig::new(self.method).with_p(self.p / 100.0).with_l(self.l).with_r(self.r).with_tau(self.tau)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            seed: self.seed,
            optimizer: self.optimizer,
            log_every: self.log_every,
        }
    }

    fn plan(&self, student: &Mlp, cfg: AdapterConfig) -> LayerPlan {
        let mut plan = if self.max { LayerPlan::max(self.method, self.tau, student) } else { LayerPlan::all(cfg, student) };
        if self.adapt == AdaptLayers::Hidden && plan.layers.len() > 1 {
            *plan.layers.last_mut().unwrap() = None;
        }
        plan
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Decompose { weights, out } => cmd_decompose(&weights, &out),
        Command::Plan { manifest, method, budget, grid, out } => cmd_plan(&manifest, method, budget, &grid.grid(), out.as_deref()),
        Command::Run(args) => cmd_run(&args, None).map(|_| ()),
        Command::Sweep { run, grid } => cmd_sweep(&run, &grid.grid()).map(|_| ()),
        Command::Frontier { runs, fixture, out } => cmd_frontier(runs.as_deref(), fixture.as_deref(), out.as_deref()),
    }
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

/// Reads layer weights from a container (one array per layer) or the text format.
pub fn read_weights(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let bytes = fs::read(path)?;
    if Container::is_container(&bytes) {
        let c = Container::from_bytes(&bytes)?;
        if c.arrays.is_empty() {
            return Err(Error::Parse("weights container holds no arrays".into()));
        }
        for (name, m) in &c.arrays {
            if m.is_empty() || !m.is_finite() {
                return Err(Error::Parse(format!("weights array '{name}' is empty or non-finite")));
            }
        }
        Ok(c.arrays)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse("weights file is neither a container nor text".into()))?;
        parse_weights_text(&text)
    }
}

fn fmt_shortest(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ")
}

pub fn decomposition_container(name: &str, dw: &DecomposedWeight) -> Container {
    let f = dw.factors();
    let mut c = Container::new("svd", format!("m={} n={}", dw.m(), dw.n()), 0)
        .with_meta("layer", name)
        .with_meta("transposed", dw.is_transposed());
    c.push("w0", dw.w0().clone());
    c.push("u", f.u.clone());
    if let Some(u2) = &f.u2 {
        c.push("u2", u2.clone());
    }
    c.push("sigma", Matrix::column(&f.sigma));
    c.push("v", f.v.clone());
    c
}

pub fn decomposition_from_container(c: &Container) -> Result<DecomposedWeight> {
    let transposed = match c.meta("transposed") {
        Some("true") => true,
        Some("false") => false,
        _ => return Err(Error::Parse("container lacks transposed=true|false".into())),
    };
    let factors = SvdFactors {
        u: c.require("u")?.clone(),
        u2: c.array("u2").cloned(),
        sigma: c.require("sigma")?.as_slice().to_vec(),
        v: c.require("v")?.clone(),
    };
    DecomposedWeight::from_parts(c.require("w0")?.clone(), factors, transposed)
}

pub fn cmd_decompose(weights: &Path, out: &Path) -> Result<()> {
    let layers = read_weights(weights)?;
    fs::create_dir_all(out)?;
    let mut members = Vec::new();
    for (name, w) in &layers {
        let dw = DecomposedWeight::decompose(w)?;
        let file = format!("{name}.ckpt");
        decomposition_container(name, &dw).write(&out.join(&file))?;
        members.push((name.clone(), file));
        println!(
            "{name}: {}x{} stored {}x{} transposed={} reconstruction_error={:e}",
            w.rows(),
            w.cols(),
            dw.m(),
            dw.n(),
            dw.is_transposed(),
            dw.reconstruction_error()
        );
        println!("sigma: {}", fmt_shortest(&dw.factors().sigma));
    }
    write_index(out, &members)
}

pub fn cmd_plan(manifest: &Path, method: Method, budget: f64, grid: &Grid, out: Option<&Path>) -> Result<()> {
    if budget.is_nan() || budget < 0.0 {
        return contract(format!("budget must be non-negative, got {budget}"));
    }
    let manifest: LayerManifest = fs::read_to_string(manifest)?.parse()?;
    let plans = enumerate_configs(&manifest, method, budget, grid)?;
    if plans.is_empty() {
        eprintln!("warning: no {method} configuration fits a budget of {budget}");
    }
    write_plan_csv(output(out)?, &plans)
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ssvd-cache"))
}

fn student_key(cfg: &TaskConfig) -> String {
    let p = &cfg.pretrain;
    let hidden: Vec<String> = cfg.hidden.iter().map(|h| h.to_string()).collect();
    format!(
        "d={} hidden={} classes={} task_seed={} student_seed={} n_train={} n_test={} max_epochs={} batch={} lr={} target={}",
        cfg.d,
        hidden.join("x"),
        cfg.classes,
        cfg.task_seed,
        cfg.student_seed,
        p.n_train,
        p.n_test,
        p.max_epochs,
        p.batch_size,
        p.lr,
        p.target_error.map(|t| t.to_string()).unwrap_or_else(|| "none".into())
    )
}

pub fn mlp_container(mlp: &Mlp, method: &str, config: String, seed: u64) -> Container {
    let act = match mlp.activation {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
    };
    let mut c = Container::new(method, config, seed).with_meta("activation", act);
    for (i, l) in mlp.layers.iter().enumerate() {
        c.push(format!("layer{i}.weight"), l.weight.clone());
        c.push(format!("layer{i}.bias"), l.bias.clone());
    }
    c
}

pub fn mlp_from_container(c: &Container) -> Result<Mlp> {
    let activation = match c.meta("activation") {
        Some("tanh") => Activation::Tanh,
        Some("relu") => Activation::Relu,
        _ => return Err(Error::Parse("container lacks a known activation".into())),
    };
    let mut layers = Vec::new();
    while let Some(w) = c.array(&format!("layer{}.weight", layers.len())) {
        let b = c.require(&format!("layer{}.bias", layers.len()))?;
        layers.push(Dense { weight: w.clone(), bias: b.clone() });
    }
    if layers.is_empty() {
        return Err(Error::Parse("container holds no layers".into()));
    }
    Ok(Mlp { layers, activation })
}

/// Loads the pretrained student for `cfg` from the cache, or trains and stores it.
pub fn cached_student(cfg: &TaskConfig) -> Result<(TeacherTask, Pretrained)> {
    let task = make_teacher(cfg.d, &cfg.hidden, cfg.classes, cfg.task_seed)?;
    let key = student_key(cfg);
    let dir = cache_dir();
    let file = dir.join(format!(
        "student-t{}-s{}-{:016x}.ckpt",
        cfg.task_seed,
        cfg.student_seed,
        key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    ));
    if let Ok(c) = Container::read(&file) {
        if c.config == key {
            if let (Ok(student), Some(err), Some(epochs)) = (mlp_from_container(&c), c.meta("source_error"), c.meta("epochs")) {
                if let (Ok(source_test_error), Ok(epochs)) = (err.parse(), epochs.parse()) {
                    return Ok((task, Pretrained { student, source_test_error, epochs }));
                }
            }
        }
    }
    let pretrained = pretrain_student(&task, &cfg.pretrain, cfg.student_seed)?;
    let c = mlp_container(&pretrained.student, "student", key, cfg.student_seed)
        .with_meta("source_error", fmt_f64(pretrained.source_test_error))
        .with_meta("epochs", pretrained.epochs);
    if fs::create_dir_all(&dir).is_ok() {
        // Write then rename so concurrent runs never see a partial file.
        let tmp = dir.join(format!("{}.tmp{}", file.file_name().unwrap().to_string_lossy(), std::process::id()));
        if c.write(&tmp).is_ok() {
            let _ = fs::rename(&tmp, &file);
        }
    }
    Ok((task, pretrained))
}

fn ranks_config(state: &AdapterState) -> String {
    let Ranks { k, l, r } = state.ranks();
    let tau = match state {
        AdapterState::SsvdO(s) => s.tau,
        _ => DEFAULT_TAU,
    };
    format!("k={k} l={l} r={r} tau={}", fmt_f64(tau))
}

/// Writes the adapted model as `base.ckpt` plus one container per adapted layer.
pub fn write_model_checkpoint(dir: &Path, model: &AdaptedModel, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut members = vec![("base".to_string(), "base.ckpt".to_string())];
    mlp_container(model.base(), "base", String::new(), seed).write(&dir.join("base.ckpt"))?;
    for (i, dw, state) in model.adapted() {
        let mut c = decomposition_container(&format!("layer{i}"), dw);
        c.method = state.method().as_str().to_string();
        c.config = ranks_config(state);
        c.seed = seed;
        for (name, m) in state.params().into_iter().chain(state.frozen()) {
            c.push(format!("state.{name}"), m.clone());
        }
        let file = format!("layer{i}.ckpt");
        c.write(&dir.join(&file))?;
        members.push((format!("layer{i}"), file));
    }
    write_index(dir, &members)
}

/// Restores a model written by [`write_model_checkpoint`].
pub fn read_model_checkpoint(dir: &Path) -> Result<AdaptedModel> {
    let members = read_index(dir)?;
    let base_file = members.iter().find(|(n, _)| n == "base").ok_or_else(|| Error::Parse("index lacks base".into()))?;
    let base = mlp_from_container(&Container::read(&dir.join(&base_file.1))?)?;
    let mut parts: Vec<Option<(DecomposedWeight, AdapterState)>> = vec![None; base.layers.len()];
    for (name, file) in &members {
        let Some(i) = name.strip_prefix("layer").and_then(|s| s.parse::<usize>().ok()) else { continue };
        if i >= parts.len() {
            return Err(Error::Parse(format!("index names layer {i} beyond the base model")));
        }
        let c = Container::read(&dir.join(file))?;
        let dw = decomposition_from_container(&c)?;
        let method: Method = c.method.parse()?;
        let get = |k: &str| -> Result<usize> {
            c.config_value(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse(format!("config lacks {k}")))
        };
        let ranks = Ranks { k: get("k")?, l: get("l")?, r: get("r")? };
        let tau: f64 = c.config_value("tau").and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_TAU);
        let arrays: Vec<(String, Matrix)> = c
            .arrays
            .iter()
            .filter_map(|(n, m)| n.strip_prefix("state.").map(|s| (s.to_string(), m.clone())))
            .collect();
        let state = AdapterState::from_arrays(method, ranks, tau, &arrays, &dw)?;
        parts[i] = Some((dw, state));
    }
    AdaptedModel::from_parts(&base, parts)
}

/// Metrics CSV rows for one run: logged training steps, then the evaluations.
pub fn metrics_rows(outcome: &RunOutcome, env: &Environment) -> Result<Vec<MetricsRow>> {
    let m = &outcome.metrics;
    let row = |step: usize, split: &str, loss: f64, error: f64| MetricsRow {
        run_id: m.run_id.clone(),
        method: m.method.as_str().to_string(),
        p: m.p.map(|p| p * 100.0),
        l: m.l,
        r: m.r,
        trainable: m.trainable,
        seed: m.seed,
        step,
        split: split.to_string(),
        loss,
        error,
    };
    let mut rows: Vec<MetricsRow> = outcome.records.iter().map(|r| row(r.step, "train", r.loss, r.error)).collect();
    let merged = outcome.model.merged()?;
    let base = env.student();
    let (zl, ze) = base.evaluate(&env.target_test);
    rows.push(row(0, "target_zero_shot", zl, ze));
    let (tl, te) = merged.evaluate(&env.target_test);
    rows.push(row(m.steps, "target", tl, te));
    for src in &env.source_tests {
        let (bl, be) = base.evaluate(src);
        rows.push(row(0, "source_before", bl, be));
    }
    for src in &env.source_tests {
        let (al, ae) = merged.evaluate(src);
        rows.push(row(m.steps, "source_after", al, ae));
    }
    Ok(rows)
}

/// Runs one adaptation and writes `metrics.csv` and `checkpoint/` under `args.out`.
pub fn cmd_run(args: &RunArgs, cfg_override: Option<AdapterConfig>) -> Result<RunOutcome> {
    let task_cfg = args.task_config();
    let (task, pretrained) = cached_student(&task_cfg)?;
    let env = Environment::with_student(&task_cfg, task, pretrained)?;
    let plan = args.plan(env.student(), cfg_override.unwrap_or_else(|| args.adapter_config()));
    let label = if args.max { format!("{}_max", args.method.as_str()) } else { run_label(&plan.summary) };
    let run_id = args.run_id.clone().unwrap_or(label);
    let outcome = run_adaptation(&env, &plan, &args.train_config(), &run_id)?;

    fs::create_dir_all(&args.out)?;
    let rows = metrics_rows(&outcome, &env)?;
    write_metrics_csv(fs::File::create(args.out.join("metrics.csv"))?, &rows)?;
    write_model_checkpoint(&args.out.join("checkpoint"), &outcome.model, args.seed)?;
    let m = &outcome.metrics;
    println!(
        "{run_id}: trainable={} zero_shot={:.4} target={:.4} learning={:+.2} forgetting={:+.2} (error-rate points)",
        m.trainable,
        m.zero_shot_target_error,
        m.target_error,
        100.0 * m.learning(),
        100.0 * m.forgetting()?
    );
    Ok(outcome)
}

/// Grid points of `method`: every `(p, l, r)` combination the method uses.
pub fn sweep_configs(args: &RunArgs, grid: &Grid) -> Vec<AdapterConfig> {
    let method = args.method;
    let ps: Vec<f64> = if method.uses_inner() { grid.p.clone() } else { vec![1.0] };
    let ls: Vec<usize> = if method.uses_outer() { grid.l.clone() } else { vec![0] };
    let rs: Vec<usize> = if method.uses_rank() { grid.r.clone() } else { vec![args.r] };
    let mut out = Vec::new();
    for &p in &ps {
        for &l in &ls {
            for &r in &rs {
                out.push(AdapterConfig::new(method).with_p(p).with_l(l).with_r(r).with_tau(args.tau));
            }
        }
    }
    out
}

pub fn cmd_sweep(args: &RunArgs, grid: &Grid) -> Result<Vec<RunOutcome>> {
    let mut outcomes = Vec::new();
    for cfg in sweep_configs(args, grid) {
        let label = run_label(&cfg);
        let point = RunArgs { out: args.out.join(&label), run_id: Some(label), max: false, ..args.clone() };
        outcomes.push(cmd_run(&point, Some(cfg))?);
    }
    Ok(outcomes)
}

fn find_metrics(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() && depth > 0 {
            find_metrics(&p, depth - 1, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.csv") {
            found.push(p);
        }
    }
    Ok(())
}

/// Frontier point of one metrics CSV, in error-rate points.
pub fn frontier_point_from_rows(rows: &[MetricsRow]) -> Result<FrontierPoint> {
    let errors = |split: &str| rows.iter().filter(|r| r.split == split).map(|r| r.error).collect::<Vec<f64>>();
    let (zs, tg) = (errors("target_zero_shot"), errors("target"));
    if zs.len() != 1 || tg.len() != 1 {
        return Err(Error::Parse("metrics file needs one target_zero_shot and one target row".into()));
    }
    let forgetting = forgetting_score(&errors("source_before"), &errors("source_after"))?;
    let label = rows.first().map(|r| r.run_id.clone()).unwrap_or_default();
    Ok(FrontierPoint::new(label, 100.0 * learning_score(zs[0], tg[0]), 100.0 * forgetting))
}

pub fn cmd_frontier(runs: Option<&Path>, fixture: Option<&str>, out: Option<&Path>) -> Result<()> {
    let points = match (runs, fixture) {
        (_, Some("table1")) => table1_frontier(),
        (_, Some(other)) => return contract(format!("unknown fixture '{other}' (available: table1)")),
        (Some(dir), None) => {
            let mut files = Vec::new();
            find_metrics(dir, 2, &mut files)?;
            if files.is_empty() {
                return contract(format!("no metrics.csv found under {}", dir.display()));
            }
            let pts = files
                .iter()
                .map(|f| frontier_point_from_rows(&read_metrics_csv(fs::File::open(f)?)?))
                .collect::<Result<Vec<_>>>()?;
            frontier(pts)?
        }
        (None, None) => return contract("frontier needs --runs or --fixture"),
    };
    write_frontier_csv(output(out)?, &points)
}
