use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssvd::adapters::DecomposedWeight;
use ssvd::cli::checkpoint::{read_index, Container};
use ssvd::cli::formats::{read_frontier_csv, read_metrics_csv, read_plan_csv, METRICS_COLUMNS};
use ssvd::cli::{decomposition_from_container, frontier_point_from_rows, read_model_checkpoint, write_model_checkpoint};
use ssvd::densela::Matrix;

/// Small task so each pretraining finishes in well under a second.
const SMALL: &[&str] = &[
    "--d", "8", "--hidden", "16", "--classes", "4", "--pretrain-n", "4096", "--pretrain-target", "0.3", "--n-target-train", "512",
    "--n-test", "512", "--shift", "s=4,theta=60,perm=2", "--epochs", "2", "--batch", "64",
];

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ssvd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ssvd"))
            .args(args)
            .env("SSVD_CACHE_DIR", self.path("cache"))
            .output()
            .expect("binary runs")
    }

    fn run(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec!["run", "--out", out.to_str().unwrap()];
        args.extend_from_slice(SMALL);
        args.extend_from_slice(extra);
        self.ssvd(&args)
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

fn metrics(dir: &Path) -> Vec<ssvd::cli::formats::MetricsRow> {
    read_metrics_csv(fs::File::open(dir.join("metrics.csv")).unwrap()).unwrap()
}

#[test]
fn decompose_prints_sigma_and_writes_readable_containers() {
    let env = Env::new();
    let weights = env.path("w.txt");
    fs::write(&weights, "layer diag 3 3\n3 0 0\n0 2 0\n0 0 1\nlayer wide 4 8\n1 2 0 0 5 0 7 0\n0 1 0 1 0 1 0 1\n2 0 0 0 0 0 0 1\n0 0 3 0 0 1 0 0\n")
        .unwrap();
    let out = env.path("dec");
    let o = env.ssvd(&["decompose", "--weights", weights.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_ok(&o);
    assert!(stdout(&o).lines().any(|l| l == "sigma: 3 2 1"), "{}", stdout(&o));
    assert!(stdout(&o).contains("reconstruction_error="));

    let index = read_index(&out).unwrap();
    assert_eq!(index.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["diag", "wide"]);

    let wide = Container::read(&out.join("wide.ckpt")).unwrap();
    assert_eq!(wide.meta("transposed"), Some("true"));
    let bytes = fs::read(out.join("wide.ckpt")).unwrap();
    assert!(String::from_utf8_lossy(&bytes).contains("meta: transposed=true\n"));

    let w = Matrix::from_rows(&[
        &[1.0, 2.0, 0.0, 0.0, 5.0, 0.0, 7.0, 0.0],
        &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
        &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        &[0.0, 0.0, 3.0, 0.0, 0.0, 1.0, 0.0, 0.0],
    ]);
    let direct = DecomposedWeight::decompose(&w).unwrap();
    let read_back = decomposition_from_container(&wide).unwrap();
    assert_eq!(read_back.factors(), direct.factors());
    assert_eq!(read_back.w0(), direct.w0());
}

#[test]
fn decompose_accepts_container_input_and_rejects_garbage() {
    let env = Env::new();
    let mut c = Container::new("weights", "", 0);
    c.push("fc", Matrix::diag(&[2.0, 1.0]));
    let input = env.path("w.ckpt");
    c.write(&input).unwrap();
    let o = env.ssvd(&["decompose", "--weights", input.to_str().unwrap(), "--out", env.path("d").to_str().unwrap()]);
    assert_ok(&o);
    assert!(stdout(&o).contains("sigma: 2 1"));

    let bad = env.path("bad.txt");
    fs::write(&bad, "layer x 2 2\n1 2\n").unwrap();
    let o = env.ssvd(&["decompose", "--weights", bad.to_str().unwrap(), "--out", env.path("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("weights line"), "{}", stderr(&o));
}

#[test]
fn plan_lists_fitting_configs_as_csv() {
    let env = Env::new();
    let manifest = env.path("m.txt");
    fs::write(&manifest, "fc 8 4 1\n").unwrap();
    let m = manifest.to_str().unwrap();

    let o = env.ssvd(&["plan", "--manifest", m, "--method", "ssvd", "--budget", "20", "--p-grid", "25,50,100"]);
    assert_ok(&o);
    let rows = read_plan_csv(&o.stdout[..]).unwrap();
    let totals: Vec<(Option<f64>, usize)> = rows.iter().map(|r| (r.p, r.total)).collect();
    assert_eq!(totals, [(Some(25.0), 1), (Some(50.0), 3), (Some(100.0), 10)]);

    let out = env.path("plan.csv");
    let o = env.ssvd(&["plan", "--manifest", m, "--method", "ssvd", "--budget", "0", "--out", out.to_str().unwrap()]);
    assert_ok(&o);
    assert_eq!(fs::read_to_string(&out).unwrap(), "method,p,l,r,total,utilization\n");
    assert!(stderr(&o).contains("warning"));

    let o = env.ssvd(&["plan", "--manifest", m, "--method", "ssvd-o", "--budget", "inf", "--l-grid", "5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("'fc'"), "{}", stderr(&o));

    let o = env.ssvd(&["plan", "--manifest", m, "--method", "nope", "--budget", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_writes_schema_checked_metrics_and_a_restorable_checkpoint() {
    let env = Env::new();
    assert_ok(&env.run("a", &["--method", "ssvd-o", "--p", "50", "--l", "2"]));
    assert_ok(&env.run("b", &["--method", "ssvd-o", "--p", "50", "--l", "2"]));
    let a = fs::read(env.path("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(env.path("b/metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&a).starts_with(&(METRICS_COLUMNS.join(",") + "\n")));

    let rows = metrics(&env.path("a"));
    for split in ["train", "target_zero_shot", "target", "source_before", "source_after"] {
        assert!(rows.iter().any(|r| r.split == split), "missing {split}");
    }
    assert!(rows.iter().all(|r| r.method == "ssvd-o" && r.p == Some(50.0) && r.l == Some(2)));

    // Checkpoint: reload, then re-save byte-identically.
    let ckpt = env.path("a/checkpoint");
    let model = read_model_checkpoint(&ckpt).unwrap();
    assert_eq!(model.trainable_count(), rows[0].trainable);
    let again = env.path("again");
    write_model_checkpoint(&again, &model, 0).unwrap();
    for (_, file) in read_index(&ckpt).unwrap() {
        assert_eq!(fs::read(ckpt.join(&file)).unwrap(), fs::read(again.join(&file)).unwrap(), "{file}");
    }
}

#[test]
fn zero_learning_rate_gives_zero_scores() {
    let env = Env::new();
    assert_ok(&env.run("z", &["--method", "ssvd", "--p", "100", "--lr", "0"]));
    let p = frontier_point_from_rows(&metrics(&env.path("z"))).unwrap();
    assert_eq!((p.learning, p.forgetting), (0.0, 0.0));
}

#[test]
fn methods_share_the_metrics_schema() {
    let env = Env::new();
    assert_ok(&env.run("s", &["--method", "ssvd", "--p", "100"]));
    assert_ok(&env.run("l", &["--method", "lora", "--r", "1"]));
    let header = |d: &str| fs::read_to_string(env.path(d).join("metrics.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header("s"), header("l"));
    let (s, l) = (metrics(&env.path("s")), metrics(&env.path("l")));
    assert_eq!(s[0].r, None);
    assert_eq!(l[0].p, None);
    assert_eq!(l[0].r, Some(1));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let env = Env::new();
    let o = env.run("div", &["--method", "full", "--adapt", "all", "--optimizer", "sgd", "--lr", "1e12"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn sweep_then_frontier() {
    let env = Env::new();
    let out = env.path("sweep");
    let mut args = vec!["sweep", "--out", out.to_str().unwrap(), "--method", "ssvd-o", "--p-grid", "25,100", "--l-grid", "0,2"];
    args.extend_from_slice(SMALL);
    // 2 × 2 grid points.
    assert_ok(&env.ssvd(&args));
    let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path().join("metrics.csv")).filter(|p| p.exists()).collect();
    assert_eq!(files.len(), 4);

    let three = env.path("three");
    let mut args = vec!["sweep", "--out", three.to_str().unwrap(), "--method", "ssvd", "--p-grid", "25,50,100"];
    args.extend_from_slice(SMALL);
    assert_ok(&env.ssvd(&args));
    assert_eq!(fs::read_dir(&three).unwrap().count(), 3);

    let csv = env.path("frontier.csv");
    assert_ok(&env.ssvd(&["frontier", "--runs", out.to_str().unwrap(), "--out", csv.to_str().unwrap()]));
    let pts = read_frontier_csv(fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(pts.len(), 4);
    assert!(pts.iter().any(|p| p.pareto));
}

#[test]
fn single_run_is_its_own_frontier() {
    let env = Env::new();
    assert_ok(&env.run("runs/one", &["--method", "ssvd", "--p", "50"]));
    let o = env.ssvd(&["frontier", "--runs", env.path("runs").to_str().unwrap()]);
    assert_ok(&o);
    let pts = read_frontier_csv(&o.stdout[..]).unwrap();
    assert_eq!(pts.len(), 1);
    assert!(pts[0].pareto);
}

#[test]
fn frontier_fixture_and_failures() {
    let env = Env::new();
    let o = env.ssvd(&["frontier", "--fixture", "table1"]);
    assert_ok(&o);
    let pts = read_frontier_csv(&o.stdout[..]).unwrap();
    let full = &pts[0];
    assert_eq!((full.label.as_str(), full.learning, full.forgetting), ("Full fine-tuning", -38.6, 78.1));
    let p40 = pts.iter().find(|p| p.label == "SSVD-O p=40% l=256").unwrap();
    assert_eq!((p40.learning, p40.forgetting, p40.pareto), (-29.7, 17.7, true));
    assert!(!pts.iter().find(|p| p.label == "DoRA r=256").unwrap().pareto);

    fs::create_dir(env.path("empty")).unwrap();
    let o = env.ssvd(&["frontier", "--runs", env.path("empty").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(env.ssvd(&["frontier", "--fixture", "nope"]).status.code(), Some(1));
    assert_eq!(env.ssvd(&["frontier"]).status.code(), Some(1));
}
