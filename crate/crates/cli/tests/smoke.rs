//! End-to-end smoke test of the `iclbench` binary: generate, train (dry run,
//! real, idempotent rerun), report, sweep, bench, and the exit-code
//! contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iclbench"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_MANIFEST: &str = r#"
out_root = "runs"
seeds = [1, 2]

[[runs]]
name = "tiny"
[runs.model]
attention = "quadratic"
layers = 1
d_model = 8
heads = 1
mlp_ratio = 2
d_x = 5
k = 10
eps = 1e-6
[runs.train]
learning_rate = 1e-4
batch_size = 4
steps = 6
grad_clip_max_norm = 1.0
eval_every = 3
bank_size = 16
bank_seed = 1000
precision = "f32"
"#;

#[test]
fn generate_is_deterministic_and_reports_variances() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "generate", "--seed", "5", "--count", "40", "--out", "bank.bin", "--csv", "bank.csv",
    ];
    let out = run(&args, dir.path());
    assert_code(&out, 0);
    assert!(stdout(&out).contains("per-coordinate x variance"));
    assert!(dir.path().join("bank.bin").is_file());
    assert!(dir.path().join("bank.csv").is_file());

    let first = fs::read(dir.path().join("bank.bin")).unwrap();
    let out = run(
        &["generate", "--seed", "5", "--count", "40", "--out", "again.bin"],
        dir.path(),
    );
    assert_code(&out, 0);
    assert_eq!(first, fs::read(dir.path().join("again.bin")).unwrap());

    let out = run(
        &["generate", "--seed", "5", "--count", "40", "--anisotropic", "--out", "a.bin"],
        dir.path(),
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("anisotropic"));
}

#[test]
fn train_report_sweep_flow() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY_MANIFEST).unwrap();

    // Dry run plans 2 jobs and creates nothing.
    let out = run(&["train", "--manifest", "tiny.toml", "--dry-run"], dir.path());
    assert_code(&out, 0);
    assert!(stdout(&out).contains("2 jobs"));
    assert!(!dir.path().join("runs").exists());

    // Real run fills both directories.
    let out = run(&["train", "--manifest", "tiny.toml", "--jobs", "2"], dir.path());
    assert_code(&out, 0);
    assert!(stdout(&out).contains("2/2 jobs succeeded"));
    for seed in [1, 2] {
        let run_dir = dir.path().join(format!("runs/tiny-s{seed}"));
        for file in ["config.toml", "log.jsonl", "ckpt_best.bin", "ckpt_last.bin"] {
            assert!(run_dir.join(file).is_file(), "missing {file} for seed {seed}");
        }
    }
    let log = fs::read_to_string(dir.path().join("runs/tiny-s1/log.jsonl")).unwrap();
    assert!(log.contains("manifest_hash"));

    // Finished runs are idempotent under --resume.
    let out = run(
        &["train", "--manifest", "tiny.toml", "--resume"],
        dir.path(),
    );
    assert_code(&out, 0);

    // Report emits tables, CSVs, and plots; plots regenerate byte-identically.
    let out = run(&["report", "--run-root", "runs"], dir.path());
    assert_code(&out, 0);
    let report_dir = dir.path().join("runs/report");
    assert!(report_dir.join("report.txt").is_file());
    assert!(report_dir.join("report.json").is_file());
    assert!(report_dir.join("curves/tiny-s1.csv").is_file());
    assert!(report_dir.join("curves/tiny-s2.csv").is_file());
    let bars = report_dir.join("plots/robustness.svg");
    assert!(bars.is_file());
    let curves = report_dir.join("plots/curves-quadratic-l1-d8.svg");
    assert!(curves.is_file());

    let first = (fs::read(&bars).unwrap(), fs::read(&curves).unwrap());
    let out = run(&["report", "--run-root", "runs"], dir.path());
    assert_code(&out, 0);
    assert_eq!(first.0, fs::read(&bars).unwrap());
    assert_eq!(first.1, fs::read(&curves).unwrap());

    // A single-value sweep degenerates to one run and names the winner.
    let out = run(
        &[
            "sweep", "--manifest", "tiny.toml", "--axis", "learning-rate", "--values",
            "1e-4", "--out", "sweeps", "--budget-steps", "4",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("winner: 1e-4"));
    assert!(dir.path().join("sweeps/tiny-lr-1e-4-s1/log.jsonl").is_file());
}

#[test]
fn bench_prints_exponents_on_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "bench", "--seq-lens", "8,16,32", "--d-head", "8", "--reps", "2", "--out",
            "bench.txt",
        ],
        dir.path(),
    );
    assert_code(&out, 0);
    assert!(stdout(&out).contains("log-log exponents"));
    assert!(dir.path().join("bench.txt").is_file());
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();

    // Config error: malformed manifest.
    fs::write(dir.path().join("bad.toml"), "out_root = 3").unwrap();
    let out = run(&["train", "--manifest", "bad.toml"], dir.path());
    assert_code(&out, 2);

    // IO error: missing manifest.
    let out = run(&["train", "--manifest", "missing.toml"], dir.path());
    assert_code(&out, 3);

    // Divergence: absurd learning rate held long enough to trip the
    // sustained-degradation monitor.
    let diverging = TINY_MANIFEST
        .replace("learning_rate = 1e-4", "learning_rate = 1e6")
        .replace("steps = 6", "steps = 150")
        .replace("eval_every = 3", "eval_every = 1")
        .replace("seeds = [1, 2]", "seeds = [1]");
    fs::write(dir.path().join("div.toml"), diverging).unwrap();
    let out = run(&["train", "--manifest", "div.toml"], dir.path());
    assert_code(&out, 4);

    // Report on an empty root: no completed runs.
    fs::create_dir(dir.path().join("empty")).unwrap();
    let out = run(&["report", "--run-root", "empty"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}
