//! End-to-end runs of the `slicesr` binary on small phantoms.

use std::path::Path;
use std::process::{Command, Output};

fn slicesr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicesr"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = slicesr(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    slicesr(args, dir).status.code().expect("exited normally")
}

const TINY_MODEL: [&str; 10] = [
    "--embed-dim", "8", "--heads", "2", "--encoder-depth", "1", "--n-fim", "1", "--window", "8",
];

fn phantom(dir: &Path, stem: &str, seed: &str) {
    ok(
        &["gen-phantom", "--dims", "16,32,32", "--seed", seed, "--stem", stem, "-o", "data"],
        dir,
    );
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "data", "-o", out, "--patch", "2,32,32"];
    args.extend(TINY_MODEL);
    args.extend(extra);
    ok(&args, dir)
}

#[test]
fn phantom_train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    phantom(dir, "a", "1");
    assert!(dir.join("data/a.thin.vsrv").exists());
    assert!(dir.join("data/a.thick.vsrv").exists());

    let report = train(dir, "run", &["--steps", "3", "--checkpoint-interval", "2"]);
    assert!(report.contains("loss"), "{report}");
    for f in ["step-2.ckpt", "final.ckpt", "trace.csv"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let trace = std::fs::read_to_string(dir.join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    ok(
        &["infer", "data/a.thick.vsrv", "--checkpoint", "run/final.ckpt", "-o", "data/a.sr.vsrv"],
        dir,
    );
    let out = ok(&["eval", "--sr", "data", "--with-baseline", "-o", "eval.jsonl"], dir);
    assert!(out.contains("model") && out.contains("cubic"), "{out}");
    let jsonl = std::fs::read_to_string(dir.join("eval.jsonl")).unwrap();
    let headers = jsonl.lines().filter(|l| l.contains("\"eval_report\"")).count();
    assert_eq!(headers, 2, "{jsonl}");
}

#[test]
fn resume_matches_uninterrupted_training() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    phantom(dir, "a", "2");
    train(dir, "straight", &["--steps", "4"]);
    train(dir, "first", &["--steps", "4", "--checkpoint-interval", "2"]);
    ok(
        &["train", "--data", "data", "-o", "resumed", "--resume", "first/step-2.ckpt"],
        dir,
    );
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("straight/trace.csv"), read("resumed/trace.csv"));
    // The stored run settings differ (checkpoint interval), the state must not.
    let load = |p: &str| slicesr::model::load_checkpoint(dir.join(p)).unwrap();
    let (a, b) = (load("straight/final.ckpt"), load("resumed/final.ckpt"));
    assert_eq!(a.step, b.step);
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
}

#[test]
fn infer_rejects_scale_mismatch_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    phantom(dir, "a", "3");
    train(dir, "run", &["--steps", "1"]);
    let args = [
        "infer", "data/a.thick.vsrv", "--checkpoint", "run/final.ckpt", "-o", "x.vsrv", "-r", "2",
    ];
    assert_eq!(code(&args, dir), 2);
    assert!(!dir.join("x.vsrv").exists());
    let missing = ["infer", "data/a.thick.vsrv", "--checkpoint", "nope.ckpt", "-o", "x.vsrv"];
    assert_eq!(code(&missing, dir), 3);
}

#[test]
fn validation_failures_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.toml"), "model.embed = 3\n").unwrap();
    assert_eq!(code(&["gen-phantom", "--config", "bad.toml"], dir), 2);
    assert_eq!(code(&["gen-phantom", "--dims", "8,32,32"], dir), 2);
    std::fs::create_dir(dir.join("empty")).unwrap();
    assert_eq!(code(&["train", "--data", "empty"], dir), 2);
    // Heads must divide the embedding width.
    phantom(dir, "a", "4");
    assert_eq!(code(&["train", "--data", "data", "--embed-dim", "6", "--heads", "4"], dir), 2);
    // A patch larger than the volume is rejected before anything is written.
    let args = ["train", "--data", "data", "--patch", "8,32,32", "-o", "nothing"];
    assert_eq!(code(&args, dir), 2);
    assert!(!dir.join("nothing").exists());
    assert_eq!(code(&["no-such-command"], dir), 2);
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), "[phantom]\ndims = [16, 32, 32]\nthick_factor = 2\n").unwrap();
    ok(&["gen-phantom", "--config", "run.toml", "-o", "a"], dir);
    ok(&["gen-phantom", "--config", "run.toml", "--thick-factor", "4", "-o", "b"], dir);
    let depth = |p: &str| slicesr::volume::read_volume(dir.join(p)).unwrap().depth();
    assert_eq!(depth("a/phantom.thick.vsrv"), 8);
    assert_eq!(depth("b/phantom.thick.vsrv"), 4);
    assert_eq!(depth("b/phantom.thin.vsrv"), 16);
}

#[test]
fn pseudo_lr_reports_every_decision() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["gen-phantom", "--dims", "40,32,32", "-o", "data"], dir);
    let out = ok(
        &["make-pseudo-lr", "data/phantom.thin.vsrv", "--min-slices", "10", "-o", "pseudo"],
        dir,
    );
    assert!(out.contains("k=2: accepted") && out.contains("k=3: accepted"), "{out}");
    assert!(out.contains("k=4: rejected"), "{out}");
    assert!(dir.join("pseudo/phantom.pseudo-k2.vsrv").exists());
    assert!(dir.join("pseudo/phantom.pseudo-k3.vsrv").exists());
    assert!(!dir.join("pseudo/phantom.pseudo-k4.vsrv").exists());

    // Pseudo volumes feed training as extra targets.
    ok(&["gen-phantom", "--dims", "16,32,32", "-o", "pairs"], dir);
    let mut args = vec![
        "train", "--data", "pairs", "--pseudo", "pseudo", "--steps", "2", "--patch", "2,32,32",
        "--real-only-steps", "0", "--pseudo-fraction", "1", "-o", "run",
    ];
    args.extend(TINY_MODEL);
    ok(&args, dir);
}

#[test]
fn eval_skips_mismatched_pairs_and_slice_sim_reports_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    phantom(dir, "a", "5");
    phantom(dir, "b", "6");
    // a: the reference itself as prediction; b: a wrong-shaped prediction.
    std::fs::copy(dir.join("data/a.thin.vsrv"), dir.join("data/a.sr.vsrv")).unwrap();
    std::fs::copy(dir.join("data/b.thick.vsrv"), dir.join("data/b.sr.vsrv")).unwrap();
    let out = ok(&["eval", "--sr", "data"], dir);
    assert!(out.contains("identical"), "{out}");
    let jsonl = std::fs::read_to_string(dir.join("eval.jsonl")).unwrap();
    assert!(jsonl.contains("\"id\":\"a\"") && !jsonl.contains("\"id\":\"b\""), "{jsonl}");

    let out = ok(&["slice-sim", "--data", "data", "--reduce-window"], dir);
    for g in ["match", "near", "far"] {
        assert!(out.contains(g), "{out}");
    }
    let jsonl = std::fs::read_to_string(dir.join("slice-sim.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(v["kind"], "slice_similarity");
    assert_eq!(v["groups"].as_array().unwrap().len(), 3);
}
