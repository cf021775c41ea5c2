use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mrp_core::experiment::Checkpoint;
use mrp_core::metrics::{harmonic_mean, MetricsReport};
use mrp_core::tasks::Dataset;
use tempfile::TempDir;

fn mrp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mrp(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_CONFIG: &str = r#"{
  "model": {"d_p": 2},
  "train": {"hidden": 4, "batch_size": 8, "epochs": 2},
  "diagnose": {"batch_size": 8}
}"#;

const SMALL_SPEC: &str = r#"{"num_classes": 8, "shots": 4, "test_per_class": 4}"#;

/// A temp dir holding `data/` (the small task) and `small.json`.
fn small_workspace() -> TempDir {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("spec.json"), SMALL_SPEC).unwrap();
    fs::write(tmp.path().join("small.json"), SMALL_CONFIG).unwrap();
    ok(tmp.path(), &["gen-data", "--spec", "spec.json", "--out", "data"]);
    tmp
}

fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic_and_prints_the_digest() {
    let tmp = TempDir::new().unwrap();
    let a = ok(tmp.path(), &["gen-data", "--out", "a"]);
    let b = ok(tmp.path(), &["gen-data", "--out", "b"]);
    assert_eq!(a, b);
    let digest = a.trim().strip_prefix("digest ").unwrap();
    assert_eq!(digest.len(), 64);
    assert_eq!(Dataset::load(&tmp.path().join("a")).unwrap().digest(), digest);
    assert_eq!(dir_digest(&tmp.path().join("a")), dir_digest(&tmp.path().join("b")));
    let other = ok(tmp.path(), &["gen-data", "--seed", "1", "--out", "c"]);
    assert_ne!(other, a);
}

#[test]
fn bad_specs_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    fs::write(p.join("broken.json"), "{\n  \"num_classes\": 4,\n").unwrap();
    let out = mrp(p, &["gen-data", "--spec", "broken.json", "--out", "d"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
    fs::write(p.join("unknown.json"), r#"{"num_clases": 4}"#).unwrap();
    assert_eq!(code(&mrp(p, &["gen-data", "--spec", "unknown.json", "--out", "d"])), 2);
    assert_eq!(code(&mrp(p, &["gen-data", "--num-classes", "1", "--out", "d"])), 2);
    assert_eq!(code(&mrp(p, &["gen-data", "--shift", "blur:2", "--out", "d"])), 2);
    assert!(!p.join("d").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    assert_eq!(code(&mrp(p, &["frobnicate"])), 2);
    assert_eq!(code(&mrp(p, &["train", "--out", "x"])), 2);
    assert_eq!(code(&mrp(p, &["train", "--data", "d", "--regime", "maml", "--out", "x"])), 2);
    assert_eq!(code(&mrp(p, &["diagnose", "--checkpoint", "c", "--data", "d", "--mode", "hessian", "--out", "x"])), 2);
    assert_eq!(code(&mrp(p, &["--help"])), 0);
}

#[test]
fn regime_conflicts_fail_before_training() {
    let tmp = small_workspace();
    let p = tmp.path();
    let out = mrp(p, &["train", "--data", "data", "--regime", "plain", "--lambda", "0.1", "--out", "run"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lambda"));
    let out = mrp(p, &["train", "--data", "data", "--regime", "loss-reg", "--gate-override", "0", "--out", "run"]);
    assert_eq!(code(&out), 2);
    fs::write(p.join("typo.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    assert_eq!(code(&mrp(p, &["train", "--config", "typo.json", "--data", "data", "--out", "run"])), 2);
    assert!(!p.join("run").exists());
}

#[test]
fn missing_data_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let out = mrp(tmp.path(), &["train", "--data", "nowhere", "--out", "run"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nowhere"));
}

fn checkpoint(path: &Path) -> Checkpoint {
    Checkpoint::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let tmp = small_workspace();
    let p = tmp.path();
    ok(p, &["train", "--config", "small.json", "--data", "data", "--regime", "plain", "--epochs", "0", "--out", "run"]);
    let ck = checkpoint(&p.join("run/checkpoint.json"));
    assert_eq!(ck.prompts_digest, ck.initial_digest);
    assert_eq!(fs::read_to_string(p.join("run/train_log.jsonl")).unwrap(), "");
}

#[test]
fn training_is_reproducible_and_echoes_the_config() {
    let tmp = small_workspace();
    let p = tmp.path();
    let data_before = dir_digest(&p.join("data"));
    for out in ["a", "b"] {
        fs::create_dir(p.join(out)).unwrap();
        let args = ["train", "--config", "../small.json", "--data", "../data", "--regime", "prometar", "--seed", "3", "--out", "run"];
        ok(&p.join(out), &args);
    }
    let a = dir_digest(&p.join("a/run"));
    assert_eq!(a, dir_digest(&p.join("b/run")));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["checkpoint.json", "config.json", "modulator.json", "prompts.json", "train_log.jsonl"]);
    assert!(p.join("a/run/timing.json").exists());
    assert_eq!(dir_digest(&p.join("data")), data_before);

    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(p.join("a/run/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["train"]["seed"], 3);
    assert_eq!(echoed["train"]["hidden"], 4);
    assert_eq!(echoed["train"]["regime"], "prometar");
    assert_eq!(echoed["out"], "run");
    let log = fs::read_to_string(p.join("a/run/train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    ok(&p.join("a"), &["train", "--config", "../small.json", "--data", "../data", "--regime", "prometar", "--seed", "4", "--out", "other"]);
    assert_ne!(checkpoint(&p.join("a/other/checkpoint.json")).prompts_digest, checkpoint(&p.join("a/run/checkpoint.json")).prompts_digest);
}

fn read_report(path: &Path) -> MetricsReport {
    MetricsReport::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn reference_checkpoint_has_zero_overfitting() {
    let tmp = small_workspace();
    let p = tmp.path();
    let args = ["train", "--config", "small.json", "--data", "data", "--regime", "plain", "--epochs", "0", "--prompt-init-std", "0", "--out", "ref"];
    ok(p, &args);
    ok(p, &["eval", "--checkpoint", "ref/checkpoint.json", "--data", "data", "--out", "ev/report.json"]);
    let report = read_report(&p.join("ev/report.json"));
    assert_eq!(report.rows.len(), 1);
    let r = &report.rows[0];
    assert_eq!((r.base_acc, r.new_acc), (r.ref_base_acc, r.ref_new_acc));
    assert_eq!(r.tos, 0.0);
    assert!(report.reference.contains("zero"));
    assert!(p.join("ev/report.csv").exists());
}

#[test]
fn eval_covers_every_checkpoint_and_shift() {
    let tmp = small_workspace();
    let p = tmp.path();
    let mut cks = Vec::new();
    for regime in ["plain", "loss-reg", "prometar"] {
        for seed in ["0", "1"] {
            let out = format!("{regime}-{seed}");
            ok(p, &["train", "--config", "small.json", "--data", "data", "--regime", regime, "--seed", seed, "--out", &out]);
            cks.push(format!("{out}/checkpoint.json"));
        }
    }
    let mut args = vec!["eval", "--data", "data", "--out", "ev/report.json", "--shift", "none", "--shift", "noise:0"];
    for c in &cks {
        args.extend(["--checkpoint", c.as_str()]);
    }
    ok(p, &args);
    let report = read_report(&p.join("ev/report.json"));
    assert_eq!(report.rows.len(), 6 * 2);
    assert_eq!(report.aggregates.len(), 3 * 2);
    let csv = fs::read_to_string(p.join("ev/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);

    // noise:0 reproduces the unshifted metrics
    let (clean, noise0): (Vec<_>, Vec<_>) = report.rows.iter().partition(|r| r.shift == "none");
    assert_eq!(clean.len(), noise0.len());
    for (a, b) in clean.iter().zip(&noise0) {
        assert_eq!((a.regime.as_str(), a.seed), (b.regime.as_str(), b.seed));
        assert_eq!([a.base_acc, a.new_acc, a.hm, a.ref_base_acc, a.ref_new_acc, a.tos], [b.base_acc, b.new_acc, b.hm, b.ref_base_acc, b.ref_new_acc, b.tos]);
    }

    // thread count does not change the report
    let mut one = Command::new(env!("CARGO_BIN_EXE_mrp"));
    let mut args1 = args.clone();
    args1[4] = "ev1/report.json";
    let out = one.current_dir(p).env("MRP_THREADS", "1").args(&args1).output().unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(p.join("ev1/report.json")).unwrap(), fs::read(p.join("ev/report.json")).unwrap());
    let bad = Command::new(env!("CARGO_BIN_EXE_mrp")).current_dir(p).env("MRP_THREADS", "zero").args(&args1).output().unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let tmp = small_workspace();
    let p = tmp.path();
    ok(p, &["gen-data", "--spec", "spec.json", "--d-x", "12", "--out", "wide"]);
    ok(p, &["train", "--config", "small.json", "--data", "data", "--epochs", "0", "--out", "run"]);
    let out = mrp(p, &["eval", "--checkpoint", "run/checkpoint.json", "--data", "wide", "--out", "ev.json"]);
    assert_eq!(code(&out), 1);
    let msg = stderr(&out);
    assert!(msg.contains("16") && msg.contains("12"), "{msg}");
    assert!(!p.join("ev.json").exists());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let tmp = small_workspace();
    let p = tmp.path();
    ok(p, &["train", "--config", "small.json", "--data", "data", "--epochs", "1", "--out", "run"]);
    let text = fs::read_to_string(p.join("run/checkpoint.json")).unwrap();
    let mut ck: serde_json::Value = serde_json::from_str(&text).unwrap();
    ck["prompts_digest"] = "00".into();
    fs::write(p.join("bad.json"), ck.to_string()).unwrap();
    let out = mrp(p, &["eval", "--checkpoint", "bad.json", "--data", "data", "--out", "ev.json"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bad.json"));
}

fn summary_rows(path: &Path) -> Vec<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader.records().map(|r| r.unwrap().iter().map(str::to_owned).collect()).collect()
}

#[test]
fn report_merges_runs_in_any_order() {
    let tmp = small_workspace();
    let p = tmp.path();
    for seed in ["0", "1", "2"] {
        ok(p, &["train", "--config", "small.json", "--data", "data", "--seed", seed, "--out", &format!("t{seed}")]);
        ok(p, &["eval", "--checkpoint", &format!("t{seed}/checkpoint.json"), "--data", "data", "--out", &format!("r{seed}/report.json")]);
    }
    ok(p, &["report", "--runs", "r0", "r1", "r2", "--out", "a.csv"]);
    ok(p, &["report", "--runs", "r2", "r0/report.json", "r1", "--out", "b.csv"]);
    assert_eq!(fs::read(p.join("a.csv")).unwrap(), fs::read(p.join("b.csv")).unwrap());

    let rows = summary_rows(&p.join("a.csv"));
    assert_eq!(rows.len(), 3 + 2);
    for r in rows.iter().filter(|r| r[1] != "std") {
        let (base, new, hm): (f64, f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap());
        assert!((harmonic_mean(base, new).unwrap() - hm).abs() <= 0.01, "{r:?}");
    }

    ok(p, &["report", "--runs", "r1", "--out", "one.csv"]);
    let one = summary_rows(&p.join("one.csv"));
    let single = read_report(&p.join("r1/report.json"));
    assert_eq!(one.len(), single.rows.len() + 2);
    assert_eq!(one[0][3], format!("{:.4}", single.rows[0].base_acc));
    assert_eq!(one[1][1], "mean");
    assert_eq!(one[1][3..], one[0][3..]);

    let missing = mrp(p, &["report", "--runs", "r0", "r9", "--out", "c.csv"]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("r9"));
    fs::write(p.join("junk.json"), "{\"rows\": 3}").unwrap();
    let junk = mrp(p, &["report", "--runs", "r0", "junk.json", "--out", "c.csv"]);
    assert_eq!(code(&junk), 1);
    assert!(stderr(&junk).contains("junk.json"));
    assert!(!p.join("c.csv").exists());
}

fn diagnose_json(p: &Path, args: &[&str]) -> serde_json::Value {
    ok(p, args);
    let out = args.iter().position(|a| *a == "--out").unwrap() + 1;
    serde_json::from_slice(&fs::read(p.join(args[out])).unwrap()).unwrap()
}

#[test]
fn diagnose_modes() {
    let tmp = small_workspace();
    let p = tmp.path();
    ok(p, &["train", "--config", "small.json", "--data", "data", "--out", "run"]);
    let base = ["diagnose", "--config", "small.json", "--checkpoint", "run/checkpoint.json", "--data", "data"];
    let with = |extra: &[&'static str]| base.iter().copied().chain(extra.iter().copied()).collect::<Vec<_>>();

    let g = diagnose_json(p, &with(&["--mode", "gradcheck", "--out", "g.json"]));
    let report = &g["report"];
    assert_eq!(report["passed"], true);
    assert_eq!(report["entries"][0]["coordinates"], 60);
    assert!(report["entries"][0]["max_rel_err"].as_f64().unwrap() <= 1e-4);

    let fail = mrp(p, &with(&["--mode", "gradcheck", "--rel-tol", "1e-12", "--out", "f.json"]));
    assert_eq!(code(&fail), 1);
    assert!(stderr(&fail).contains(" at theta") || stderr(&fail).contains(" at phi"), "{}", stderr(&fail));

    let t = diagnose_json(p, &with(&["--mode", "taylor", "--out", "t.json"]));
    let stdout = ok(p, &with(&["--mode", "taylor", "--out", "t2.json"]));
    assert_eq!(stdout.matches("ratio").count(), 20 + 20 + 2);
    for key in ["loss_gap", "alignment"] {
        let mean = t["report"][key]["mean_ratio"].as_f64().unwrap();
        assert!((3.5..=4.5).contains(&mean), "{key}: {mean}");
    }

    let closed = diagnose_json(p, &with(&["--mode", "alignment", "--gate", "0", "--out", "a0.json"]));
    assert_eq!(closed["report"]["term_reg_align"], 0.0);
    let open = diagnose_json(p, &with(&["--mode", "alignment", "--out", "a.json"]));
    assert_ne!(open["report"]["term_reg_align"], 0.0);
    assert_eq!(code(&mrp(p, &with(&["--mode", "alignment", "--gate", "2", "--out", "x.json"]))), 2);
}

#[test]
fn benchmark_fans_out_deterministically() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    fs::write(p.join("bench.json"), r#"{"task": {"num_classes": 6, "shots": 4, "test_per_class": 6}, "train": {"epochs": 2}}"#).unwrap();
    let args = ["benchmark", "--config", "bench.json", "--seeds", "2", "--shifts", "noise:0.2,noise:0.5"];
    let run = |out: &str, threads: &str| {
        let mut a = args.to_vec();
        a.extend(["--out", out]);
        let o = Command::new(env!("CARGO_BIN_EXE_mrp")).current_dir(p).env("MRP_THREADS", threads).args(&a).output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("one", "1");
    run("many", "4");
    for f in ["report.json", "report.csv", "summary.csv"] {
        assert_eq!(fs::read(p.join("one").join(f)).unwrap(), fs::read(p.join("many").join(f)).unwrap(), "{f}");
    }
    let report = read_report(&p.join("one/report.json"));
    assert_eq!(report.rows.len(), 2 * 3 * 3);
    assert_eq!(report.aggregates.len(), 3 * 3);
    assert!(p.join("one/runs/prometar-1/checkpoint.json").exists());
    let echoed: serde_json::Value = serde_json::from_slice(&fs::read(p.join("one/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["eval"]["shifts"], serde_json::json!(["noise:0.2", "noise:0.5"]));
}
