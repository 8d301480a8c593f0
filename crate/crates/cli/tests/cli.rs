//! End-to-end runs of the `lomt` binary on tiny configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn tiny(name: &str, kind: &str, tasks: &[&str], lambda: f64) -> Value {
    json!({
        "name": name,
        "kind": kind,
        "backbone": {
            "input_channels": 1,
            "branch_init_scale": 0.5,
            "blocks": [
                {"width": 3, "projection": true, "bias": false},
                {"width": 3, "bias": false},
                {"width": 3, "dilation": 2, "bias": false}
            ]
        },
        "tasks": tasks,
        "train": {"optimizer": {"lambda": lambda, "alpha": 0.05, "epochs": 1, "batch_size": 4}, "seeds": [0, 1]},
        "data": {"generate": {"scene": {"size": 8}, "seed": 3, "n": 24}},
        "output_root": "runs"
    })
}

fn write_config(dir: &Path, file: &str, config: &Value) -> PathBuf {
    let path = dir.join(file);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn lomt(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lomt"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("LOMT_OUT")
        .output()
        .unwrap()
}

fn stderr_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).expect("error record on stderr");
    serde_json::from_str(line).unwrap()
}

#[test]
fn negative_lambda_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("bad", "sparse-stl", &["edge"], 1e-3));
    let out = lomt(&["train-stl", "--set", "train.optimizer.lambda=-0.5"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_record(&out);
    assert_eq!(rec["field"], "train.optimizer.lambda");
    assert_eq!(rec["kind"], "config");
    assert!(!dir.path().join("runs/bad").exists());
}

#[test]
fn schema_violations_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny("x", "sparse-stl", &["edge"], 1e-3);
    c["surprise"] = json!(1);
    let cfg = write_config(dir.path(), "c.json", &c);
    assert_eq!(lomt(&["train-stl"], &cfg).status.code(), Some(2));

    let cfg = write_config(dir.path(), "d.json", &tiny("x", "sparse-stl", &["surface-normals"], 1e-3));
    let out = lomt(&["train-stl"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["field"], "tasks[0]");

    let cfg = write_config(dir.path(), "e.json", &tiny("x", "sparse-stl", &["edge", "distance"], 1e-3));
    assert_eq!(lomt(&["train-stl"], &cfg).status.code(), Some(2));
    let cfg = write_config(dir.path(), "f.json", &tiny("x", "dense-mtl", &["edge", "distance"], 1e-3));
    assert_eq!(lomt(&["train-mtl"], &cfg).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny("boom", "dense-stl", &["distance"], 0.0);
    c["train"]["optimizer"]["alpha"] = json!(1e30);
    c["train"]["optimizer"]["epochs"] = json!(5);
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = lomt(&["train-stl"], &cfg);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/boom/error.json")).unwrap()).unwrap();
    assert_eq!(rec["kind"], "divergence");
}

#[test]
fn run_directory_keeps_a_byte_identical_config_and_the_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("snap", "sparse-stl", &["edge"], 1e-3));
    let out = lomt(&["train-stl", "--seed", "4", "--set", "train.optimizer.alpha=0.02"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/snap");
    assert_eq!(std::fs::read(run.join("config.json")).unwrap(), std::fs::read(&cfg).unwrap());
    let overrides: Value = serde_json::from_str(&std::fs::read_to_string(run.join("overrides.json")).unwrap()).unwrap();
    assert_eq!(overrides["train.optimizer.alpha"], "0.02");
    // --seed replaces the configured seeds
    assert!(run.join("seed-4/history.jsonl").exists());
    assert!(!run.join("seed-0").exists());
    for f in ["pattern.json", "pattern.csv", "pattern.svg", "metrics.json", "checkpoint.json"] {
        assert!(run.join("seed-4").join(f).exists(), "{f}");
    }
}

#[test]
fn output_root_follows_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("env", "dense-stl", &["edge"], 0.0));
    let out = Command::new(env!("CARGO_BIN_EXE_lomt"))
        .args(["train-stl", "--seed", "0", "--config"])
        .arg(&cfg)
        .env("LOMT_OUT", elsewhere.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.path().join("env/seed-0/metrics.json").exists());
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn sweep_writes_one_directory_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny("sw", "sparse-stl", &["edge"], 1e-3);
    c["sweep"] = json!({"lambdas": [1e-4, 5e-4]});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = lomt(&["sweep", "--seed", "0"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/sw");
    for l in ["lambda-1e-4", "lambda-5e-4"] {
        assert!(run.join(l).join("seed-0/pattern.json").exists(), "{l}");
    }
    let csv = std::fs::read_to_string(run.join("sparsity_vs_lambda.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,seed,percent_sparsity,last_active_layer");
    assert_eq!(lines.len(), 3);

    let cfg = write_config(dir.path(), "empty.json", &{
        let mut c = c.clone();
        c["sweep"] = json!({"lambdas": []});
        c
    });
    assert_eq!(lomt(&["sweep"], &cfg).status.code(), Some(2));
}

fn fake_pattern(run: &Path, seed: u64, active: &[bool]) {
    let layers: Vec<Value> = active
        .iter()
        .enumerate()
        .map(|(i, &a)| json!({"layer_id": i, "zero": [!a, true, true, true, true, true]}))
        .collect();
    let p = json!({"task_name": "x", "lambda": 1e-3, "seed": seed, "layers": layers});
    let sd = run.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&sd).unwrap();
    std::fs::write(sd.join("pattern.json"), p.to_string()).unwrap();
}

#[test]
fn planning_reads_patterns_only() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("p1");
    fake_pattern(&p1.join("edge"), 0, &[true, false, false]);
    fake_pattern(&p1.join("edge"), 1, &[true, true, false]);
    fake_pattern(&p1.join("distance"), 0, &[true, true, false]);
    fake_pattern(&p1.join("distance"), 1, &[true, true, false]);
    let mut c = tiny("plan", "lomt", &["edge", "distance"], 0.0);
    c["phase1_runs"] = json!({"edge": "p1/edge", "distance": "p1/distance"});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = lomt(&["plan-lomt"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let taps: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/plan/taps.json")).unwrap()).unwrap();
    assert_eq!(taps["edge"]["per_seed"]["0"], 0);
    assert_eq!(taps["edge"]["per_seed"]["1"], 1);
    assert_eq!(taps["edge"]["modal"], 0);
    assert_eq!(taps["distance"]["modal"], 1);

    // the LOMT model is trained on the planned, truncated backbone
    let out = lomt(&["train-mtl", "--seed", "0"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/plan/seed-0/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(m["taps"]["edge"], 0);
    assert_eq!(m["equivalent_to_dense_mtl"], false);
    assert!(m["parameters"]["backbone"].as_u64() < m["parameters"]["full_backbone"].as_u64());
}

#[test]
fn planning_failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("p1");
    fake_pattern(&p1.join("edge"), 0, &[true, true, true]);
    fake_pattern(&p1.join("distance"), 0, &[false, false, false]);
    let mut c = tiny("plan", "lomt", &["edge", "distance"], 0.0);
    c["phase1_runs"] = json!({"edge": "p1/edge", "distance": "p1/distance"});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = lomt(&["plan-lomt", "--seed", "0"], &cfg);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_record(&out)["kind"], "all-zero-sparsity");

    let out = lomt(&["plan-lomt", "--seed", "1"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["field"], "phase1_runs.edge");

    let mut c = tiny("plan2", "lomt", &["edge", "distance"], 0.0);
    c["phase1_runs"] = json!({"edge": "p1/edge"});
    let cfg = write_config(dir.path(), "d.json", &c);
    let out = lomt(&["plan-lomt", "--seed", "0"], &cfg);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dense_phase_one_patterns_flag_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("p1");
    fake_pattern(&p1.join("edge"), 0, &[true, true, true]);
    let mut c = tiny("dense-plan", "lomt", &["edge"], 0.0);
    c["phase1_runs"] = json!({"edge": "p1/edge"});
    let cfg = write_config(dir.path(), "c.json", &c);
    let out = lomt(&["plan-lomt", "--seed", "0"], &cfg);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("equivalent-to-dense-mtl"));
    let t: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("runs/dense-plan/seed-0/taps.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(t["equivalent_to_dense_mtl"], true);
}

#[test]
fn single_seed_report_leaves_std_empty_and_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("one", "sparse-stl", &["edge"], 1e-3));
    assert!(lomt(&["train-stl", "--seed", "0"], &cfg).status.success());
    let mut r = tiny("rep", "dense-mtl", &["edge"], 0.0);
    r["report_runs"] = json!(["runs/one"]);
    let rcfg = write_config(dir.path(), "r.json", &r);
    let out = lomt(&["report"], &rcfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("single seed"));
    let rep = dir.path().join("runs/rep");
    let csv = std::fs::read_to_string(rep.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("task,metric,mean,std,seeds"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], &["edge", "mae"]);
    assert_eq!(row[3], "");
    assert_eq!(row[4], "0");
    let warnings: Vec<String> = serde_json::from_str(&std::fs::read_to_string(rep.join("warnings.json")).unwrap()).unwrap();
    assert_eq!(warnings.len(), 1);
    for f in ["compression.csv", "metrics_by_kind.csv", "taps.json", "sparsity_one.svg"] {
        assert!(rep.join(f).exists(), "{f}");
    }
}

#[test]
fn report_on_an_unfinished_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("runs/half/seed-0")).unwrap();
    let mut r = tiny("rep", "dense-mtl", &["edge"], 0.0);
    r["report_runs"] = json!(["runs/half"]);
    let cfg = write_config(dir.path(), "r.json", &r);
    let out = lomt(&["report"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_record(&out)["message"].as_str().unwrap().contains("incomplete run directory"));
}

#[test]
fn gen_data_exports_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &tiny("data", "dense-stl", &["edge"], 0.0));
    assert!(lomt(&["gen-data"], &cfg).status.success());
    let manifest = dir.path().join("runs/data/data/manifest.json");
    let back = lomt_core::load_manifest(&manifest).unwrap();
    assert_eq!(back.len(), 24);

    // a config reading that manifest trains like the generated one
    let mut c = tiny("from-disk", "dense-stl", &["edge"], 0.0);
    c["data"] = json!({"manifest": manifest});
    let cfg = write_config(dir.path(), "d.json", &c);
    let out = lomt(&["train-stl", "--seed", "0"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
