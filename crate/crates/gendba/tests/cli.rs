//! End-to-end tests of the command-line binary, including the timed smoke
//! pipeline: collect -> pretrain -> rollout -> evaluate.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn gendba(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gendba"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn list_hw_prints_five_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let out = gendba(dir.path(), &["list-hw"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 5);
    for id in ["milan-like", "skylakex-like", "gracehopper-like", "small-a", "small-b"] {
        assert!(text.contains(id), "missing {id} in:\n{text}");
    }
    assert!(dir.path().join("gendba-out/manifest.json").exists());
}

#[test]
fn list_wl_prints_builtin_workloads() {
    let dir = tempfile::tempdir().unwrap();
    let out = gendba(dir.path(), &["list-wl"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("ycsb-a"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gendba(dir.path(), &["list-hw", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
}

#[test]
fn runtime_error_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = gendba(
        dir.path(),
        &["rollout", "--ckpt", "missing.json", "--hw", "tiny-2n2c", "--wl", "ycsb-a"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn collect_per_cell_two_writes_two_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = gendba(
        dir.path(),
        &[
            "collect", "--hw", "tiny-1n2c", "--wl", "read-uniform", "--per-cell", "2",
            "--dataset", "ds.jsonl", "--slices", "4",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = gendba::experience::load(&dir.path().join("ds.jsonl")).unwrap();
    assert_eq!(ds.samples.len(), 2);
}

#[test]
fn smoke_pipeline_under_five_minutes() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("spec.json"),
        serde_json::json!({
            "model": {
                "d_model": 32, "n_layers": 1, "n_heads": 2, "d_ff": 64,
                "context_len": 25, "vocab_size": 260, "dropout_rate": 0.0
            },
            "run": {
                "batch_size": 8, "lr": 3e-4, "warmup_steps": 20, "max_steps": 200,
                "grad_clip": 1.0, "seed": 0, "val_frac": 0.2, "eval_every": 50,
                "micro_batch": 4, "patience": null
            }
        })
        .to_string(),
    )
    .unwrap();

    let out = gendba(
        d,
        &[
            "collect", "--hw", "tiny-2n2c", "--wl", "ycsb-a", "--per-cell", "8",
            "--dataset", "ds.jsonl", "--slices", "8",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = gendba(
        d,
        &[
            "pretrain", "--dataset", "ds.jsonl", "--config", "spec.json",
            "--ckpt", "pre.json",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("gendba-out/metrics-pretrain.csv").exists());

    let out = gendba(
        d,
        &["rollout", "--ckpt", "pre.json", "--hw", "tiny-2n2c", "--wl", "ycsb-a"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(record["policy"].as_array().unwrap().len(), 8);

    let out = gendba(
        d,
        &[
            "evaluate", "--ckpts", "pre.json", "--baselines", "all", "--seeds", "3",
            "--report", "report.csv", "--hw", "tiny-2n2c", "--wl", "ycsb-a",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = gendba::infer::EvalReport::load_csv(&d.join("report.csv")).unwrap();
    assert_eq!(report.rows.len(), 5); // four baselines + one model

    let out = gendba(d, &["plot", "--report", "report.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("gendba-out").join("eval-tiny-2n2c-ycsb-a.svg").exists());

    assert!(
        started.elapsed().as_secs() < 300,
        "smoke pipeline took {:?}",
        started.elapsed()
    );
}
