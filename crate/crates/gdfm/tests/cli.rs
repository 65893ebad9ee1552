use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gdfm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gdfm"))
}

fn write_json(path: &Path, value: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn gen_config(seed: u64, n_clicks: u64) -> Value {
    json!({
        "seed": seed,
        "n_bins": 64,
        "n_fields": 3,
        "weight_scale": 0.6,
        "drift_step": 0.03,
        "delay_rate_per_hour": 0.25,
        "horizon_hours": 48.0,
        "n_clicks": n_clicks,
        "actions": [
            { "reveal_delay_hours": 1.0, "channel": { "kind": "flip", "p": 0.9 } },
            { "reveal_delay_hours": 12.0, "channel": { "kind": "label" } }
        ]
    })
}

fn action_specs() -> Value {
    json!([
        { "action_id": 0, "reveal_delay_hours": 1.0, "cardinality": 2, "is_label_action": false },
        { "action_id": 1, "reveal_delay_hours": 12.0, "cardinality": 2, "is_label_action": true }
    ])
}

fn run_file_config(method: &str, seed: u64) -> Value {
    json!({
        "actions": action_specs(),
        "run": {
            "method": method,
            "seed": seed,
            "n_bins": 64,
            "embed_dim": 4,
            "hidden_dim": 8,
            "batch_size": 128,
            "pretrain_epochs": 2,
            "esdfm_window_hours": 4.0
        }
    })
}

#[test]
fn generate_then_stream_produces_report_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let gen_path = dir.path().join("gen.json");
    write_json(&gen_path, &gen_config(11, 3000));
    let stream_path = dir.path().join("stream.csv");
    let world_path = dir.path().join("world.json");

    let out = gdfm()
        .args(["generate", "--config"])
        .arg(&gen_path)
        .arg("--out")
        .arg(&stream_path)
        .arg("--world-out")
        .arg(&world_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "generate failed: {}", String::from_utf8_lossy(&out.stderr));
    let env = stdout_json(&out);
    assert_eq!(env["command"], "generate");
    assert_eq!(env["seed"], 11);
    assert_eq!(env["seed_source"], "config");
    assert!(env["config_sha256"].as_str().unwrap().len() == 64);
    assert_eq!(env["report"]["n_clicks"], 3000);
    assert!(env["report"]["stream_sha256"].as_str().is_some());
    assert!(world_path.exists());

    let run_path = dir.path().join("run.json");
    write_json(&run_path, &run_file_config("gdfm", 3));
    let report_path = dir.path().join("report.json");
    let ckpt_path = dir.path().join("model.ckpt");
    let out = gdfm()
        .args(["stream", "--config"])
        .arg(&run_path)
        .arg("--stream")
        .arg(&stream_path)
        .arg("--out")
        .arg(&report_path)
        .arg("--checkpoint-out")
        .arg(&ckpt_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stream failed: {}", String::from_utf8_lossy(&out.stderr));

    let report: Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["command"], "stream");
    assert_eq!(report["report"]["method"], "gdfm");
    assert!(report["report"]["metrics"]["avg_auc"].as_f64().unwrap() > 0.5);
    assert!(report["input_sha256"].as_str().is_some());
    assert!(ckpt_path.exists());

    let specs: Vec<gdfm::core::ActionSpec> = serde_json::from_value(action_specs()).unwrap();
    let (meta, state) = gdfm::engine::load_state(&ckpt_path, &specs).unwrap();
    assert_eq!(meta["extra"]["command"], "stream");
    assert!(state.phi.is_some());
    assert!(state.weights.is_some());
}

#[test]
fn sequential_flag_reproduces_the_parallel_suite() {
    let dir = tempfile::tempdir().unwrap();
    let gen_path = dir.path().join("gen.json");
    write_json(&gen_path, &gen_config(21, 2000));
    let stream_path = dir.path().join("stream.csv");
    let out = gdfm()
        .args(["generate", "--config"])
        .arg(&gen_path)
        .arg("--out")
        .arg(&stream_path)
        .output()
        .unwrap();
    assert!(out.status.success());

    let suite_path = dir.path().join("suite.json");
    write_json(
        &suite_path,
        &json!({
            "actions": action_specs(),
            "suite": {
                "methods": ["vanilla", "gdfm"],
                "seeds": [1, 2],
                "run": run_file_config("gdfm", 0)["run"]
            }
        }),
    );
    let mut reports = Vec::new();
    for (name, extra) in [("auto.json", None), ("seq.json", Some("--sequential"))] {
        let out_path = dir.path().join(name);
        let mut cmd = gdfm();
        cmd.args(["suite", "--config"])
            .arg(&suite_path)
            .arg("--stream")
            .arg(&stream_path)
            .arg("--out")
            .arg(&out_path);
        if let Some(flag) = extra {
            cmd.arg(flag);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "suite failed: {}", String::from_utf8_lossy(&out.stderr));
        reports.push(std::fs::read(&out_path).unwrap());
    }
    assert_eq!(reports[0], reports[1], "suite output depends on the execution path");
}

#[test]
fn env_seed_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("mc.json");
    write_json(
        &cfg_path,
        &json!({ "seed": 4, "n_trials": 200, "k": 3, "n": 3, "hist_bins": 8 }),
    );
    let out_path = dir.path().join("mc.json.out");
    let out = gdfm()
        .env("GDFM_SEED", "999")
        .args(["mc-study", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "mc-study failed: {}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    assert_eq!(report["seed"], 999);
    assert_eq!(report["seed_source"], "env:GDFM_SEED");
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("broken.json");
    std::fs::write(&cfg_path, b"{ not json").unwrap();
    let out = gdfm()
        .args(["mc-study", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("never.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_input_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = gdfm()
        .args(["mc-study", "--config"])
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(dir.path().join("never.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn recover_prints_the_label_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("recover.json");
    write_json(
        &cfg_path,
        &json!({
            "channel": [[0.9, 0.2], [0.1, 0.8]],
            "marginal": [0.41, 0.59]
        }),
    );
    let out = gdfm().args(["recover", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "recover failed: {}", String::from_utf8_lossy(&out.stderr));
    let env = stdout_json(&out);
    let rec = env["report"]["recovered"].as_array().unwrap();
    assert!((rec[0].as_f64().unwrap() - 0.3).abs() < 1e-9);
    assert!((rec[1].as_f64().unwrap() - 0.7).abs() < 1e-9);
}

#[test]
fn pretrain_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let gen_path = dir.path().join("gen.json");
    write_json(&gen_path, &gen_config(31, 2000));
    let stream_path = dir.path().join("stream.csv");
    assert!(gdfm()
        .args(["generate", "--config"])
        .arg(&gen_path)
        .arg("--out")
        .arg(&stream_path)
        .output()
        .unwrap()
        .status
        .success());

    let run_path = dir.path().join("run.json");
    write_json(&run_path, &run_file_config("gdfm", 9));
    let ckpt_path = dir.path().join("pretrained.ckpt");
    let report_path = dir.path().join("pretrain_report.json");
    let out = gdfm()
        .args(["pretrain", "--config"])
        .arg(&run_path)
        .arg("--stream")
        .arg(&stream_path)
        .arg("--out")
        .arg(&ckpt_path)
        .arg("--report-out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "pretrain failed: {}", String::from_utf8_lossy(&out.stderr));

    let specs: Vec<gdfm::core::ActionSpec> = serde_json::from_value(action_specs()).unwrap();
    let (meta, state) = gdfm::engine::load_state(&ckpt_path, &specs).unwrap();
    assert_eq!(meta["extra"]["command"], "pretrain");
    assert_eq!(meta["extra"]["seed"], 9);
    assert!(meta["extra"]["split_hour"].as_u64().is_some());
    assert!(state.delayed.is_some());

    let report: Value = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["command"], "pretrain");
    assert!(report["report"]["n_pretrain_clicks"].as_u64().unwrap() > 0);
}

#[test]
fn analyze_reports_reveal_curve_and_stability() {
    let dir = tempfile::tempdir().unwrap();
    let gen_path = dir.path().join("gen.json");
    write_json(&gen_path, &gen_config(41, 2500));
    let stream_path = dir.path().join("stream.csv");
    assert!(gdfm()
        .args(["generate", "--config"])
        .arg(&gen_path)
        .arg("--out")
        .arg(&stream_path)
        .output()
        .unwrap()
        .status
        .success());

    let cfg_path = dir.path().join("analyze.json");
    write_json(&cfg_path, &json!({ "reveal_grid": [0.0, 1.0, 6.0, 12.0], "stability": true }));
    let out_path = dir.path().join("analysis.json");
    let out = gdfm()
        .args(["analyze", "--config"])
        .arg(&cfg_path)
        .arg("--stream")
        .arg(&stream_path)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "analyze failed: {}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(&out_path).unwrap()).unwrap();
    let curve = report["report"]["reveal_entropy"].as_array().unwrap();
    assert_eq!(curve.len(), 4);
    let h0 = curve[0][1].as_f64().unwrap();
    let h_last = curve[3][1].as_f64().unwrap();
    assert!(h_last <= h0 + 1e-9, "entropy must not grow with the reveal delay");
    assert!(report["report"]["stability"].as_array().is_some());
}
