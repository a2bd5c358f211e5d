use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const SMALL: [&str; 5] = ["--synthetic", "--limit", "12", "--downsample", "2"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wasserball"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn wasserball")
}

fn run_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("report is JSON")
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| TempDir::new().unwrap()).path()
}

/// A small linear model trained once and shared by the tests that need one.
fn checkpoint() -> &'static str {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let path = scratch().join("shared.ckpt");
        let out = run(&[
            "train", "--synthetic", "--limit", "60", "--downsample", "2", "--arch", "linear-softmax",
            "--epochs", "3", "--seed", "3", "--checkpoint", path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        path
    })
    .to_str()
    .unwrap()
}

fn with(base: &[&'static str], extra: &[&'static str]) -> Vec<&'static str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn train_is_deterministic_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let mut reports = Vec::new();
    let mut weights = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(format!("{name}.json"));
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let status = bin()
            .args(["train", "--synthetic", "--epochs", "3", "--seed", "7", "--limit", "40"])
            .args(["--downsample", "2", "--arch", "linear-softmax"])
            .arg("--out")
            .arg(&out)
            .arg("--checkpoint")
            .arg(&ckpt)
            .status()
            .unwrap();
        assert!(status.success());
        let mut report: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
        report["metadata"]["checkpoint"] = Value::Null;
        report["config"]["checkpoint"] = Value::Null;
        reports.push(report);
        weights.push(std::fs::read(&ckpt).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(weights[0], weights[1]);
    assert_eq!(reports[0]["tables"]["history"].as_array().unwrap().len(), 3);
}

#[test]
fn adversarial_schedule_is_echoed() {
    let ckpt = scratch().join("adv.ckpt");
    let report = run_json(&[
        "train", "--synthetic", "--limit", "6", "--downsample", "2", "--arch", "linear-softmax",
        "--adversarial", "--eps-start", "0.1", "--eps-end", "10", "--epochs", "5",
        "--attack-steps", "2", "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    let schedule = report["tables"]["epsilon_schedule"].as_array().unwrap();
    assert_eq!(schedule.len(), 5);
    let scaled: Vec<f64> = schedule.iter().map(|r| r["epsilon_scaled"].as_f64().unwrap()).collect();
    let ratio = (10.0f64 / 0.1).powf(0.25);
    for (i, s) in scaled.iter().enumerate() {
        let expected = 0.1 * ratio.powi(i as i32);
        assert!((s - expected).abs() < 1e-5 * expected.max(1.0), "epoch {i}: {s} vs {expected}");
    }
    assert_eq!(report["metadata"]["attack_steps"], 2);
}

#[test]
fn attack_reports_one_point_per_radius() {
    let grid = "5,10,20,50,100,200,500,1000";
    for step in ["l2-steepest", "linf-sign"] {
        let report = run_json(&with(
            &["attack", "--checkpoint", checkpoint()],
            &with(&SMALL, &["--eps", grid, "--max-steps", "3", "--step-kind", step]),
        ));
        let curve = report["tables"]["accuracy"].as_array().unwrap();
        assert_eq!(curve.len(), 8, "{step}");
        assert_eq!(report["metadata"]["compliance_failures"], 0);
        for pair in curve {
            let acc = pair[1].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
}

#[test]
fn attack_at_zero_radius_is_clean_accuracy() {
    let report = run_json(&with(&["attack", "--checkpoint", checkpoint(), "--eps", "0"], &SMALL));
    let curve = report["tables"]["accuracy"].as_array().unwrap();
    assert_eq!(curve.len(), 1);
    let records = report["tables"]["records"].as_array().unwrap();
    assert!(records.iter().all(|r| r["steps_used"] == 0));
    let clean = records.iter().filter(|r| r["correct"] == true).count() as f64 / records.len() as f64;
    assert!((curve[0][1].as_f64().unwrap() - clean).abs() < 1e-5);
}

#[test]
fn toy_projection_tracks_the_exact_answer() {
    let report = run_json(&["project", "--toy", "--lambda", "10,100,1000"]);
    let rows = report["tables"]["projections"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let gaps: Vec<f64> = rows.iter().map(|r| r["distance_to_exact"].as_f64().unwrap()).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    let last = &rows[2];
    assert!(last["w_over"].as_f64().unwrap() <= 1e-4);
    assert!(last["delta_l1"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn projecting_an_image_onto_itself_stays_put() {
    let report = run_json(&with(&["project"], &SMALL));
    let row = &report["tables"]["projections"][0];
    assert!(row["w_over"].as_f64().unwrap() <= 1e-6);
    assert!(row["delta_l1"].as_f64().unwrap() <= 1e-6);
    assert_eq!(row["range_ok"], true);
}

#[test]
fn perturb_tables_follow_the_requested_specs() {
    let report = run_json(&with(&["perturb", "--translate", "5,10,20", "--blur", "3,5,7"], &SMALL));
    let distances = report["tables"]["distances"].as_array().unwrap();
    // one row per spec and metric
    assert_eq!(distances.len(), 12);
    for row in distances {
        assert!(row["mean"].as_f64().unwrap() >= 0.0);
    }
    let layout = report["tables"]["layout"].as_array().unwrap();
    let translate = layout.iter().find(|r| r["kind"] == "translate").unwrap();
    assert_eq!(translate["magnitudes"].as_array().unwrap().len(), 3);
    let blur = layout.iter().find(|r| r["kind"] == "blur").unwrap();
    assert_eq!(blur["magnitudes"].as_array().unwrap().len(), 3);
}

#[test]
fn perturb_without_specs_is_metadata_only() {
    let report = run_json(&with(&["perturb"], &SMALL));
    assert!(report["metadata"]["images"].as_u64().unwrap() > 0);
    let tables = report["tables"].as_object().map(|t| t.values().all(|v| v.as_array().is_none_or(|a| a.is_empty())));
    assert_ne!(tables, Some(false));
}

#[test]
fn dimming_escapes_the_ball_only_when_strong() {
    let strong = run_json(&with(&["dim-demo", "--checkpoint", checkpoint(), "--factor", "30"], &SMALL));
    assert_eq!(strong["metadata"]["max_wasserstein"].as_f64().unwrap(), 0.0);
    assert_eq!(strong["metadata"]["ball_rejections"].as_f64().unwrap(), 1.0);
    let weak = run_json(&with(&["dim-demo", "--checkpoint", checkpoint(), "--factor", "1"], &SMALL));
    assert_eq!(weak["metadata"]["ball_rejections"].as_f64().unwrap(), 0.0);
    assert_eq!(weak["metadata"]["clean_error"], weak["metadata"]["dimmed_error"]);
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        &["train", "--no-such-flag"][..],
        &["attack", "--synthetic", "--threat", "bogus"],
        &["project", "--toy", "--lambda", "-3"],
        &["distances", "--synthetic", "--limit", "3", "--mode", "entropic", "--lambda", "0"],
        &["train", "--synthetic", "--jobs", "0"],
    ] {
        let out = run(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn runtime_errors_exit_with_two_and_leave_no_report() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r.json");
    let missing = dir.path().join("missing.ckpt");
    let out = bin()
        .args(["attack", "--synthetic", "--limit", "3", "--checkpoint"])
        .arg(&missing)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!report.exists());
    assert!(!out.stderr.is_empty());
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(
        &config,
        r#"{"seed": 11, "project": {"toy": true, "lambda": [50, 500], "eps": 0.5}}"#,
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let from_file = run_json(&["project", "--config", cfg]);
    assert_eq!(from_file["metadata"]["seed"], 11);
    assert_eq!(from_file["tables"]["projections"].as_array().unwrap().len(), 2);
    let overridden = run_json(&["project", "--config", cfg, "--lambda", "70", "--seed", "4"]);
    assert_eq!(overridden["metadata"]["seed"], 4);
    let rows = overridden["tables"]["projections"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["lambda"].as_f64(), Some(70.0));
}

#[test]
fn help_states_the_radius_convention() {
    let out = run(&["attack", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("ε·n_pixel"));
}
