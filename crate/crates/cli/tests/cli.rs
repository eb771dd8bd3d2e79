use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn contamina(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contamina"))
        .args(args)
        .env("CONTAMINA_OUT", out)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Simulates `config` into `dir/panel.csv`.
fn simulated(config: &str, dir: &Path) -> PathBuf {
    let panel = dir.join("panel.csv");
    let o = contamina(&["simulate", fixture(config).to_str().unwrap(), panel.to_str().unwrap()], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    panel
}

#[test]
fn simulate_writes_panel_and_truth() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("classical.json", dir.path());
    assert!(panel.exists());
    assert!(dir.path().join("panel_truth.csv").exists());
    let header = fs::read_to_string(&panel).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("student_id,school_id,cohort,ses_raw,outcome,"));
}

#[test]
fn simulate_echoes_config_and_reliability() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("p.csv");
    let o = contamina(&["simulate", fixture("classical.json").to_str().unwrap(), out.to_str().unwrap()], dir.path());
    let text = stdout(&o);
    assert!(text.contains("\"lambda_tilde\": 1.0"));
    // 0.825 / (0.825 + 0.1125)
    assert!(text.contains("lambda = 0.880000"), "{text}");
}

#[test]
fn simulate_rejects_shrinkage_above_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("p.csv");
    let o = contamina(&["simulate", fixture("bad_shrinkage.json").to_str().unwrap(), out.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("classical.json");
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        assert_eq!(code(&contamina(&["simulate", cfg.to_str().unwrap(), p.to_str().unwrap()], dir.path())), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(dir.path().join("a_truth.csv")).unwrap(), fs::read(dir.path().join("b_truth.csv")).unwrap());
}

#[test]
fn fit_all_matches_closed_forms() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("classical.json", dir.path());
    let out = dir.path().join("fit");
    let o = contamina(&["fit", panel.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&out.join("fit_report.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["cluster_correction"], "cr1");
    let est = report["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 4);

    // β = 0.05, γ = 0.1, δ = 0.25, λ = 0.88, constant drift
    let ols_limit = 0.05 + 0.1 * 0.25 * (1.0 - 0.88);
    for e in est {
        let method = e["method"].as_str().unwrap();
        let (b, se) = (e["beta_hat"].as_f64().unwrap(), e["se_beta"].as_f64().unwrap());
        let target = if method == "OLS" { ols_limit } else { 0.05 };
        assert!((b - target).abs() < 4.0 * se, "{method}: {b} vs {target} (se {se})");
        if method != "OLS" {
            let l = e["lambda_hat"].as_f64().or(e["details"]["pi_prime"].as_f64()).unwrap();
            assert!((l - 0.88).abs() < 0.05, "{method}: lambda {l}");
        }
    }
    let shares = report["shares"].as_array().unwrap();
    assert_eq!(shares.len(), 3);
    assert!(out.join("estimates.csv").exists());
    let rel = fs::read_to_string(out.join("reliability.csv")).unwrap();
    assert_eq!(rel.lines().next().unwrap(), "tau,pi_prime,se,fitted");
    assert_eq!(rel.lines().count(), 1 + 3 + 1);
}

#[test]
fn fit_history_forecast_needs_three_lags() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("two_lags.json", dir.path());
    let o = contamina(&["fit", panel.to_str().unwrap(), "--strategy", "eiv-th"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("lag"), "{}", stderr(&o));
}

#[test]
fn fit_ols_reports_no_reliability() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("classical.json", dir.path());
    let o = contamina(&["fit", panel.to_str().unwrap(), "--strategy", "ols"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("fit_report.json")).unwrap();
    assert!(!text.contains("lambda_hat"));
    assert!(!dir.path().join("reliability.csv").exists());
}

#[test]
fn fit_is_reproducible_outside_metadata() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("classical.json", dir.path());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_eq!(code(&contamina(&["fit", panel.to_str().unwrap(), "--out", out.to_str().unwrap()], dir.path())), 0);
        let mut v = json(&out.join("fit_report.json"));
        v.as_object_mut().unwrap().remove("metadata");
        reports.push(v);
        assert_eq!(
            fs::read(out.join("estimates.csv")).unwrap(),
            fs::read(dir.path().join("a/estimates.csv")).unwrap()
        );
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn fit_rejects_missing_file() {
    let dir = TempDir::new().unwrap();
    let o = contamina(&["fit", dir.path().join("nope.csv").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn diagnose_constant_drift_passes() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("classical.json", dir.path());
    let o = contamina(&["diagnose", panel.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&dir.path().join("diagnostics.json"));
    let checks = report["characteristics"].as_array().unwrap();
    let names: Vec<&str> = checks.iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["ses", "female", "age"]);
    for c in checks {
        assert_eq!(c["flag"], "pass", "{c}");
    }
    let path = fs::read_to_string(dir.path().join("delta_path.csv")).unwrap();
    assert_eq!(path.lines().next().unwrap(), "tau,alpha_ses,se");
    assert_eq!(path.lines().count(), 1 + 3);
}

#[test]
fn diagnose_flags_ses_linked_drift() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("ses_linked.json", dir.path());
    let o = contamina(&["diagnose", panel.to_str().unwrap(), "--characteristics", "ses"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&dir.path().join("diagnostics.json"));
    assert_eq!(report["characteristics"][0]["flag"], "warn");
    assert!(stdout(&o).contains("WARN"));
}

#[test]
fn diagnose_from_config_adds_variance_check() {
    let dir = TempDir::new().unwrap();
    let o = contamina(&["diagnose", "--config", fixture("classical.json").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&dir.path().join("diagnostics.json"));
    assert_eq!(report["variance_check"]["pass"], true);
}

#[test]
fn diagnose_without_lag_columns_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let panel = simulated("classical.json", dir.path());
    let text = fs::read_to_string(&panel).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let keep: Vec<usize> = (0..rows[0].len()).filter(|&i| !rows[0][i].starts_with("score_")).collect();
    let stripped: String = rows
        .iter()
        .map(|r| keep.iter().map(|&i| r[i]).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    let bad = dir.path().join("no_lags.csv");
    fs::write(&bad, stripped).unwrap();
    let o = contamina(&["diagnose", bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn mc_within_band_exits_zero() {
    let dir = TempDir::new().unwrap();
    let o = contamina(&["mc", fixture("mc_small.json").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let summary = json(&dir.path().join("mc_summary.json"));
    assert_eq!(summary["replications"], 30);
    assert!(summary["metadata"]["runtime_seconds"].as_f64().is_some());
    let draws = fs::read_to_string(dir.path().join("mc_draws.csv")).unwrap();
    assert_eq!(draws.lines().next().unwrap(), "estimand,replication,value");
    assert_eq!(draws.lines().count(), 1 + 4 * 30);
}

#[test]
fn mc_single_replication_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = contamina(&["mc", fixture("mc_small.json").to_str().unwrap(), "-R", "1"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn mc_planted_wrong_prediction_fails() {
    let dir = TempDir::new().unwrap();
    let o = contamina(&["mc", fixture("mc_planted.json").to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 4, "{}", stdout(&o));
    assert!(stdout(&o).contains("gamma_m"));
}

#[test]
fn mc_self_test_rejects_the_uncontaminated_gap() {
    let dir = TempDir::new().unwrap();
    let cfg = fixture("mc_selftest.json");
    let honest = contamina(&["mc", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&honest), 0, "{}", stdout(&honest));
    let planted = contamina(&["mc", cfg.to_str().unwrap(), "--self-test"], dir.path());
    assert_eq!(code(&planted), 4, "{}", stdout(&planted));
}

#[test]
fn paper_check_default_passes() {
    let dir = TempDir::new().unwrap();
    let o = contamina(&["paper-check", "--write"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 11);
    let report = json(&dir.path().join("paper_check.json"));
    assert_eq!(report["checks"].as_array().unwrap().len(), 11);
}

#[test]
fn paper_check_zero_tolerance_fails_on_rounding() {
    let dir = TempDir::new().unwrap();
    let o = contamina(&["paper-check", "--tolerance", "0"], dir.path());
    assert_eq!(code(&o), 4);
    let fails: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(String::from).collect();
    assert!(!fails.is_empty());
    assert!(fails.iter().all(|l| l.contains("share_")), "{fails:?}");
}

#[test]
fn paper_check_uses_replacement_constants() {
    let dir = TempDir::new().unwrap();
    let embedded = include_str!("../../core/data/reference_constants.json");
    let mut v: Value = serde_json::from_str(embedded).unwrap();
    v["first_stage"]["pi"] = 0.5.into();
    let path = dir.path().join("constants.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = contamina(&["paper-check", "--constants", path.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).contains("FAIL gamma_iv = theta1 / pi"), "{}", stdout(&o));
    assert!(stdout(&o).contains("0.76600"));
}
