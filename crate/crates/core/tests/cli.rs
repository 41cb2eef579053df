use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tempens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tempens")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn report(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

fn check<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap()
}

fn run(dir: &TempDir, command: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir.path(), config);
    let out = dir.path().join("out").to_string_lossy().into_owned();
    let mut args = vec![command, "--config", &cfg, "--output-dir", &out];
    args.extend_from_slice(extra);
    tempens(&args)
}

#[test]
fn ensemble_two_level_mean() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "ensemble", "levels = [0.0, 1.0]\nrate = 0.6931471805599453\n", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("out"), "ensemble.json");
    assert_eq!(r["schema"], "tempens/1");
    assert_eq!(r["command"], "ensemble");
    assert!((r["results"]["mean"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!(r["config_echo"].get("output_dir").is_none());

    let csv = fs::read_to_string(dir.path().join("out/weights.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,degeneracy,prob");
    let p0: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert!((p0 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn ensemble_single_level_is_pure() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "ensemble", "levels = [2.5]\nrate = 1.0\n", &[]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&dir.path().join("out"), "ensemble.json");
    assert_eq!(r["results"]["entropy_trace"].as_f64().unwrap(), 0.0);
}

#[test]
fn ensemble_rejects_conflicting_targets() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "ensemble", "levels = [0.0, 1.0]\nrate = 1.0\ntarget_mean = 0.3\n", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    assert_eq!(tempens(&["ensemble", "--config", "/nonexistent/run.toml"]).status.code(), Some(2));
    assert_eq!(run(&dir, "ensemble", "levels = [0.0]\nrate = 1.0\nbogus = 3\n", &[]).status.code(), Some(2));
    assert_eq!(run(&dir, "ensemble", "rate = 1.0\n", &[]).status.code(), Some(2));
    assert_eq!(
        run(&dir, "ensemble", "levels = [0.0, 1.0]\nrate = 1.0\ntail_epsilon = 2.0\n", &[]).status.code(),
        Some(2)
    );
    assert_eq!(tempens(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn solve_harmonic_closed_form_round_trip() {
    let dir = TempDir::new().unwrap();
    let target = 0.5 / 0.5f64.tanh();
    let out = run(&dir, "solve", &format!("target_mean = {target:?}\n[harmonic]\nd = 1.0\n"), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("out"), "solve.json");
    assert!((r["results"]["rate"].as_f64().unwrap() - 1.0).abs() <= 1e-9);
    assert!(r["results"]["iterations"].as_u64().unwrap() <= 200);
    assert!((r["results"]["closed_form"]["rate"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(check(&r, "closed_form_rate")["pass"], true);
}

#[test]
fn solve_boundary_target_is_unattainable() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "solve", "levels = [0.0, 1.0, 2.0]\ntarget_mean = 0.0\n", &[]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("(0, "), "{err}");

    let out = run(&dir, "solve", "target_mean = 0.5\n[harmonic]\nd = 1.0\n", &[]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn simulate_recovers_rate() {
    let dir = TempDir::new().unwrap();
    let cfg = "rate = 1.0\nn_particles = 100000\nseed = 12\n[harmonic]\nd = 1.0\n";
    let out = run(&dir, "simulate", cfg, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("out"), "simulate.json");
    let fit = &r["results"]["fit"];
    assert_eq!(fit["status"], "ok");
    let (lambda_hat, se) = (fit["lambda_hat"].as_f64().unwrap(), fit["stderr"].as_f64().unwrap());
    assert!((lambda_hat - 1.0).abs() <= 3.0 * se);
    assert!(fit["goodness_of_fit"]["dof"].as_i64().unwrap() >= 1);

    let csv = fs::read_to_string(dir.path().join("out/survival.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,theoretical_n,expected_n,empirical_n"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, vec![0.5, 100_000.0, 100_000.0, 100_000.0]);
}

#[test]
fn simulate_minimal_sample() {
    let dir = TempDir::new().unwrap();
    for seed in 0..4 {
        let cfg = format!("rate = 1.0\nn_particles = 1\nseed = {seed}\n[harmonic]\nd = 1.0\n");
        let out = run(&dir, "simulate", &cfg, &[]);
        let r = report(&dir.path().join("out"), "simulate.json");
        match r["results"]["fit"]["status"].as_str().unwrap() {
            "degenerate" => assert_eq!(out.status.code(), Some(3)),
            "ok" => assert_eq!(out.status.code(), Some(0)),
            other => panic!("unexpected status {other}"),
        }
    }
}

#[test]
fn simulate_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "rate = 0.7\nn_particles = 50000\nseed = 3\nshard_size = 5000\n[harmonic]\nd = 1.0\n");
    let outputs: Vec<(Vec<u8>, Vec<u8>)> = [("a", "1"), ("b", "1"), ("c", "3")]
        .iter()
        .map(|(name, workers)| {
            let out = dir.path().join(name).to_string_lossy().into_owned();
            let status = tempens(&["simulate", "--config", &cfg, "--output-dir", &out, "--workers", workers]);
            assert_eq!(status.status.code(), Some(0));
            (
                fs::read(dir.path().join(name).join("simulate.json")).unwrap(),
                fs::read(dir.path().join(name).join("survival.csv")).unwrap(),
            )
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn simulate_needs_time_spectrum_and_seed() {
    let dir = TempDir::new().unwrap();
    let energy = "levels = [0.0, 1.0]\nkind = \"energy\"\nrate = 1.0\nn_particles = 10\nseed = 1\n";
    assert_eq!(run(&dir, "simulate", energy, &[]).status.code(), Some(2));
    assert_eq!(run(&dir, "simulate", "levels = [0.0, 1.0]\nrate = 1.0\nn_particles = 10\n", &[]).status.code(), Some(2));
}

#[test]
fn verify_three_levels_passes() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "verify", "levels = [0.0, 1.0, 2.0]\nrate = 1.0\n", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.path().join("out"), "verify.json");
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
    assert!(check(&r, "commutator_norm_s_hat")["value"].as_f64().unwrap() < 1e-13);
    let fd = r["results"]["derivative"]["fd_ratio"].as_f64().unwrap();
    assert!((fd - 1.0).abs() <= 1e-5);
    assert!(r["results"]["derivative"]["rate_reading_gap"].is_number());
}

#[test]
fn verify_failure_exits_five_with_report() {
    // nearly uniform: the entropy is flat in the rate and no check has signal
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "verify", "levels = [0.0, 1.0, 2.0]\nrate = 1e-6\n", &[]);
    assert_eq!(out.status.code(), Some(5));
    let r = report(&dir.path().join("out"), "verify.json");
    assert_eq!(r["results"]["all_pass"], false);
}

#[test]
fn verify_rejects_large_spectra() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir, "verify", "rate = 1.0\n[harmonic]\nd = 1.0\nn_max = 80\n", &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spectrum_file_and_warnings() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("levels.txt"), "# decay instants\nkind: time\n-1.0\n0.0\n2.0 3\n").unwrap();
    let out = run(&dir, "ensemble", "spectrum_file = \"levels.txt\"\nrate = 1.0\n", &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let r = report(&dir.path().join("out"), "ensemble.json");
    assert_eq!(r["results"]["levels"], 3);
}

#[test]
fn overrides_and_conversions() {
    let dir = TempDir::new().unwrap();
    let cfg = "levels = [0.0, 1.0]\nkind = \"energy\"\nrate = 1.0\n";
    let out = run(&dir, "ensemble", cfg, &["--rate", "4", "--kb", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&dir.path().join("out"), "ensemble.json");
    assert_eq!(r["results"]["rate"], 4.0);
    let t = &r["results"]["conversions"]["temperature"];
    assert_eq!(t["rate_as_kb_t"], 2.0);
    assert_eq!(t["rate_as_inverse_kb_t"], 0.125);

    let out = run(&dir, "ensemble", "levels = [0.0, 1.0]\nrate = 2.0\npersistence_l = 4.0\n", &[]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&dir.path().join("out"), "ensemble.json");
    assert_eq!(r["results"]["conversions"]["persistence"], 0.5);
}
