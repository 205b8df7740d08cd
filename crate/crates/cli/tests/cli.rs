use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn spsc(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spsc"));
    cmd.args(args).env_remove("SPSC_THREADS");
    if let Some(n) = threads {
        cmd.env("SPSC_THREADS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Deterministic panel with three donors and a level shift of 2 after t0.
fn noisy_panel(t: usize, t0: usize) -> String {
    let mut s = String::from("t,y,w1,w2,w3,a\n");
    for r in 1..=t {
        let x = r as f64;
        let f1 = (0.37 * x).sin();
        let f2 = (0.11 * x).cos();
        let w = [f1 + 0.1 * (1.3 * x).sin(), f2 + 0.1 * (2.1 * x).cos(), f1 + f2 + 0.1 * (0.7 * x).sin()];
        let mut y = 0.8 * f1 + 0.5 * f2 + 0.05 * (3.7 * x).sin();
        if r > t0 {
            y += 2.0;
        }
        writeln!(s, "{r},{y},{},{},{},{}", w[0], w[1], w[2], u8::from(r > t0)).unwrap();
    }
    s
}

fn str_of(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn estimate_writes_sorted_json_with_required_keys() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "panel.csv", &noisy_panel(60, 40));
    let cfg = write(dir.path(), "cfg.json", r#"{"detrend": "cubic_bspline:6", "rho": "loocv"}"#);
    let out = dir.path().join("fit.json");
    let o = spsc(
        &[
            "estimate",
            "--input",
            input.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    for key in ["eta", "gamma", "beta", "se_beta", "ci_beta"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["gamma"].as_array().unwrap().len(), 3);
    assert_eq!(v["eta"].as_array().unwrap().len(), 6);
    let beta = v["beta"][0].as_f64().unwrap();
    let ci = v["ci_beta"][0].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= beta && beta <= ci[1].as_f64().unwrap());

    // Top-level keys appear in sorted order in the raw text.
    let keys: Vec<&str> =
        text.lines().filter(|l| l.starts_with("  \"")).map(|l| l.trim().split('"').nth(1).unwrap()).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    assert_eq!(keys, sorted);
}

#[test]
fn estimate_on_perfect_fit_fixture_gives_zero_effect() {
    let dir = TempDir::new().unwrap();
    let mut s = String::from("t,y,w1,a\n");
    for r in 1..=40 {
        let w = 1.0 + (0.3 * r as f64).sin();
        writeln!(s, "{r},{},{w},{}", 2.0 * w, u8::from(r > 25)).unwrap();
    }
    let input = write(dir.path(), "perfect.csv", &s);
    let cfg = write(dir.path(), "cfg.json", r#"{"detrend": "none", "rho": 0}"#);
    let o = spsc(&["estimate", "--input", input.to_str().unwrap(), "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&str_of(&o)).unwrap();
    assert!(v["beta"][0].as_f64().unwrap().abs() < 1e-12);
    assert!((v["gamma"][0].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!(v["se_beta"][0].as_f64().unwrap().is_finite());
}

#[test]
fn simulate_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let spec = write(
        dir.path(),
        "sim.json",
        r#"{"t0": 20, "t1": 20, "trend": "linear", "mu0": "non_simplex", "errors": "independent"}"#,
    );
    let run = |threads| {
        let o = spsc(&["simulate", "--spec", spec.to_str().unwrap(), "--reps", "5", "--seed", "7"], threads);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let a = run(None);
    assert_eq!(a, run(None));
    assert_eq!(a, run(Some(1)));
    assert_eq!(a, run(Some(4)));
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("estimator,reps,failures,bias,ese,mse,ase_mean,bse_mean,coverage_ase,coverage_bse\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn bootstrap_estimate_is_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "panel.csv", &noisy_panel(60, 30));
    let args = ["estimate", "--input", input.to_str().unwrap(), "--boot-reps", "60", "--seed", "3"];
    let a = spsc(&args, Some(1));
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, spsc(&args, Some(4)).stdout);
    let v: Value = serde_json::from_str(&str_of(&a)).unwrap();
    assert_eq!(v["variance_method"], "bootstrap");
}

#[test]
fn conformal_and_loocv_tables() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "panel.csv", &noisy_panel(50, 40));
    let cfg = write(dir.path(), "cfg.json", r#"{"conformal": {"k": 6, "n_points": 41}}"#);
    let o = spsc(&["conformal", "--input", input.to_str().unwrap(), "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = str_of(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,lo,hi,plug_in,n_grid,degenerate_flag"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 10);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (41 + i).to_string());
        let (lo, hi, plug): (f64, f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap());
        assert!(lo <= plug && plug <= hi);
        assert_eq!(r[4], "41");
    }

    let o = spsc(&["loocv", "--input", input.to_str().unwrap()], None);
    assert!(o.status.success());
    let text = str_of(&o);
    assert!(text.starts_with("rho,mse,selected\n"));
    assert_eq!(text.lines().count(), 21);
    assert_eq!(text.lines().filter(|l| l.ends_with(",1")).count(), 1);
}

#[test]
fn placebo_moves_treatment_time_back() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "panel.csv", &noisy_panel(60, 40));
    let o = spsc(&["placebo", "--input", input.to_str().unwrap(), "--new-t0", "25", "--rho", "0.001"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&str_of(&o)).unwrap();
    assert_eq!((v["t0"].as_u64(), v["t1"].as_u64()), (Some(25), Some(15)));
    // No real effect before the true treatment time.
    assert!(v["beta"][0].as_f64().unwrap().abs() < 0.5);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "panel.csv", &noisy_panel(40, 30));
    let input = input.to_str().unwrap();
    let bad_cfg = write(dir.path(), "bad.json", r#"{"rho": "often"}"#);
    let unknown_field = write(dir.path(), "unknown.json", r#"{"rhoo": 1}"#);
    let broken = write(dir.path(), "broken.csv", "t,y,w1\n1,abc,2\n2,1,1\n");

    let code = |args: &[&str]| spsc(args, None).status.code();
    assert_eq!(code(&["estimate", "--input", input, "--bogus"]), Some(2));
    assert_eq!(code(&["estimate"]), Some(2));
    assert_eq!(code(&["estimate", "--input", input, "--config", bad_cfg.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["estimate", "--input", input, "--config", unknown_field.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["estimate", "--input", input, "--alpha", "2"]), Some(2));
    assert_eq!(code(&["estimate", "--input", input, "--kernel", "parzen"]), Some(2));
    assert_eq!(code(&["placebo", "--input", input, "--new-t0", "35"]), Some(1));
    assert_eq!(code(&["estimate", "--input", "/nonexistent/panel.csv"]), Some(1));
    assert_eq!(code(&["estimate", "--input", broken.to_str().unwrap(), "--t0", "1"]), Some(1));
    assert_eq!(code(&["estimate", "--input", input, "--boot-reps", "10"]), Some(1));
    assert_eq!(code(&["estimate", "--input", input]), Some(0));

    let o = spsc(&["estimate", "--input", "/nonexistent/panel.csv"], None);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}
