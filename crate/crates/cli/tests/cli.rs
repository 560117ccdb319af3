use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn msldp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msldp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_str(&stdout(o)).unwrap()
}

fn rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(|f| f.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

/// Periodic trapezoid rule, spectrally accurate for smooth integrands.
fn torus_mean(f: impl Fn(f64) -> f64) -> f64 {
    let n = 2000;
    (0..n).map(|i| f(i as f64 / n as f64)).sum::<f64>() / n as f64
}

#[test]
fn homogenize_three_points() {
    let out = msldp(&["homogenize", "--config", &cfg("langevin.cfg"), "--x", "-1,0,1.5"]);
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("x_1,r_1,q_11"));
    let r = rows(&text);
    assert_eq!(r.len(), 3);
    let q = |y: f64| 0.5 * ((2.0 * PI * y).cos() + (2.0 * PI * y).sin());
    let theta = 1.0 / (torus_mean(|y| (-q(y)).exp()) * torus_mean(|y| q(y).exp()));
    for row in &r {
        let x = row[0];
        let vp = 2.0 * x * (x * x - 1.0);
        assert!((row[2] - 2.0 * theta).abs() < 1e-8, "{row:?}");
        assert!((row[1] + theta * vp).abs() < 1e-8, "{row:?}");
    }
}

#[test]
fn regime3_constant_sigma_rate() {
    let out = msldp(&[
        "rate",
        "--regime",
        "3",
        "--beta",
        "2",
        "--config",
        &cfg("const-sigma.cfg"),
    ]);
    let r = rows(&stdout(&out));
    assert_eq!(r.len(), 1);
    assert!((r[0][2] - 2.0).abs() < 1e-8, "{:?}", r[0]);
}

#[test]
fn rate_grid_is_cartesian() {
    let out = msldp(&[
        "rate",
        "--config",
        &cfg("const-sigma.cfg"),
        "--regime",
        "1",
        "--x",
        "0,0.5",
        "--beta",
        "-1,3",
    ]);
    let r = rows(&stdout(&out));
    assert_eq!(r.len(), 4);
    // b = −Q′ with Q = cos(2πy)/(2π) and D = 1/2, so q = 1/(Z Ẑ) and r = 0.
    let q = |y: f64| (2.0 * PI * y).cos() / (2.0 * PI);
    let zz = torus_mean(|y| (-2.0 * q(y)).exp()) * torus_mean(|y| (2.0 * q(y)).exp());
    let k = zz / 2.0;
    for row in &r {
        assert!((row[2] / (row[1] * row[1]) - k).abs() < 1e-10, "{row:?}");
        assert!(row[3].is_nan());
    }
    assert_eq!([r[0][0], r[1][0], r[2][0], r[3][0]], [0.0, 0.0, 0.5, 0.5]);
}

#[test]
fn mc_both_schemes() {
    let out = msldp(&[
        "mc",
        "--config",
        &cfg("langevin.cfg"),
        "--scheme",
        "both",
        "--eps",
        "0.25",
        "--n",
        "10000",
        "--seed",
        "7",
    ]);
    let doc = json(&out);
    let reports = doc["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    let (plain, is) = (&reports[0], &reports[1]);
    assert_eq!(plain["scheme"], "standard");
    assert_eq!(is["scheme"], "is");
    assert!(is["rel_error"].as_f64().unwrap() <= plain["rel_error"].as_f64().unwrap());
    let se = |r: &serde_json::Value| r["std_error"].as_f64().unwrap();
    let gap = (plain["mean"].as_f64().unwrap() - is["mean"].as_f64().unwrap()).abs();
    assert!(gap < 3.0 * (se(plain).powi(2) + se(is).powi(2)).sqrt());
    assert!(plain["wall_seconds"].is_null());
    assert_eq!(doc["provenance"]["schema"], "msldp/1");
    assert_eq!(doc["provenance"]["overrides"]["mc.n"], 10000);
}

#[test]
fn outputs_are_byte_identical() {
    let args = [
        "mc",
        "--config",
        &cfg("langevin.cfg"),
        "--scheme",
        "both",
        "--n",
        "300",
        "--eps",
        "0.5",
    ];
    assert_eq!(stdout(&msldp(&args)), stdout(&msldp(&args)));
    let args = [
        "homogenize",
        "--config",
        &cfg("langevin.cfg"),
        "--set",
        "grid.x_count=5",
    ];
    let a = stdout(&msldp(&args));
    assert_eq!(a.lines().count(), 6);
    assert_eq!(a, stdout(&msldp(&args)));
}

#[test]
fn flags_override_config_and_are_echoed() {
    let out = msldp(&[
        "mc",
        "--config",
        &cfg("langevin.cfg"),
        "--set",
        "mc.eps=0.3",
        "--set",
        "functional.expr=\"x^2\"",
        "--eps",
        "0.5",
        "--n",
        "50",
    ]);
    let doc = json(&out);
    assert_eq!(doc["reports"][0]["eps"], 0.5);
    let o = &doc["provenance"]["overrides"];
    assert_eq!(o["mc.eps"], 0.5);
    assert_eq!(o["functional.expr"], "x^2");
}

#[test]
fn ladder_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let out = msldp(&[
        "mc",
        "--config",
        &cfg("langevin.cfg"),
        "--ladder",
        "1,0.5",
        "--n",
        "200",
        "--out",
        &d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let csv = std::fs::read_to_string(dir.path().join("ladder_standard.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("mc.json")).unwrap()).unwrap();
    let reference = doc["path"]["value"].as_f64().unwrap();
    assert_eq!(doc["ladders"]["standard"]["reference"].as_f64().unwrap(), reference);
}

#[test]
fn simulate_dumps_and_occupation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let out = msldp(&[
        "simulate",
        "--config",
        &cfg("langevin.cfg"),
        "--n",
        "3",
        "--set",
        "output.stride=256",
        "--out",
        &d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("simulate.json")).unwrap()).unwrap();
    assert_eq!(doc["paths"].as_array().unwrap().len(), 3);
    let marginal: f64 = doc["occupation"]["y_marginal"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((marginal - 1.0).abs() < 1e-12);
    // 2560 steps at stride 256: 11 stored states per path.
    let dump = std::fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    assert_eq!(dump.lines().count(), 1 + 3 * 11);
    assert!(dir.path().join("occupation.csv").exists());
}

#[test]
fn path_reports_optimizer_result() {
    let doc = json(&msldp(&["path", "--config", &cfg("langevin.cfg"), "--intervals", "32"]));
    assert_eq!(doc["result"]["intervals"], 32);
    assert!(doc["result"]["converged"].as_bool().unwrap());
    let v = doc["result"]["value"].as_f64().unwrap();
    let parts = doc["result"]["action"].as_f64().unwrap() + doc["result"]["cost"].as_f64().unwrap();
    assert!((v - parts).abs() < 1e-12);
    assert_eq!(doc["states"].as_array().unwrap().len(), 33);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    let text = std::fs::read_to_string(configs().join("const-sigma.cfg")).unwrap() + "\n[mc]\nepsilon = 1\n";
    std::fs::write(&bad, text).unwrap();
    let out = msldp(&["rate", "--config", bad.to_str().unwrap(), "--beta", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));

    let out = msldp(&[
        "rate",
        "--regime",
        "3",
        "--beta",
        "0",
        "--config",
        &cfg("const-sigma.cfg"),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = msldp(&["homogenize", "--config", "/nonexistent.cfg"]);
    assert_eq!(out.status.code(), Some(1));

    let out = msldp(&["selftest", "--only", "1,5"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("[PASS]")).count(), 2);
}
