use std::fs;
use std::path::Path;
use std::process::Command;

use qshadow::cli::{RunConfig, SolveArtifact};
use serde_json::Value;

fn qshadow(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qshadow"))
        .args(args)
        .env("QSHADOW_THREADS", "2")
        .output()
        .expect("binary runs");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn gallery(dir: &Path, name: &str) -> String {
    let d = dir.join(name);
    let (code, text) = qshadow(&["gallery", name, "--out-dir", d.to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    d.to_str().unwrap().to_string()
}

#[test]
fn gallery_then_solve_reproduces_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gallery(tmp.path(), "diag-3d");
    let (code, text) = qshadow(&["run", "--config", &format!("{d}/solve.json")]);
    assert_eq!(code, 0, "{text}");
    let artifact: SolveArtifact = serde_json::from_str(&fs::read_to_string(format!("{d}/report.json")).unwrap()).unwrap();
    let r = &artifact.report;
    let eta = r.y.get(0)[2];
    assert!(eta > 0.0);
    // z^c_0 = η e_c, z^c_1 = −η e_c, nothing hyperbolic
    for (n, v) in r.z_central.iter() {
        let expect = match n {
            0 => eta,
            1 => -eta,
            _ => 0.0,
        };
        assert!((v[2] - expect).abs() <= 1e-10 && v[0] == 0.0 && v[1] == 0.0, "n = {n}: {v:?}");
    }
    assert!(r.z_hyperbolic.entries().iter().all(|v| v.amax() <= 1e-10));
    assert!(artifact.verification.passed);

    let plot = fs::read_to_string(format!("{d}/plot.csv")).unwrap();
    let rows: Vec<&str> = plot.lines().filter(|l| l.split(',').nth(2).is_some_and(|v| v.parse::<f64>().is_ok_and(|x| x > 0.0))).collect();
    assert_eq!(rows.len(), 2, "{rows:?}");
}

#[test]
fn verify_accepts_and_rejects() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gallery(tmp.path(), "rotation-center");
    assert_eq!(qshadow(&["run", "--config", &format!("{d}/solve.json")]).0, 0);
    let report = format!("{d}/report.json");
    let (code, text) = qshadow(&["verify", "--report", &report]);
    assert_eq!(code, 0, "{text}");

    let mut v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    v["x"]["rows"][100][0] = Value::from(0.5);
    let bad = format!("{d}/tampered.json");
    fs::write(&bad, serde_json::to_string(&v).unwrap()).unwrap();
    let (code, text) = qshadow(&["verify", "--report", &bad]);
    assert_eq!(code, 3, "{text}");
    assert!(text.contains("FAIL"));
}

#[test]
fn missing_and_malformed_inputs_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gallery(tmp.path(), "diag-3d");
    let out = format!("{d}/r.json");
    let missing = qshadow(&[
        "solve", "--system", &format!("{d}/nope.json"), "--perturbation", &format!("{d}/perturbation.json"),
        "--pseudo", &format!("{d}/pseudo.csv"), "--epsilon", "0.1", "--out", &out,
    ]);
    assert_eq!(missing.0, 4, "{}", missing.1);
    fs::write(format!("{d}/broken.json"), "{\"window\":").unwrap();
    let broken = qshadow(&["verify-dichotomy", "--system", &format!("{d}/broken.json")]);
    assert_eq!(broken.0, 4, "{}", broken.1);
    assert_eq!(qshadow(&["solve", "--bogus"]).0, 4);
    assert!(!Path::new(&out).exists());
}

#[test]
fn contraction_failure_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gallery(tmp.path(), "diag-3d");
    let f = format!("{d}/big.json");
    fs::write(&f, r#"{"kind":"tanh","kappa":2.0,"weights":[[1,0,0],[0,1,0],[0,0,1]]}"#).unwrap();
    let (code, text) = qshadow(&[
        "solve", "--system", &format!("{d}/system.json"), "--perturbation", &f,
        "--pseudo", &format!("{d}/pseudo.csv"), "--epsilon", "0.1", "--out", &format!("{d}/r.json"),
    ]);
    assert_eq!(code, 2, "{text}");
}

#[test]
fn seeded_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = gallery(tmp.path(), "switched-central");
    let mut bytes = Vec::new();
    for run in 0..2 {
        for cfg in ["solve", "conjugacy"] {
            let mut c = RunConfig::load(Path::new(&format!("{d}/{cfg}.json"))).unwrap();
            c.seed = 17;
            let out = format!("{d}/{cfg}-{run}.json");
            c.out = Some(out.clone().into());
            c.plot = None;
            let path = format!("{d}/{cfg}-cfg-{run}.json");
            fs::write(&path, c.to_json().unwrap()).unwrap();
            assert_eq!(qshadow(&["run", "--config", &path]).0, 0);
            bytes.push((cfg, fs::read(&out).unwrap()));
        }
    }
    assert_eq!(bytes[0].1, bytes[2].1);
    assert_eq!(bytes[1].1, bytes[3].1);
}

#[test]
fn every_gallery_system_runs() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["diag-3d", "rotation-center", "switched-central", "ed-2d"] {
        let d = gallery(tmp.path(), name);
        for cfg in ["solve", "conjugacy", "verify-dichotomy"] {
            let (code, text) = qshadow(&["run", "--config", &format!("{d}/{cfg}.json")]);
            assert_eq!(code, 0, "{name} {cfg}: {text}");
        }
        let conj: Value = serde_json::from_str(&fs::read_to_string(format!("{d}/conjugacy-report.json")).unwrap()).unwrap();
        assert_eq!(conj["report"]["points"].as_array().unwrap().len(), 5);
        assert!(conj["modulus"]["modulus"].as_array().unwrap().len() >= 2);
    }
}

#[test]
fn flow_command() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = d.join("flow.json");
    fs::write(
        &spec,
        r#"{"t_lo":-8,"t_hi":8,"matrix":{"family":"constant","rows":[[-0.6931471805599453,0,0],[0,0.6931471805599453,0],[0,0,0]]}}"#,
    )
    .unwrap();
    let mut csv = String::from("t,c0,c1,c2\n");
    for i in 0..=16 * 64 {
        let t = -8.0 + i as f64 / 64.0;
        let v = if t.abs() <= 0.5 { 1e-4 * (std::f64::consts::PI * t).cos().powi(2) } else { 0.0 };
        csv.push_str(&format!("{t},0,0,{v}\n"));
    }
    let path = d.join("path.csv");
    fs::write(&path, csv).unwrap();
    let out = d.join("flow-report.json");
    let plot = d.join("flow-plot.csv");
    let (code, text) = qshadow(&[
        "flow", "--spec", spec.to_str().unwrap(), "--path", path.to_str().unwrap(), "--epsilon", "0.1",
        "--h", "0.015625", "--out", out.to_str().unwrap(), "--plot", plot.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{text}");
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(v["report"]["max_deviation"].as_f64().unwrap() <= 0.1);
    for line in fs::read_to_string(&plot).unwrap().lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[1] <= cols[2]);
    }
    let (code, _) = qshadow(&[
        "flow", "--spec", spec.to_str().unwrap(), "--path", path.to_str().unwrap(), "--epsilon", "0.1",
        "--h", "0.03125", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, 4);
}

#[test]
fn help_lists_exit_codes() {
    let (code, text) = qshadow(&["--help"]);
    assert_eq!(code, 0);
    assert!(text.contains("Exit codes") && text.contains("QSHADOW_THREADS"));
}
