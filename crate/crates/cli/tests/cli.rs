use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use invpca::io::{read_container, write_container, write_csv_matrix};
use nalgebra::{DMatrix, SymmetricEigen};
use serde_json::Value;
use tempfile::TempDir;

const TETRA_OFF: &str = "OFF\n4 4 0\n1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n";

fn invpca(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invpca"))
        .current_dir(dir)
        .args(args)
        .env("IPCA_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn error_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

/// Header plus numeric rows.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(p.clone(), fs::read(&p).unwrap());
        }
    }
    out
}

fn write_spec(dir: &Path, name: &str, json: &str) -> String {
    fs::write(dir.join(name), json).unwrap();
    name.to_string()
}

fn files_with_prefix(dir: &Path, prefix: &str) -> String {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix))
        .map(|n| dir.join(n).to_string_lossy().into_owned())
        .collect();
    v.sort();
    v.join(",")
}

const COV_SPEC: &str = r#"{"channels":1,"sigmas":[3.0,2.0],"samples":6,"noise_sigma":0.3,
 "operator":{"kind":"smoothing","sensors":16},"per_sample_operators":true,"seed":11}"#;

fn cov_dataset(dir: &Path) -> (String, String) {
    write_spec(dir, "cov.json", COV_SPEC);
    let o = invpca(dir, &["synth", "--spec", "cov.json", "--icosphere", "1", "--kind", "covariance", "--out-dir", "sc"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sc = dir.join("sc");
    (files_with_prefix(&sc, "cov-"), files_with_prefix(&sc, "operator-"))
}

#[test]
fn tetrahedron_identity_rank_one() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("tet.off"), TETRA_OFF).unwrap();
    let v = [1.0, -2.0, 0.5, 3.0];
    let a = [1.0, 2.0, -1.0, 0.5, 4.0];
    let y = DMatrix::from_fn(a.len(), 4, |l, j| a[l] * v[j]);
    write_csv_matrix(d.join("y.csv"), &[], &y).unwrap();
    let o = invpca(d, &["fit-func", "--mesh", "tet.off", "--operator", "identity", "--data", "y.csv", "--lambda", "0", "--no-center", "--out-dir", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_csv(&d.join("out/scores.csv"));
    assert_eq!(header, vec!["pc1"]);
    let norm: f64 = rows.iter().map(|r| r[0] * r[0]).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12, "score norm {norm}");
    let comps = read_container(d.join("out/components.ipca")).unwrap();
    assert_eq!(comps.shape(), (1, 4));
    let (eh, erows) = read_csv(&d.join("out/energy_maps.csv"));
    assert_eq!((eh.len(), erows.len()), (1, 4));
    let report = read_json(&d.join("out/report.json"));
    assert_eq!(report["config"]["lambda"], 0.0);
    assert_eq!(report["command"], "fit-func");
}

#[test]
fn missing_mesh_is_input_error() {
    let dir = TempDir::new().unwrap();
    let o = invpca(dir.path(), &["fit-func", "--mesh", "absent.off", "--operator", "identity", "--data", "y.csv", "--lambda", "1"]);
    assert_eq!(code(&o), 2);
    assert_eq!(error_json(&o)["exit_code"], 2);
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(code(&invpca(d, &["fit-func", "--no-such-flag"])), 2);
    fs::write(d.join("c.json"), r#"{"rank": 1, "lamda": 0.1}"#).unwrap();
    let o = invpca(d, &["fit-func", "--config", "c.json"]);
    assert_eq!(code(&o), 2);
    assert_eq!(error_json(&o)["error"], "InvalidConfig");
    assert_eq!(code(&invpca(d, &["--help"])), 0);
}

#[test]
fn fit_cov_single_sample_recovers_variance() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_spec(d, "s.json", r#"{"channels":1,"sigmas":[2.5],"samples":1,"noise_sigma":0.0,"operator":{"kind":"identity"},"seed":2}"#);
    assert_eq!(code(&invpca(d, &["synth", "--spec", "s.json", "--icosphere", "1", "--kind", "covariance", "--out-dir", "g"])), 0);
    let o = invpca(d, &["fit-cov", "--mesh", "g/mesh.off", "--operator", "identity", "--covariances", "g/cov-000.ipca", "--lambda", "0", "--out-dir", "f"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, truth) = read_csv(&d.join("g/variances_true.csv"));
    let (h, got) = read_csv(&d.join("f/variances_brain.csv"));
    assert_eq!(h, vec!["pc1"]);
    let rel = (got[0][0] - truth[0][0]).abs() / truth[0][0];
    assert!(rel < 1e-6, "variance {} vs {}", got[0][0], truth[0][0]);
    assert!(d.join("f/variances_sensor.csv").exists());
}

#[test]
fn constant_signals_are_a_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("tet.off"), TETRA_OFF).unwrap();
    let x = DMatrix::from_fn(10, 4, |_, j| j as f64 + 1.0);
    write_container(d.join("x.ipca"), &x).unwrap();
    let o = invpca(d, &["fit-cov", "--mesh", "tet.off", "--operator", "identity", "--signals", "x.ipca", "--lambda", "0.1", "--out-dir", "f"]);
    assert_eq!(code(&o), 3);
    assert_eq!(error_json(&o)["error"], "DegenerateComponent");
}

#[test]
fn fit_cov_sensor_mismatch_is_input_error() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("tet.off"), TETRA_OFF).unwrap();
    write_container(d.join("a.ipca"), &DMatrix::identity(4, 4)).unwrap();
    write_container(d.join("b.ipca"), &DMatrix::identity(3, 3)).unwrap();
    let o = invpca(d, &["fit-cov", "--mesh", "tet.off", "--operator", "identity", "--covariances", "a.ipca,b.ipca", "--lambda", "0.1"]);
    assert_eq!(code(&o), 2);
    assert_eq!(error_json(&o)["error"], "DimensionMismatch");
}

#[test]
fn non_psd_covariance_exits_three() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("tet.off"), TETRA_OFF).unwrap();
    let mut s = DMatrix::<f64>::identity(4, 4);
    s[(3, 3)] = -1.0;
    write_container(d.join("s.ipca"), &s).unwrap();
    let o = invpca(d, &["fit-cov", "--mesh", "tet.off", "--operator", "identity", "--covariances", "s.ipca", "--lambda", "0.1"]);
    assert_eq!(code(&o), 3);
    assert_eq!(error_json(&o)["error"], "NotPSD");
}

#[test]
fn synth_rejects_non_decreasing_sigmas() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_spec(d, "s.json", r#"{"channels":1,"sigmas":[1.0,2.0],"samples":4,"noise_sigma":0.1,"operator":{"kind":"identity"},"seed":0}"#);
    let o = invpca(d, &["synth", "--spec", "s.json", "--icosphere", "1"]);
    assert_eq!(code(&o), 2);
    assert_eq!(error_json(&o)["error"], "InvalidConfig");
}

#[test]
fn synth_covariances_load_back_symmetric_psd() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (covs, ops) = cov_dataset(d);
    assert_eq!(covs.split(',').count(), 6);
    assert_eq!(ops.split(',').count(), 6);
    for p in covs.split(',') {
        let s = read_container(p).unwrap();
        assert_eq!(s.shape(), (16, 16));
        assert!((&s - s.transpose()).amax() <= 1e-12 * s.amax());
        let min = SymmetricEigen::new(s.clone()).eigenvalues.min();
        assert!(min >= -1e-9 * s.amax(), "eigenvalue {min}");
    }
    let manifest = read_json(&d.join("sc/manifest.json"));
    assert_eq!(manifest["result"]["kind"], "covariance");
}

#[test]
fn select_single_lambda_matches_direct_fit() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (covs, ops) = cov_dataset(d);
    let base = ["--mesh", "sc/mesh.off", "--operators", &ops, "--covariances", &covs];
    let mut sel: Vec<&str> = vec!["select", "--criterion", "lcurve", "--lambda-grid", "0.1", "--out-dir", "l"];
    sel.extend(base);
    assert_eq!(code(&invpca(d, &sel)), 0);
    let mut fit: Vec<&str> = vec!["fit-cov", "--lambda", "0.1", "--out-dir", "f"];
    fit.extend(base);
    assert_eq!(code(&invpca(d, &fit)), 0);
    let (h, rows) = read_csv(&d.join("l/lcurve.csv"));
    assert_eq!(h, vec!["lambda", "regularity", "residual"]);
    assert_eq!(rows.len(), 1);
    let report = read_json(&d.join("f/report.json"));
    let res = report["result"]["residual_norms"].as_array().unwrap().last().unwrap().as_f64().unwrap();
    assert_eq!(rows[0][2], res);
}

#[test]
fn select_lcurve_regularity_non_increasing() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (covs, ops) = cov_dataset(d);
    let o = invpca(
        d,
        &["select", "--criterion", "lcurve", "--mesh", "sc/mesh.off", "--operators", &ops, "--covariances", &covs, "--lambda-grid", "0.001,0.1,10,1000", "--out-dir", "l"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&d.join("l/lcurve.csv"));
    assert_eq!(rows.len(), 4);
    for w in rows.windows(2) {
        assert!(w[1][1] <= w[0][1], "{rows:?}");
    }
}

#[test]
fn select_cv_writes_choice_and_rejects_too_many_folds() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_spec(d, "s.json", r#"{"channels":1,"sigmas":[3.0],"samples":6,"noise_sigma":0.0,"operator":{"kind":"identity"},"seed":5}"#);
    assert_eq!(code(&invpca(d, &["synth", "--spec", "s.json", "--icosphere", "1", "--out-dir", "g"])), 0);
    let args = ["select", "--mesh", "g/mesh.off", "--operator", "identity", "--data", "g/data.ipca", "--lambda-grid", "0,100", "--out-dir", "cv"];
    let o = invpca(d, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (h, rows) = read_csv(&d.join("cv/cv.csv"));
    assert_eq!(h, vec!["lambda", "error"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(read_json(&d.join("cv/report.json"))["result"]["chosen"], 0.0);
    let mut too_many = args.to_vec();
    too_many.extend(["--folds", "7"]);
    assert_eq!(code(&invpca(d, &too_many)), 2);
}

#[test]
fn fit_func_objective_non_increasing() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_spec(
        d,
        "s.json",
        r#"{"channels":3,"sigmas":[6.0,3.0,1.0],"samples":20,"noise_sigma":5.0,"operator":{"kind":"smoothing","sensors":30},"seed":8}"#,
    );
    assert_eq!(code(&invpca(d, &["synth", "--spec", "s.json", "--icosphere", "2", "--out-dir", "g"])), 0);
    let o = invpca(
        d,
        &["fit-func", "--mesh", "g/mesh.off", "--channels", "3", "--operator", "g/operator.ipca", "--data", "g/data.ipca", "--lambda", "0.1", "--rank", "3", "--out-dir", "f"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&d.join("f/report.json"));
    for comp in report["result"]["components"].as_array().unwrap() {
        let hist: Vec<f64> = comp["objective_history"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        for w in hist.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].abs(), "{hist:?}");
        }
    }
    let res: Vec<f64> = report["result"]["residual_norms"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(res.windows(2).all(|w| w[1] <= w[0]), "{res:?}");
}

#[test]
fn mesh_info_reports_stats() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let o = invpca(d, &["mesh-info", "--icosphere", "2", "--channels", "3", "--write", "m.off"]);
    assert_eq!(code(&o), 0);
    let info: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["node_count"], 162);
    assert_eq!(info["unknowns"], 486);
    assert_eq!(info["is_closed"], true);
    let back = invpca(d, &["mesh-info", "--mesh", "m.off"]);
    let again: Value = serde_json::from_slice(&back.stdout).unwrap();
    assert_eq!(again["triangle_count"], info["triangle_count"]);
}

#[test]
fn reproducible_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_spec(d, "f.json", r#"{"channels":1,"sigmas":[3.0,1.5],"samples":10,"noise_sigma":0.5,"operator":{"kind":"smoothing","sensors":20},"seed":21}"#);
    let runs: Vec<Vec<&str>> = vec![
        vec!["synth", "--spec", "f.json", "--icosphere", "1", "--seed", "9", "--out-dir", "g", "--reproducible"],
        vec!["fit-func", "--mesh", "g/mesh.off", "--operator", "g/operator.ipca", "--data", "g/data.ipca", "--lambda", "0.1", "--rank", "2", "--out-dir", "f", "--reproducible"],
        vec!["select", "--mesh", "g/mesh.off", "--operator", "g/operator.ipca", "--data", "g/data.ipca", "--lambda-grid", "0.01,1", "--seed", "4", "--out-dir", "s", "--reproducible"],
    ];
    for args in &runs {
        let out = d.join(args[args.iter().position(|a| *a == "--out-dir").unwrap() + 1]);
        assert_eq!(code(&invpca(d, args)), 0);
        let first = snapshot(&out);
        assert_eq!(code(&invpca(d, args)), 0);
        assert_eq!(first, snapshot(&out), "{}", args[0]);
        let report = first.keys().find(|p| p.extension().is_some_and(|e| e == "json")).unwrap();
        assert!(!String::from_utf8_lossy(&first[report]).contains("elapsed"));
    }
}
