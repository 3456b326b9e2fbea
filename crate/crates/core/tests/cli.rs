use std::fs;
use std::process::Command;

use lawforge::extract::to_expression;
use lawforge::symnet::{default_parfam_spec, Checkpoint};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lawforge"))
}

#[test]
fn extract_prints_handbuilt_law() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = default_parfam_spec(2);
    spec.input_scale = vec![150.0, 20.0];
    spec.output_scale = 90.0;
    let theta = spec.theta_for_polynomial_law(&[(vec![1, 0], 1.0), (vec![0, 1], 2.0)]).unwrap();
    let path = dir.path().join("ck.json");
    fs::write(&path, Checkpoint::new(spec, theta).to_json().unwrap()).unwrap();

    let out = bin().args(["extract", "--checkpoint"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "2·u_x + u");

    let out = bin().args(["extract", "--json", "--checkpoint"]).arg(&path).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let expr = lawforge::extract::Expression::from_json(&text).unwrap();
    assert_eq!(expr.to_string(), "2·u_x + u");
}

#[test]
fn gap_is_decreasing() {
    let out = bin().args(["gap", "--experiment", "exponential"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("m,gap"));
    let gaps: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(gaps.len(), 4);
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
}

#[test]
fn unknown_experiment_lists_valid_tags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "experiment = \"heat\"\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("advection") && err.contains("exponential"), "{err}");

    let out = bin().args(["run", "--experiment", "heat"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("advection") && err.contains("exponential"), "{err}");
}

#[test]
fn run_writes_artifacts_that_extract_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(
        &cfg,
        "experiment = \"advection\"\nm_values = [50]\ncycles = 1\nn_hops = 1\nbfgs_iters = 10\nadam_epochs = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--seed", "7", "--config"])
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&out_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(report.contains("recovered law at m = 50"));
    assert!(report.contains("seed = 7"));

    let mut rdr = csv::Reader::from_path(out_dir.join("convergence.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, lawforge::harness::CONVERGENCE_HEADER);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "50");

    let ck_text = fs::read_to_string(out_dir.join("checkpoint_m50.json")).unwrap();
    let ck = Checkpoint::from_json(&ck_text).unwrap();
    let expr = to_expression(&ck.spec, &ck.theta, 1e-3).unwrap();
    assert_eq!(expr.to_string(), rows[0][9]);

    let out = bin().args(["extract", "--checkpoint"]).arg(out_dir.join("checkpoint_m50.json")).output().unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), &rows[0][9]);

    let state = fs::File::open(out_dir.join("state_m50.csv")).unwrap();
    let u = lawforge::field::StateField::read_csv(state).unwrap();
    assert_eq!(u.grid(), &lawforge::field::Grid::default());
    let cycles = fs::read_to_string(out_dir.join("cycles_m50.csv")).unwrap();
    assert_eq!(cycles.lines().count(), 3);
}
