use std::path::Path;
use std::process::Command;

fn hostcp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hostcp"))
}

const SMALL: &str = r#"{
  "source": {"kind": "synthetic", "n": 80, "d": 3, "seed": 1},
  "fractions": [0.25, 1.0],
  "seeds": [0, 1],
  "test_size": 40,
  "retrain_epochs": 5,
  "trainer": {"epochs": 1, "k": 4, "predictor_arch": [6], "embedder_arch": [4, 3]}
}"#;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn addition_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let status = hostcp()
        .args(["addition", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "3"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for f in ["report.json", "curve.csv", "curve.dat"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "addition");
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert_eq!(report["rows"][0]["seed"], 3);
}

#[test]
fn train_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("train");
    let status = hostcp().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    let logs: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("trainlog.json")).unwrap()).unwrap();
    assert_eq!(logs.as_array().unwrap().len(), 2);
}

#[test]
fn gen_data_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data.csv");
    let status = hostcp().args(["gen-data", "--n", "30", "--d", "2", "--seed", "5", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    let ds = hostcp::dataset::load_csv(&out).unwrap();
    assert_eq!((ds.n(), ds.d()), (30, 2));
    assert_eq!(ds, hostcp::dataset::gen_synthetic(30, 2, 5).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"unknown_key": 1}"#);
    let out = hostcp().args(["addition", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let missing = hostcp().args(["removal", "--config", "/nonexistent/config.json"]).status().unwrap();
    assert_eq!(missing.code(), Some(2));

    let mismatch = write_config(dir.path(), r#"{"experiment": "ndcg"}"#);
    let status = hostcp().args(["addition", "--config"]).arg(&mismatch).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let status = hostcp().args(["gen-data", "--n", "1", "--d", "2", "--out"]).arg(dir.path().join("x.csv")).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // A huge embedder step drives the parameters to overflow.
    let body = SMALL.replace(r#""epochs": 1,"#, r#""epochs": 3, "beta": 1e300, "alpha": 1e300,"#);
    let cfg = write_config(dir.path(), &body);
    let out = hostcp().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
