use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use callrate::factor::{FactorModel, FactorModelDoc};
use serde_json::Value;

fn callrate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_callrate")).args(args).output().expect("spawn callrate")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn put(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Ten weeks of synthetic counts under `dir/data`.
fn synth(dir: &Path) -> PathBuf {
    let cfg = put(dir, "synth.json", r#"{"version":1,"start":"2008-01-07","days":70}"#);
    let out = callrate(&["synth", "--config", &cfg, "--seed", "3", "--out-dir", &path(dir, "data")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("data")
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir);
    let counts = data.join("counts.csv").to_str().unwrap().to_string();
    let model = path(dir, "model.json");

    let bad_version = put(dir, "v2.json", r#"{"version":2,"k":1,"variant":"plain"}"#);
    assert_eq!(code(&callrate(&["fit-factor", "--counts", &counts, "--config", &bad_version, "--out", &model])), 2);
    let unknown = put(dir, "extra.json", r#"{"version":1,"k":1,"variant":"plain","speed":"fast"}"#);
    assert_eq!(code(&callrate(&["fit-factor", "--counts", &counts, "--config", &unknown, "--out", &model])), 2);
    assert_eq!(code(&callrate(&["fit-factor", "--counts", &counts])), 2, "missing arguments are usage errors");

    let good = put(dir, "fit.json", r#"{"version":1,"k":1,"variant":"plain"}"#);
    let missing = path(dir, "nope.csv");
    assert_eq!(code(&callrate(&["fit-factor", "--counts", &missing, "--config", &good, "--out", &model])), 3);
    let garbled = put(dir, "garbled.csv", "date,hour,count\n2008-01-07,1,seven\n");
    assert_eq!(code(&callrate(&["fit-factor", "--counts", &garbled, "--config", &good, "--out", &model])), 3);

    // a negative forecast intensity cannot drive the staffing Monte Carlo
    let mut forecasts = String::from("date,hour,y,bad\n");
    let text = fs::read_to_string(&counts).unwrap();
    for line in text.lines().skip(1) {
        forecasts.push_str(line);
        forecasts.push_str(",-1\n");
    }
    let forecasts = put(dir, "forecasts.csv", &forecasts);
    let queue = put(dir, "queue.json", r#"{"version":1,"q":[5],"nu":[1],"theta":[0.8],"j":50,"replications":1}"#);
    let out = callrate(&["queue", "--test", &counts, "--forecasts", &forecasts, "--config", &queue, "--seed", "1", "--out-dir", &path(dir, "q")]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn model_file_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir);
    let counts = data.join("counts.csv").to_str().unwrap().to_string();
    let cfg = put(dir, "fit.json", r#"{"version":1,"k":2,"variant":"constrained"}"#);
    let model = path(dir, "model.json");
    let out = callrate(&["fit-factor", "--counts", &counts, "--config", &cfg, "--out", &model]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let file: Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let doc: FactorModelDoc = serde_json::from_value(file["factor"].clone()).unwrap();
    assert_eq!(serde_json::to_value(&doc).unwrap(), file["factor"]);
    let restored = FactorModel::from_doc(&doc).unwrap();
    let again = FactorModel::from_doc(&serde_json::from_value(serde_json::to_value(restored.to_doc().unwrap()).unwrap()).unwrap()).unwrap();
    let a = restored.predict_mu(&restored.train_covariates).unwrap();
    let b = again.predict_mu(&again.train_covariates).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let report = path(dir, "report.json");
    assert_eq!(code(&callrate(&["report", "--counts", &counts, "--model", &model, "--out", &report])), 0);
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["model"]["stored_deviance"], r["model"]["recomputed_deviance"]);
    assert_eq!(r["model"]["K"], 2);
}

#[test]
fn synth_is_reproducible_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = synth(a.path());
    let db = synth(b.path());
    for f in ["counts.csv", "excluded.txt", "truth.json"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}
