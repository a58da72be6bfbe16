use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k")
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let out = lfg(&["crossval", "--experiment", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_dir_fails_cleanly() {
    let out = lfg(&[
        "crossval",
        "--experiment",
        "1",
        "--data-dir",
        "/nonexistent/ml-100k",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn predict_rejects_missing_model_file() {
    let out = lfg(&[
        "predict",
        "--model-file",
        "/nonexistent.lfg",
        "--age",
        "30",
        "--gender",
        "F",
        "--occupation",
        "writer",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_predict_with_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("bias.mfb");
    let data = data_dir();
    let out = lfg(&[
        "train",
        "--model",
        "biassvd",
        "--sgd-epochs",
        "2",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(&std::fs::read(&model).unwrap()[..4], b"MFB1");

    let args = [
        "predict",
        "--model-file",
        model.to_str().unwrap(),
        "1=5",
        "50=4",
        "--age",
        "30",
        "--gender",
        "F",
        "--occupation",
        "writer",
        "--top-n",
        "5",
        "--json",
    ];
    let first = lfg(&args);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let body: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let items = body["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    assert!(items.iter().all(|i| i["item"] != 1 && i["item"] != 50));
    assert_eq!(lfg(&args).stdout, first.stdout);

    let mut zero = args.to_vec();
    zero[12] = "0";
    let body: serde_json::Value = serde_json::from_slice(&lfg(&zero).stdout).unwrap();
    assert!(body["items"].as_array().unwrap().is_empty());

    let bad = lfg(&[
        "predict",
        "--model-file",
        model.to_str().unwrap(),
        "1=9",
        "--age",
        "30",
        "--gender",
        "F",
        "--occupation",
        "writer",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
