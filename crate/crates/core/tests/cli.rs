use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selective_ad::detector::make_synthetic;
use selective_ad::tensor::CovMatrix;
use selective_ad::vae::{load_weights, VaeModel};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selective-ad"))
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out_path = dir.join(name);
    let out = bin()
        .args(["train", "--n", "64", "--seed", "3"])
        .args(extra)
        .arg("--out")
        .arg(&out_path)
        .output()
        .unwrap();
    (out_path, out)
}

fn write_grid(path: &Path, values: &[f64], width: usize) {
    let text: String = values
        .chunks(width)
        .map(|row| row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    std::fs::write(path, text).unwrap();
}

fn test_image(weights: &Path, image: &Path, extra: &[&str]) -> Output {
    bin()
        .args(["test", "--weights"])
        .arg(weights)
        .arg("--image")
        .arg(image)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn zero_epochs_saves_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (path, out) = train(dir.path(), "w.json", &["--epochs", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (model, detector) = load_weights(&path).unwrap();
    assert_eq!(model, VaeModel::reference(64, 3).unwrap());
    let detector = detector.unwrap();
    assert_eq!((detector.lambda, detector.filter_window), (1.2, 3));
}

#[test]
fn fixed_seed_gives_identical_weight_files_and_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let (a, out_a) = train(dir.path(), "a.json", &["--epochs", "15"]);
    let (b, _) = train(dir.path(), "b.json", &["--epochs", "15"]);
    assert!(out_a.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let losses: Vec<f64> = String::from_utf8(out_a.stdout)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_whitespace().last()?.parse().ok())
        .collect();
    assert_eq!(losses.len(), 15);
    assert!(losses[14] < losses[0], "{losses:?}");
}

#[test]
fn test_reports_planted_region_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = train(dir.path(), "w.json", &["--epochs", "40"]);
    let (x, _) = make_synthetic(64, 4.0, 16, &CovMatrix::identity(64), 1).unwrap();
    let image = dir.path().join("x.csv");
    write_grid(&image, x.pixels().as_slice().unwrap(), 8);

    let out = test_image(&weights, &image, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["status"], "tested");
    assert_eq!(json["n"], 64);
    for key in ["p_selective", "p_naive", "p_bonferroni", "p_over_conditioning"] {
        let p = json[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p), "{key} = {p}");
    }
    assert!(json["p_bonferroni"].as_f64() >= json["p_naive"].as_f64());
    assert!(!json["truncation"].as_array().unwrap().is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("p_selective"));
}

#[test]
fn undefined_region_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = train(dir.path(), "w.json", &["--epochs", "0"]);
    let image = dir.path().join("x.csv");
    write_grid(&image, &[0.5; 64], 8);
    let out = test_image(&weights, &image, &["--lambda", "1e6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no testable region"));
}

#[test]
fn malformed_image_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = train(dir.path(), "w.json", &["--epochs", "0"]);
    let image = dir.path().join("bad.csv");
    let mut text = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8\n".repeat(7);
    text.push_str("0.1,0.2,oops,0.4,0.5,0.6,0.7,0.8\n");
    std::fs::write(&image, text).unwrap();
    let out = test_image(&weights, &image, &[]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 8 column 3"), "{err}");
}

#[test]
fn wrong_image_size_and_missing_file_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = train(dir.path(), "w.json", &["--epochs", "0"]);
    let image = dir.path().join("small.csv");
    write_grid(&image, &[0.0; 16], 4);
    assert_eq!(test_image(&weights, &image, &[]).status.code(), Some(4));
    let missing = dir.path().join("nope.csv");
    assert_eq!(test_image(&weights, &missing, &[]).status.code(), Some(4));
}

#[test]
fn experiment_writes_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (weights, _) = train(dir.path(), "w.json", &["--epochs", "20"]);
    let out = bin()
        .args(["experiment", "--kind", "type1", "--n", "64", "--trials", "30", "--weights"])
        .arg(&weights)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,setting,n,delta,cov,alpha,trials,undefined,rejections,rate,ci_lo,ci_hi"
    );
    let methods: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["selective", "naive", "bonf", "oc"]);
}

#[test]
fn large_sizes_need_the_flag() {
    let out = bin()
        .args(["experiment", "--n", "1024", "--trials", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--large"));
}

#[test]
fn usage_errors_exit_4() {
    let out = bin().args(["test", "--weights"]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}
