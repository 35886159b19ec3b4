use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--dataset.n", "40",
    "--dataset.size", "16",
    "--model.epochs", "2",
    "--extraction.l", "8",
    "--extraction.max_iters", "20",
    "--perturbation.steps", "20",
    "--evaluation.limit", "2",
];

fn cpfc(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpfc"))
        .args(args)
        .env("CPFC_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn with_small<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(extra);
    v.extend_from_slice(SMALL);
    v
}

#[test]
fn train_then_explain() {
    let root = tempfile::tempdir().unwrap();
    let out = cpfc(root.path(), &with_small("train", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.path().join("model.cpfc").exists());
    let train = fs::read_to_string(root.path().join("runs/default/train.txt")).unwrap();
    assert!(train.starts_with("untrained_accuracy: "));

    let out = cpfc(root.path(), &with_small("explain", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 2, "{stdout}");
    assert!(root.path().join("runs/default/samples/0033/saliency.png").exists());
}

#[test]
fn gen_data_writes_images_and_labels() {
    let root = tempfile::tempdir().unwrap();
    let out = cpfc(root.path(), &["gen-data", "--dataset.n", "10", "--dataset.size", "16"]);
    assert!(out.status.success());
    let dir = root.path().join("runs/default/dataset");
    assert!(dir.join("0009.png").exists());
    let labels = fs::read_to_string(dir.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 11);
    assert_eq!(labels.lines().nth(8), Some("7,train,3"));
    assert_eq!(labels.lines().nth(9), Some("8,test,0"));
}

#[test]
fn config_file_and_overrides_combine() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.cfg");
    fs::write(&cfg, "[output]\ndir = elsewhere\n[dataset]\nn = 12\nsize = 16\n").unwrap();
    let out = cpfc(
        root.path(),
        &["gen-data", "--config", cfg.to_str().unwrap(), "--dataset.n", "16"],
    );
    assert!(out.status.success());
    let manifest = fs::read_to_string(root.path().join("elsewhere/manifest.txt")).unwrap();
    assert!(manifest.contains("n = 16\n"));
    assert!(manifest.contains("size = 16\n"));
    assert!(manifest.contains("# command: gen-data"));
}

#[test]
fn bad_input_exits_with_error() {
    let root = tempfile::tempdir().unwrap();
    let out = cpfc(root.path(), &["evaluate", "--perturbation.sigma", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigma"));

    let out = cpfc(root.path(), &with_small("explain", &["--image", "missing.png"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.png"));

    let out = cpfc(root.path(), &["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn external_image_is_explained() {
    let root = tempfile::tempdir().unwrap();
    assert!(cpfc(root.path(), &["gen-data", "--dataset.n", "8", "--dataset.size", "16"]).status.success());
    let img = root.path().join("runs/default/dataset/0003.png");
    let out = cpfc(root.path(), &with_small("extract", &["--image", img.to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.path().join("runs/default/samples/image/coalitions/manifest.txt").exists());
}
