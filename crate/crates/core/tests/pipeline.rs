use std::fs;
use std::path::Path;

use cpfc::autodiff::Tensor;
use cpfc::harness::pipeline::{self, evaluate, selected};
use cpfc::harness::{run_pipeline, Method, RunConfig, Workspace};

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    let overrides: Vec<String> = [
        "--dataset.n", "40",
        "--dataset.size", "16",
        "--model.epochs", "3",
        "--extraction.l", "8",
        "--extraction.max_iters", "30",
        "--perturbation.steps", "30",
        "--evaluation.limit", "3",
        "--evaluation.occlusion_patch", "4",
        "--evaluation.occlusion_stride", "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    c.apply_overrides(&overrides).unwrap();
    c
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_writes_every_artifact() {
    let root = tempfile::tempdir().unwrap();
    let ws = Workspace::new(root.path());
    let cfg = small();
    let out = run_pipeline(&cfg, &ws, "evaluate").unwrap();
    assert_eq!(out.report.rows.len(), 3);
    assert_eq!(out.report.failures(), 0);
    assert!(out.report.ad.is_finite() && out.report.pi.is_finite() && out.report.t1.is_finite());
    assert_eq!(out.report.insertion.len(), 11);

    let dir = root.path().join("runs/default");
    assert!(root.path().join("model.cpfc").exists());
    let manifest = read(&dir.join("manifest.txt"));
    assert!(manifest.contains("# command: evaluate"));
    assert!(manifest.contains("v = 1"));
    let resolved: String = manifest.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    assert_eq!(RunConfig::parse_text(&resolved).unwrap(), cfg);

    let sample = dir.join("samples/0032");
    assert!(sample.join("saliency.png").exists());
    assert_eq!(fs::metadata(sample.join("saliency.f32")).unwrap().len(), 16 * 16 * 4);
    assert!(read(&sample.join("trace.csv")).starts_with("step,L_r,L_conf,L_c,L\n"));
    let coalitions = read(&sample.join("coalitions/manifest.txt"));
    assert!(coalitions.contains("lambda: 1"));
    assert!(fs::read_dir(sample.join("coalitions")).unwrap().any(|e| {
        e.unwrap().file_name().to_string_lossy().starts_with("coalition_")
    }));
    let report = out.report_path.unwrap();
    assert_eq!(read(&report), out.report.to_text());
    for entry in walk(root.path()) {
        assert!(!entry.to_string_lossy().ends_with(".partial"), "{}", entry.display());
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = small();
    let texts: Vec<(String, String)> = (0..2)
        .map(|_| {
            let root = tempfile::tempdir().unwrap();
            let ws = Workspace::new(root.path());
            let out = run_pipeline(&cfg, &ws, "evaluate").unwrap();
            let trace = read(&root.path().join("runs/default/samples/0033/trace.csv"));
            (read(&out.report_path.unwrap()), trace)
        })
        .collect();
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn occlusion_method_runs_through_the_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.evaluation.method = Method::Occlusion;
    let out = run_pipeline(&cfg, &Workspace::new(root.path()), "occlusion").unwrap();
    assert_eq!(out.report.method, "occlusion");
    assert_eq!(out.report.n, 3);
    assert!(out.report_path.unwrap().ends_with("report_occlusion_seed0_ret0.40.txt"));
}

#[test]
fn failing_sample_is_recorded_and_the_rest_continue() {
    let cfg = small();
    let mut data = pipeline::dataset(&cfg).unwrap();
    let (net, _) = pipeline::train(&cfg, &data).unwrap();
    let idx = selected(&cfg, &data);
    data.images[idx[1]] = Tensor::zeros(vec![3, 8, 8]);
    let out = evaluate(&net, &cfg, &data, &idx, None).unwrap();
    assert_eq!(out.report.rows.len(), 3);
    assert_eq!(out.report.failures(), 1);
    assert_eq!(out.report.n, 2);
    assert!(out.report.rows[1].failure.as_deref().unwrap().contains("shape"));
    assert!(out.report.to_text().contains("failed: 1"));
}

#[test]
fn ablation_pairs_v0_with_default() {
    let root = tempfile::tempdir().unwrap();
    let ws = Workspace::new(root.path());
    let mut cfg = small();
    cfg.evaluation.limit = 2;
    let (a, b) = pipeline::ablate(&cfg, &ws).unwrap();
    assert_eq!(a.report.n, 2);
    assert_eq!(b.report.n, 2);
    let dir = root.path().join("runs/default");
    assert!(read(&dir.join("v0/manifest.txt")).contains("v = 0\n"));
    assert!(read(&dir.join("v1/manifest.txt")).contains("v = 1\n"));
    let csv = read(&dir.join("ablation.csv"));
    assert_eq!(csv.lines().count(), 3, "{csv}");

    cfg.perturbation.v = 0.0;
    assert!(pipeline::ablate(&cfg, &ws).is_err());
}

#[test]
fn existing_checkpoint_is_reused() {
    let root = tempfile::tempdir().unwrap();
    let ws = Workspace::new(root.path());
    let cfg = small();
    let data = pipeline::dataset(&cfg).unwrap();
    let (first, report) = pipeline::prepare_model(&cfg, &ws, &data).unwrap();
    assert!(report.is_some());
    let (second, report) = pipeline::prepare_model(&cfg, &ws, &data).unwrap();
    assert!(report.is_none());
    assert_eq!(first, second);
}
