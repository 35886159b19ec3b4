//! Orchestration: model preparation, per-image explanation and scoring, and
//! the artifact layout of a run directory.
//!
//! ```text
//! <out>/manifest.txt
//! <out>/report_<method>_seed<s>_ret<r>.txt
//! <out>/samples/0007/saliency.png
//! <out>/samples/0007/saliency.f32
//! <out>/samples/0007/trace.csv
//! <out>/samples/0007/coalitions/{manifest.txt, coalition_03.png, ...}
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::{Method, RunConfig};
use super::dataset::{generate_shapes_dataset, ShapesDataset};
use super::io::{save_gray_png, save_raw, write_atomic};
use crate::autodiff::Tensor;
use crate::coalition::{extract_coalitions, Extraction};
use crate::error::{Error, Result};
use crate::evaluation::{insertion_curve, occlusion_baseline, score_sample, EvalReport, InsertionPoint, SampleRow};
use crate::nn::{build_classifier, checkpoint, reconfigure_for_extraction, train_classifier, Network, TrainReport};
use crate::perturbation::{optimize_mask, Explanation, SaliencyMap};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Resolves relative paths against an output root.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.resolve(&cfg.output_dir)
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> PathBuf {
        self.resolve(&cfg.model.checkpoint)
    }
}

pub fn dataset(cfg: &RunConfig) -> Result<ShapesDataset> {
    let d = &cfg.dataset;
    generate_shapes_dataset(d.n, d.size, d.size, d.classes, d.seed)
}

/// Trains from scratch on the configured dataset.
pub fn train(cfg: &RunConfig, data: &ShapesDataset) -> Result<(Network, TrainReport)> {
    let net = build_classifier(&cfg.architecture()?, cfg.model.train.seed)?;
    train_classifier(net, &data.train(), &data.test(), &cfg.model.train)
}

/// Loads the checkpoint if present, otherwise trains and saves one.
pub fn prepare_model(cfg: &RunConfig, ws: &Workspace, data: &ShapesDataset) -> Result<(Network, Option<TrainReport>)> {
    let path = ws.checkpoint(cfg);
    if path.exists() {
        return Ok((checkpoint::load(&path)?, None));
    }
    let (net, report) = train(cfg, data)?;
    checkpoint::save(&net, &path)?;
    Ok((net, Some(report)))
}

pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

pub fn extract(net: &Network, cfg: &RunConfig, index: usize, image: &Tensor) -> Result<Extraction> {
    let seed = sample_seed(cfg.extraction.seed, index);
    let enet = reconfigure_for_extraction(net, cfg.extraction.clusters, seed)?;
    let ecfg = crate::coalition::ExtractionConfig {
        seed,
        ..cfg.extraction.clone()
    };
    extract_coalitions(image, enet, &ecfg)
}

/// Coalition extraction followed by mask optimization.
pub fn explain(net: &Network, cfg: &RunConfig, index: usize, image: &Tensor) -> Result<(Extraction, Explanation)> {
    let ex = extract(net, cfg, index, image)?;
    let pcfg = crate::perturbation::PerturbationConfig {
        seed: sample_seed(cfg.perturbation.seed, index),
        ..cfg.perturbation.clone()
    };
    let explanation = optimize_mask(net, image, &ex.coalitions, &pcfg)?;
    Ok((ex, explanation))
}

pub fn trace_csv(trace: &[crate::perturbation::LossRecord]) -> String {
    let mut s = String::from("step,L_r,L_conf,L_c,L\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.mask, r.confidence, r.consistency, r.total);
    }
    s
}

pub fn write_coalitions(dir: &Path, ex: &Extraction, cfg: &RunConfig, seed: u64) -> Result<()> {
    let c = &ex.coalitions;
    for (id, mask) in c.ids.iter().zip(&c.masks) {
        let values: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        save_gray_png(&dir.join(format!("coalition_{id:02}.png")), &values, c.width, c.height)?;
    }
    let mut m = String::new();
    let _ = writeln!(m, "coalitions: {}", c.len());
    let _ = writeln!(m, "ids: {}", c.ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","));
    let _ = writeln!(m, "l: {}", cfg.extraction.clusters);
    let _ = writeln!(m, "k: {}", cfg.extraction.min_clusters);
    let _ = writeln!(m, "lambda: {}", cfg.extraction.lambda);
    let _ = writeln!(m, "seed: {seed}");
    let _ = writeln!(m, "iterations: {}", ex.iterations);
    write_atomic(&dir.join("manifest.txt"), m.as_bytes())
}

pub fn write_saliency(dir: &Path, s: &SaliencyMap) -> Result<()> {
    save_gray_png(&dir.join("saliency.png"), &s.values, s.width, s.height)?;
    save_raw(&dir.join("saliency.f32"), &s.values)
}

pub fn manifest_text(cfg: &RunConfig, command: &str) -> String {
    format!("# {VERSION}\n# command: {command}\n{}", cfg.to_text())
}

pub fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    write_atomic(&dir.join("manifest.txt"), manifest_text(cfg, command).as_bytes())
}

/// Test images selected by `evaluation.limit`.
pub fn selected(cfg: &RunConfig, data: &ShapesDataset) -> Vec<usize> {
    let idx: Vec<usize> = data.test_indices().collect();
    match cfg.evaluation.limit {
        0 => idx,
        n => idx.into_iter().take(n).collect(),
    }
}

fn saliency_for(
    net: &Network,
    cfg: &RunConfig,
    index: usize,
    image: &Tensor,
    dir: &Path,
    write: bool,
) -> Result<SaliencyMap> {
    match cfg.evaluation.method {
        Method::Ours => {
            let (ex, expl) = explain(net, cfg, index, image)?;
            if write {
                write_coalitions(&dir.join("coalitions"), &ex, cfg, sample_seed(cfg.extraction.seed, index))?;
                write_atomic(&dir.join("trace.csv"), trace_csv(&expl.trace).as_bytes())?;
            }
            Ok(expl.saliency)
        }
        Method::Occlusion => {
            let baseline = cfg.perturbation.baseline.image(image)?;
            occlusion_baseline(net, image, &cfg.evaluation.occlusion, &baseline)
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub report_path: Option<PathBuf>,
    pub curves: Vec<Vec<InsertionPoint>>,
}

/// Explains and scores every selected test image. A failing sample is
/// recorded in its row and the run continues. With `write` unset nothing
/// touches the filesystem.
pub fn evaluate(
    net: &Network,
    cfg: &RunConfig,
    data: &ShapesDataset,
    indices: &[usize],
    out: Option<&Path>,
) -> Result<RunOutcome> {
    let mut rows = Vec::with_capacity(indices.len());
    let mut curves = Vec::new();
    for &i in indices {
        let image = &data.images[i];
        let label = data.labels[i];
        let dir = out.map(|o| o.join("samples").join(format!("{i:04}"))).unwrap_or_default();
        let attempt = (|| -> Result<(SampleRow, Vec<InsertionPoint>)> {
            let saliency = saliency_for(net, cfg, i, image, &dir, out.is_some())?;
            if out.is_some() {
                write_saliency(&dir, &saliency)?;
            }
            let baseline = Tensor::zeros(image.shape().to_vec());
            let row = score_sample(net, i, label, image, &saliency, cfg.evaluation.retention, &baseline)?;
            let curve = insertion_curve(net, image, &saliency, row.target, &cfg.evaluation.fractions, &baseline)?;
            Ok((row, curve))
        })();
        match attempt {
            Ok((row, curve)) => {
                rows.push(row);
                curves.push(curve);
            }
            Err(e) => rows.push(SampleRow::failed(i, label, e.to_string())),
        }
    }
    let report = EvalReport::build(
        cfg.evaluation.method.name(),
        cfg.perturbation.seed,
        cfg.evaluation.retention,
        rows,
        &curves,
    )?;
    let report_path = match out {
        Some(o) => {
            let p = o.join(report.file_name());
            write_atomic(&p, report.to_text().as_bytes())?;
            Some(p)
        }
        None => None,
    };
    Ok(RunOutcome {
        report,
        report_path,
        curves,
    })
}

/// Full run: dataset, model, explanations, metrics and manifest.
pub fn run_pipeline(cfg: &RunConfig, ws: &Workspace, command: &str) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = dataset(cfg)?;
    let (net, _) = prepare_model(cfg, ws, &data)?;
    let out = ws.out_dir(cfg);
    write_manifest(&out, cfg, command)?;
    evaluate(&net, cfg, &data, &selected(cfg, &data), Some(&out))
}

/// Paired runs with the consistency weight at zero and at its configured
/// value, written to `<out>/v0` and `<out>/v<value>`.
pub fn ablate(cfg: &RunConfig, ws: &Workspace) -> Result<(RunOutcome, RunOutcome)> {
    if cfg.perturbation.v == 0.0 {
        return Err(Error::Config("ablate needs a nonzero perturbation.v to compare against".into()));
    }
    let mut without = cfg.clone();
    without.perturbation.v = 0.0;
    without.evaluation.method = Method::Ours;
    without.output_dir = cfg.output_dir.join("v0");
    let mut with = cfg.clone();
    with.evaluation.method = Method::Ours;
    with.output_dir = cfg.output_dir.join(format!("v{}", cfg.perturbation.v));
    let a = run_pipeline(&without, ws, "ablate")?;
    let b = run_pipeline(&with, ws, "ablate")?;
    let mut s = String::from("v,ad,ad_clamped,pi,t1,n,failed\n");
    for (v, r) in [(0.0, &a.report), (cfg.perturbation.v, &b.report)] {
        let _ = writeln!(s, "{v},{},{},{},{},{},{}", r.ad, r.ad_clamped, r.pi, r.t1, r.n, r.failures());
    }
    write_atomic(&ws.out_dir(cfg).join("ablation.csv"), s.as_bytes())?;
    Ok((a, b))
}
