use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpfc::harness::config::{Method, RunConfig};
use cpfc::harness::io::{load_image, save_image, write_atomic};
use cpfc::harness::pipeline::{self, Workspace};
use cpfc::nn::checkpoint;
use cpfc::Result;

/// Relative paths in the config resolve against this directory.
const OUTPUT_ROOT_ENV: &str = "CPFC_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "cpfc", version, about = "Coalition-guided perturbation saliency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Sectioned key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `--perturbation.v 0`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct WithImage {
    /// Explain this PNG instead of the test split.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PNGs plus a label file.
    GenData(Common),
    /// Train the classifier and save a checkpoint.
    Train(Common),
    /// Extract feature coalitions.
    Extract(WithImage),
    /// Extract coalitions and optimize saliency masks.
    Explain(WithImage),
    /// Evaluate the occlusion baseline.
    Occlusion(Common),
    /// Evaluate the configured method.
    Evaluate(Common),
    /// Evaluate and write the insertion curve.
    Insertion(Common),
    /// Paired runs without and with the consistency term.
    Ablate(Common),
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn workspace() -> Workspace {
    Workspace::new(std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| ".".into()))
}

fn print_report(r: &cpfc::evaluation::EvalReport, path: Option<&std::path::Path>) {
    println!(
        "{}: n={} failed={} AD={:.4} PI={:.4} T1={:.4}",
        r.method,
        r.n,
        r.failures(),
        r.ad,
        r.pi,
        r.t1
    );
    if let Some(p) = path {
        println!("report: {}", p.display());
    }
}

/// Returns the number of failed samples.
fn run(cmd: Command) -> Result<usize> {
    let ws = workspace();
    match cmd {
        Command::GenData(c) => {
            let cfg = config(&c)?;
            let data = pipeline::dataset(&cfg)?;
            let out = ws.out_dir(&cfg).join("dataset");
            let mut labels = String::from("index,split,label\n");
            for i in 0..data.len() {
                save_image(&out.join(format!("{i:04}.png")), &data.images[i])?;
                let split = if i < data.train_len { "train" } else { "test" };
                let _ = writeln!(labels, "{i},{split},{}", data.labels[i]);
            }
            write_atomic(&out.join("labels.csv"), labels.as_bytes())?;
            pipeline::write_manifest(&ws.out_dir(&cfg), &cfg, "gen-data")?;
            println!("{} images in {}", data.len(), out.display());
            Ok(0)
        }
        Command::Train(c) => {
            let cfg = config(&c)?;
            let data = pipeline::dataset(&cfg)?;
            let (net, report) = pipeline::train(&cfg, &data)?;
            let path = ws.checkpoint(&cfg);
            checkpoint::save(&net, &path)?;
            let mut s = String::new();
            let _ = writeln!(s, "untrained_accuracy: {}", report.untrained_accuracy);
            let _ = writeln!(s, "train_accuracy: {}", report.train_accuracy);
            let _ = writeln!(s, "held_out_accuracy: {}", report.held_out_accuracy);
            let _ = writeln!(s, "epoch,loss");
            for (e, l) in report.epoch_losses.iter().enumerate() {
                let _ = writeln!(s, "{e},{l}");
            }
            let out = ws.out_dir(&cfg);
            write_atomic(&out.join("train.txt"), s.as_bytes())?;
            pipeline::write_manifest(&out, &cfg, "train")?;
            println!(
                "held-out accuracy {:.4}, checkpoint {}",
                report.held_out_accuracy,
                path.display()
            );
            Ok(0)
        }
        Command::Extract(w) => stage(&ws, w, false),
        Command::Explain(w) => stage(&ws, w, true),
        Command::Occlusion(c) => {
            let mut cfg = config(&c)?;
            cfg.evaluation.method = Method::Occlusion;
            let o = pipeline::run_pipeline(&cfg, &ws, "occlusion")?;
            print_report(&o.report, o.report_path.as_deref());
            Ok(o.report.failures())
        }
        Command::Evaluate(c) => {
            let cfg = config(&c)?;
            let o = pipeline::run_pipeline(&cfg, &ws, "evaluate")?;
            print_report(&o.report, o.report_path.as_deref());
            Ok(o.report.failures())
        }
        Command::Insertion(c) => {
            let cfg = config(&c)?;
            let o = pipeline::run_pipeline(&cfg, &ws, "insertion")?;
            let mut s = String::from("fraction,mean_confidence,top1\n");
            for p in &o.report.insertion {
                let _ = writeln!(s, "{},{},{}", p.fraction, p.mean_confidence, p.top1);
                println!("{:.2}  conf {:.4}  top1 {:.4}", p.fraction, p.mean_confidence, p.top1);
            }
            write_atomic(&ws.out_dir(&cfg).join("insertion.csv"), s.as_bytes())?;
            Ok(o.report.failures())
        }
        Command::Ablate(c) => {
            let cfg = config(&c)?;
            let (a, b) = pipeline::ablate(&cfg, &ws)?;
            print_report(&a.report, a.report_path.as_deref());
            print_report(&b.report, b.report_path.as_deref());
            Ok(a.report.failures() + b.report.failures())
        }
    }
}

/// `extract` and `explain`, on the test split or on one external image.
fn stage(ws: &Workspace, w: WithImage, full: bool) -> Result<usize> {
    let cfg = config(&w.common)?;
    let command = if full { "explain" } else { "extract" };
    let data = pipeline::dataset(&cfg)?;
    let (net, _) = pipeline::prepare_model(&cfg, ws, &data)?;
    let out = ws.out_dir(&cfg);
    pipeline::write_manifest(&out, &cfg, command)?;
    let inputs: Vec<(usize, String, cpfc::autodiff::Tensor)> = match &w.image {
        Some(p) => vec![(0, "image".into(), load_image(p)?)],
        None => pipeline::selected(&cfg, &data)
            .into_iter()
            .map(|i| (i, format!("{i:04}"), data.images[i].clone()))
            .collect(),
    };
    let mut failed = 0;
    for (i, name, image) in inputs {
        let dir = out.join("samples").join(&name);
        let attempt = || -> Result<String> {
            if full {
                let (ex, expl) = pipeline::explain(&net, &cfg, i, &image)?;
                pipeline::write_coalitions(&dir.join("coalitions"), &ex, &cfg, pipeline::sample_seed(cfg.extraction.seed, i))?;
                write_atomic(&dir.join("trace.csv"), pipeline::trace_csv(&expl.trace).as_bytes())?;
                pipeline::write_saliency(&dir, &expl.saliency)?;
                Ok(format!("{} coalitions, class {}", ex.coalitions.len(), expl.target))
            } else {
                let ex = pipeline::extract(&net, &cfg, i, &image)?;
                pipeline::write_coalitions(&dir.join("coalitions"), &ex, &cfg, pipeline::sample_seed(cfg.extraction.seed, i))?;
                Ok(format!("{} coalitions after {} iterations", ex.coalitions.len(), ex.iterations))
            }
        };
        match attempt() {
            Ok(msg) => println!("{name}: {msg}"),
            Err(e) => {
                failed += 1;
                eprintln!("{name}: failed: {e}");
            }
        }
    }
    Ok(failed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} sample(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
