//! Run configuration as sectioned `key = value` text.
//!
//! ```text
//! [perturbation]
//! mu = 100
//! v = 1
//! ```
//!
//! Every key is addressable by its dotted name (`perturbation.v`), which is
//! how command-line overrides are applied.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::coalition::ExtractionConfig;
use crate::error::{Error, Result};
use crate::evaluation::{default_fractions, OcclusionConfig};
use crate::nn::{Architecture, TrainConfig};
use crate::perturbation::PerturbationConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ours,
    Occlusion,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Occlusion => "occlusion",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(Method::Ours),
            "occlusion" => Ok(Method::Occlusion),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `default` or an architecture string.
    pub arch: String,
    pub checkpoint: PathBuf,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationConfig {
    pub retention: f64,
    pub fractions: Vec<f64>,
    pub occlusion: OcclusionConfig,
    pub method: Method,
    /// Test images to process; 0 means all.
    pub limit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub extraction: ExtractionConfig,
    pub perturbation: PerturbationConfig,
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                arch: "default".into(),
                checkpoint: "model.cpfc".into(),
                train: TrainConfig::default(),
            },
            dataset: DatasetConfig {
                n: 1000,
                size: 32,
                classes: 4,
                seed: 0,
            },
            extraction: ExtractionConfig::default(),
            perturbation: PerturbationConfig::default(),
            evaluation: EvaluationConfig {
                retention: 0.4,
                fractions: default_fractions(),
                occlusion: OcclusionConfig::default(),
                method: Method::Ours,
                limit: 0,
            },
            output_dir: "runs/default".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    pub fn architecture(&self) -> Result<Architecture> {
        if self.model.arch == "default" {
            Ok(Architecture::small_cnn(self.dataset.size, self.dataset.size, self.dataset.classes))
        } else {
            self.model.arch.parse()
        }
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.arch" => self.model.arch = v.to_string(),
            "model.checkpoint" => self.model.checkpoint = v.into(),
            "model.epochs" => self.model.train.epochs = parse(key, v)?,
            "model.lr" => self.model.train.lr = parse(key, v)?,
            "model.momentum" => self.model.train.momentum = parse(key, v)?,
            "model.batch" => self.model.train.batch_size = parse(key, v)?,
            "model.seed" => self.model.train.seed = parse(key, v)?,
            "dataset.n" => self.dataset.n = parse(key, v)?,
            "dataset.size" => self.dataset.size = parse(key, v)?,
            "dataset.classes" => self.dataset.classes = parse(key, v)?,
            "dataset.seed" => self.dataset.seed = parse(key, v)?,
            "extraction.l" => self.extraction.clusters = parse(key, v)?,
            "extraction.k" => self.extraction.min_clusters = parse(key, v)?,
            "extraction.lambda" => self.extraction.lambda = parse(key, v)?,
            "extraction.max_iters" => self.extraction.max_iters = parse(key, v)?,
            "extraction.lr" => self.extraction.lr = parse(key, v)?,
            "extraction.seed" => self.extraction.seed = parse(key, v)?,
            "perturbation.mu" => self.perturbation.mu = parse(key, v)?,
            "perturbation.v" => self.perturbation.v = parse(key, v)?,
            "perturbation.sigma" => self.perturbation.sigma = parse(key, v)?,
            "perturbation.steps" => self.perturbation.steps = parse(key, v)?,
            "perturbation.lr" => self.perturbation.lr = parse(key, v)?,
            "perturbation.optimizer" => self.perturbation.optimizer = v.parse()?,
            "perturbation.a_samples" => self.perturbation.a_samples = parse(key, v)?,
            "perturbation.mode" => self.perturbation.mode = v.parse()?,
            "perturbation.baseline" => self.perturbation.baseline = v.parse()?,
            "perturbation.seed" => self.perturbation.seed = parse(key, v)?,
            "evaluation.retention" => self.evaluation.retention = parse(key, v)?,
            "evaluation.fractions" => {
                self.evaluation.fractions = v
                    .split(',')
                    .map(|f| parse(key, f.trim()))
                    .collect::<Result<_>>()?
            }
            "evaluation.occlusion_patch" => self.evaluation.occlusion.patch = parse(key, v)?,
            "evaluation.occlusion_stride" => self.evaluation.occlusion.stride = parse(key, v)?,
            "evaluation.method" => self.evaluation.method = v.parse()?,
            "evaluation.limit" => self.evaluation.limit = parse(key, v)?,
            "output.dir" => self.output_dir = v.into(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: key outside any section", lineno + 1)));
            }
            cfg.set(&format!("{section}.{}", k.trim()), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies `--section.key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected --section.key, got {flag:?}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => (
                    key.to_string(),
                    it.next()
                        .ok_or_else(|| Error::Config(format!("{flag} needs a value")))?
                        .clone(),
                ),
            };
            self.set(&key, &value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.evaluation.retention) {
            return bad("evaluation.retention must lie in [0, 1]");
        }
        if self.evaluation.fractions.iter().any(|f| !(0.0..=1.0).contains(f))
            || self.evaluation.fractions.windows(2).any(|w| w[0] > w[1])
        {
            return bad("evaluation.fractions must be ascending values in [0, 1]");
        }
        if self.extraction.min_clusters < 2 || self.extraction.min_clusters > self.extraction.clusters {
            return bad("extraction.k must satisfy 2 <= k <= l");
        }
        self.perturbation.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Fully resolved config in the same format [`RunConfig::parse_text`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "arch = {}", m.arch);
        let _ = writeln!(s, "checkpoint = {}", m.checkpoint.display());
        let _ = writeln!(s, "epochs = {}", m.train.epochs);
        let _ = writeln!(s, "lr = {}", m.train.lr);
        let _ = writeln!(s, "momentum = {}", m.train.momentum);
        let _ = writeln!(s, "batch = {}", m.train.batch_size);
        let _ = writeln!(s, "seed = {}", m.train.seed);
        let d = &self.dataset;
        let _ = writeln!(s, "\n[dataset]");
        let _ = writeln!(s, "n = {}", d.n);
        let _ = writeln!(s, "size = {}", d.size);
        let _ = writeln!(s, "classes = {}", d.classes);
        let _ = writeln!(s, "seed = {}", d.seed);
        let e = &self.extraction;
        let _ = writeln!(s, "\n[extraction]");
        let _ = writeln!(s, "l = {}", e.clusters);
        let _ = writeln!(s, "k = {}", e.min_clusters);
        let _ = writeln!(s, "lambda = {}", e.lambda);
        let _ = writeln!(s, "max_iters = {}", e.max_iters);
        let _ = writeln!(s, "lr = {}", e.lr);
        let _ = writeln!(s, "seed = {}", e.seed);
        let p = &self.perturbation;
        let _ = writeln!(s, "\n[perturbation]");
        let _ = writeln!(s, "mu = {}", p.mu);
        let _ = writeln!(s, "v = {}", p.v);
        let _ = writeln!(s, "sigma = {}", p.sigma);
        let _ = writeln!(s, "steps = {}", p.steps);
        let _ = writeln!(s, "lr = {}", p.lr);
        let _ = writeln!(s, "optimizer = {}", p.optimizer);
        let _ = writeln!(s, "a_samples = {}", p.a_samples);
        let _ = writeln!(s, "mode = {}", p.mode);
        let _ = writeln!(s, "baseline = {}", p.baseline);
        let _ = writeln!(s, "seed = {}", p.seed);
        let ev = &self.evaluation;
        let _ = writeln!(s, "\n[evaluation]");
        let _ = writeln!(s, "retention = {}", ev.retention);
        let fr: Vec<String> = ev.fractions.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(s, "fractions = {}", fr.join(","));
        let _ = writeln!(s, "occlusion_patch = {}", ev.occlusion.patch);
        let _ = writeln!(s, "occlusion_stride = {}", ev.occlusion.stride);
        let _ = writeln!(s, "method = {}", ev.method.name());
        let _ = writeln!(s, "limit = {}", ev.limit);
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output_dir.display());
        s
    }
}
