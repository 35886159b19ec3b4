//! Coalition-guided perturbation masks.
//!
//! A mask `p` in `(0, 1)^{H x W}` deletes input evidence. The optimizer grows
//! `p` as far as it can (`-|p|_1`) while a hinge on the softmax output keeps
//! the original class ahead of every rival, and a Gaussian-smoothed sum over
//! the feature coalitions adds a consistency term. The saliency map is
//! `1 - p`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::sigmoid;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::coalition::CoalitionSet;
use crate::error::{Error, Result};
use crate::nn::{predict, Network, NormMode};

/// How a mask value perturbs the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbMode {
    /// `x (1 - a p) + b (a p)`
    MaskBlend,
    /// `x + a p`
    Additive,
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbMode::MaskBlend => "mask_blend",
            PerturbMode::Additive => "additive",
        })
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_blend" => Ok(PerturbMode::MaskBlend),
            "additive" => Ok(PerturbMode::Additive),
            _ => Err(Error::Config(format!("unknown perturbation mode {s:?}"))),
        }
    }
}

/// Fill content for deleted pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    Zeros,
    /// Gaussian blur of the input with the given standard deviation.
    Blur(f32),
}

pub const DEFAULT_BLUR_SIGMA: f32 = 3.0;

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Zeros => f.write_str("zeros"),
            Baseline::Blur(s) if *s == DEFAULT_BLUR_SIGMA => f.write_str("blur"),
            Baseline::Blur(s) => write!(f, "blur:{s}"),
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(Baseline::Zeros),
            "blur" => Ok(Baseline::Blur(DEFAULT_BLUR_SIGMA)),
            _ => match s.strip_prefix("blur:").map(str::parse::<f32>) {
                Some(Ok(sigma)) if sigma > 0.0 => Ok(Baseline::Blur(sigma)),
                _ => Err(Error::Config(format!("unknown baseline {s:?}"))),
            },
        }
    }
}

impl Baseline {
    /// The baseline image for a `[C, H, W]` input.
    pub fn image(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            Baseline::Zeros => Ok(Tensor::zeros(x.shape().to_vec())),
            Baseline::Blur(sigma) => {
                let kernel = gaussian_kernel(sigma as f64)?.cast::<f32>();
                let mut tape = Tape::<f32>::new();
                let v = tape.constant(x);
                let b = tape.blur(v, &kernel)?;
                Ok(tape.tensor(b))
            }
        }
    }
}

/// Update rule for the mask latent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Gd,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Gd => "gd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" => Ok(Optimizer::Gd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConfig {
    /// Confidence-loss weight.
    pub mu: f32,
    /// Consistency-loss weight.
    pub v: f32,
    /// Gaussian standard deviation in pixels.
    pub sigma: f32,
    pub steps: usize,
    pub lr: f32,
    pub optimizer: Optimizer,
    /// Draws of the perturbation strength `a` averaged per step.
    pub a_samples: usize,
    pub mode: PerturbMode,
    pub baseline: Baseline,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            mu: 100.0,
            v: 1.0,
            sigma: 1.0,
            steps: 300,
            lr: 0.1,
            optimizer: Optimizer::Adam,
            a_samples: 1,
            mode: PerturbMode::MaskBlend,
            baseline: Baseline::Zeros,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.mu >= 0.0 && self.v >= 0.0) {
            return bad(format!("weights must be >= 0 (mu {}, v {})", self.mu, self.v));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.steps == 0 || self.a_samples == 0 {
            return bad("steps and a_samples must be >= 1".into());
        }
        Ok(())
    }
}

/// Per-pixel saliency in `[0, 1]`, row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(
                "saliency",
                format!("{} values for {width}x{height}", values.len()),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("saliency values must lie in [0, 1]".into()));
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
        })
    }

    /// `1 - p`.
    pub fn from_mask(p: &Tensor) -> Result<Self> {
        let [h, w] = match p.shape() {
            [h, w] => [*h, *w],
            s => return Err(Error::shape("saliency", format!("mask must be [H, W], got {s:?}"))),
        };
        Self::new(w, h, p.data().iter().map(|v| 1.0 - v).collect())
    }
}

fn check_mask(x: &[usize], p: &[usize]) -> Result<()> {
    if x.len() != 3 || p != &x[1..] {
        return Err(Error::shape(
            "perturb_input",
            format!("mask {p:?} does not match image {x:?}"),
        ));
    }
    Ok(())
}

/// Records the perturbed image for constant `x`, `baseline` and mask var `p`.
pub fn perturb_on<T: Real>(
    tape: &mut Tape<T>,
    x: &Tensor,
    baseline: &Tensor,
    p: Var,
    a: f64,
    mode: PerturbMode,
) -> Result<Var> {
    check_mask(x.shape(), tape.shape(p))?;
    let ap = tape.scale(p, T::lit(a));
    let xv = tape.constant(&x.cast());
    match mode {
        PerturbMode::MaskBlend => {
            if baseline.shape() != x.shape() {
                return Err(Error::shape("perturb_input", "baseline shape differs from image"));
            }
            let delta: Vec<T> = baseline
                .data()
                .iter()
                .zip(x.data())
                .map(|(b, v)| T::lit(*b as f64) - T::lit(*v as f64))
                .collect();
            let delta = tape.constant(&Tensor::new(x.shape().to_vec(), delta)?);
            let moved = tape.mul(delta, ap)?;
            tape.add(xv, moved)
        }
        PerturbMode::Additive => {
            let c = x.shape()[0];
            let hw: Vec<usize> = x.shape()[1..].to_vec();
            let ones = tape.constant(&Tensor::full(vec![c, hw[0], hw[1]], T::one()));
            let spread = tape.mul(ones, ap)?;
            tape.add(xv, spread)
        }
    }
}

/// `x` perturbed by mask `p` at strength `a`.
pub fn perturb_input(
    x: &Tensor,
    p: &Tensor,
    a: f32,
    mode: PerturbMode,
    baseline: &Tensor,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!("a must lie in [0, 1], got {a}")));
    }
    let mut tape = Tape::<f32>::new();
    let pv = tape.constant(p);
    let out = perturb_on(&mut tape, x, baseline, pv, a as f64, mode)?;
    Ok(tape.tensor(out))
}

/// `max(0, max_{j != t} f_j - f_t)` on the softmax output of `net` for the
/// perturbed image; records and returns the hinge var.
#[allow(clippy::too_many_arguments)]
pub fn confidence_loss_on<T: Real>(
    tape: &mut Tape<T>,
    net: &Network,
    x: &Tensor,
    baseline: &Tensor,
    p: Var,
    target: usize,
    a: f64,
    mode: PerturbMode,
) -> Result<Var> {
    let xt = perturb_on(tape, x, baseline, p, a, mode)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = tape.reshape(xt, &shape)?;
    let logits = net.forward_on(tape, batch, NormMode::Frozen, None)?;
    let probs = tape.softmax(logits, 1)?;
    let h = tape.margin_hinge(probs, &[target])?;
    Ok(tape.sum(h))
}

pub fn confidence_loss(
    net: &Network,
    x: &Tensor,
    p: &Tensor,
    target: usize,
    a: f32,
    mode: PerturbMode,
    baseline: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let pv = tape.constant(p);
    let l = confidence_loss_on(&mut tape, net, x, baseline, pv, target, a as f64, mode)?;
    Ok(tape.scalar_value(l) as f64)
}

/// Hinge on an explicit probability vector.
pub fn hinge_on_probs(probs: &[f64], target: usize) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::new(vec![probs.len()], probs.to_vec())?);
    let h = tape.margin_hinge(x, &[target])?;
    Ok(tape.scalar_value(h))
}

pub fn mask_loss_on<T: Real>(tape: &mut Tape<T>, p: Var) -> Var {
    let s = tape.sum(p);
    tape.scale(s, -T::one())
}

/// `-|p|_1` for a nonnegative mask.
pub fn mask_loss(p: &Tensor) -> f64 {
    -p.sum_f64()
}

/// Radius `ceil(3 sigma)` of the sampled Gaussian support.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// `exp(-(w^2 + h^2) / 2 sigma^2) / (2 pi sigma^2)` on integer offsets of a
/// `(2r + 1)^2` grid, before renormalization.
pub fn gaussian_kernel_raw(sigma: f64) -> Result<Tensor<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let r = kernel_radius(sigma) as isize;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let data = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| norm * (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = (2 * r + 1) as usize;
    Tensor::new(vec![n, n], data)
}

/// The sampled Gaussian rescaled to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor<f64>> {
    let raw = gaussian_kernel_raw(sigma)?;
    let total = raw.sum_f64();
    Ok(raw.map(|v| v / total))
}

/// `sum_i -(1 / WH) sum_{w,h} ((p * C_i) conv G)(w, h)` with reflect padding.
pub fn consistency_loss_on<T: Real>(
    tape: &mut Tape<T>,
    p: Var,
    coalitions: &CoalitionSet,
    kernel: &Tensor<T>,
) -> Result<Var> {
    let (h, w) = (coalitions.height, coalitions.width);
    if tape.shape(p) != [h, w] {
        return Err(Error::shape(
            "consistency loss",
            format!("mask {:?} vs {h}x{w} coalitions", tape.shape(p)),
        ));
    }
    let l = coalitions.len();
    let stacked: Vec<T> = (0..l).flat_map(|i| coalitions.mask_values::<T>(i)).collect();
    let masks = tape.constant(&Tensor::new(vec![l, h, w], stacked)?);
    let restricted = tape.mul(masks, p)?;
    let smoothed = tape.blur(restricted, kernel)?;
    let total = tape.sum(smoothed);
    Ok(tape.scale(total, T::lit(-1.0 / (w * h) as f64)))
}

pub fn consistency_loss(p: &Tensor, coalitions: &CoalitionSet, sigma: f64) -> Result<f64> {
    let kernel = gaussian_kernel(sigma)?;
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(&p.cast());
    let l = consistency_loss_on(&mut tape, pv, coalitions, &kernel)?;
    Ok(tape.scalar_value(l))
}

/// Loss terms at one optimization step, before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub mask: f64,
    pub confidence: f64,
    pub consistency: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub target: usize,
    /// Final mask `[H, W]`.
    pub mask: Tensor,
    pub saliency: SaliencyMap,
    pub trace: Vec<LossRecord>,
}

/// Bound on the latent field; keeps `p` strictly inside `(0, 1)` in `f32`.
pub const LATENT_LIMIT: f32 = 10.0;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizes `p = logistic(z)` from `z = 0` with Adam on
/// `L = -|p|_1 + mu L_conf + v L_c`. Each step draws `a_samples` strengths
/// `a ~ U[0, 1]` from the seeded stream and averages the hinge over them.
pub fn optimize_mask(
    net: &Network,
    x: &Tensor,
    coalitions: &CoalitionSet,
    cfg: &PerturbationConfig,
) -> Result<Explanation> {
    cfg.validate()?;
    let [_, h, w] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape("optimize_mask", format!("image must be [C, H, W], got {s:?}"))),
    };
    if coalitions.width != w || coalitions.height != h {
        return Err(Error::shape("optimize_mask", "coalitions do not match the image grid"));
    }
    let target = predict(net, x)?.class;
    let baseline = cfg.baseline.image(x)?;
    let kernel = gaussian_kernel(cfg.sigma as f64)?.cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut z = vec![0.0f32; h * w];
    let mut m1 = vec![0.0f64; h * w];
    let mut m2 = vec![0.0f64; h * w];
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tape = Tape::<f32>::new();
        let zv = tape.leaf(&Tensor::new(vec![h, w], z.clone())?.with_requires_grad(true));
        let p = tape.sigmoid(zv);
        let lr_term = mask_loss_on(&mut tape, p);
        let mut hinges = Vec::with_capacity(cfg.a_samples);
        for _ in 0..cfg.a_samples {
            let a: f64 = rng.gen_range(0.0..=1.0);
            hinges.push(confidence_loss_on(&mut tape, net, x, &baseline, p, target, a, cfg.mode)?);
        }
        let mut conf = hinges[0];
        for &hv in &hinges[1..] {
            conf = tape.add(conf, hv)?;
        }
        let conf = tape.scale(conf, 1.0 / cfg.a_samples as f32);
        let cons = consistency_loss_on(&mut tape, p, coalitions, &kernel)?;
        let wc = tape.scale(conf, cfg.mu);
        let wv = tape.scale(cons, cfg.v);
        let partial = tape.add(lr_term, wc)?;
        let total = tape.add(partial, wv)?;

        let record = LossRecord {
            step,
            mask: tape.scalar_value(lr_term) as f64,
            confidence: tape.scalar_value(conf) as f64,
            consistency: tape.scalar_value(cons) as f64,
            total: tape.scalar_value(total) as f64,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(record);

        let g = tape.backward(total)?.wrt(zv);
        let t = (step + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..z.len() {
            let gi = g[i] as f64;
            if cfg.optimizer == Optimizer::Gd {
                z[i] = (z[i] - cfg.lr * g[i]).clamp(-LATENT_LIMIT, LATENT_LIMIT);
                continue;
            }
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * gi;
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let update = cfg.lr as f64 * (m1[i] / c1) / ((m2[i] / c2).sqrt() + ADAM_EPS);
            z[i] = (z[i] - update as f32).clamp(-LATENT_LIMIT, LATENT_LIMIT);
        }
    }

    let mask = Tensor::new(vec![h, w], z.iter().map(|&v| sigmoid(v)).collect())?;
    let saliency = SaliencyMap::from_mask(&mask)?;
    Ok(Explanation {
        target,
        mask,
        saliency,
        trace,
    })
}
