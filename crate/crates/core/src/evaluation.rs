//! Saliency scoring: confidence metrics under top-fraction retention,
//! insertion curves, and the occlusion baseline.

use std::fmt::Write as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{predict, Network};
use crate::perturbation::SaliencyMap;

/// Number of pixels kept at `fraction` of `n`. The product is nudged down by
/// 1e-9 so that e.g. `0.3 * 10` keeps 3 rather than 4.
pub fn keep_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Pixel indices ordered by descending saliency; ties by ascending index.
pub fn saliency_order(saliency: &SaliencyMap) -> Vec<usize> {
    let mut order: Vec<usize> = (0..saliency.values.len()).collect();
    order.sort_by(|&a, &b| {
        saliency.values[b]
            .partial_cmp(&saliency.values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Keep-flags for the `ceil(fraction * W * H)` most salient pixels.
pub fn top_pixels(saliency: &SaliencyMap, fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1]")));
    }
    let n = saliency.values.len();
    let mut keep = vec![false; n];
    for &i in saliency_order(saliency).iter().take(keep_count(fraction, n)) {
        keep[i] = true;
    }
    Ok(keep)
}

/// Keeps the most salient pixels of `x` (all channels) and fills the rest from
/// `baseline`.
pub fn retain_top_fraction(
    saliency: &SaliencyMap,
    x: &Tensor,
    fraction: f64,
    baseline: &Tensor,
) -> Result<Tensor> {
    let plane = saliency.width * saliency.height;
    if x.shape().len() != 3 || x.shape()[1] * x.shape()[2] != plane || baseline.shape() != x.shape() {
        return Err(Error::shape(
            "retain_top_fraction",
            format!("image {:?} vs {}x{} saliency", x.shape(), saliency.width, saliency.height),
        ));
    }
    let keep = top_pixels(saliency, fraction)?;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !keep[i % plane] {
            *v = baseline.data()[i];
        }
    }
    Ok(out)
}

/// Mean relative confidence drop over `(f(x), f(masked))` pairs. With `clamp`,
/// each term is floored at zero.
pub fn average_drop(pairs: &[(f64, f64)], clamp: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("average drop of zero samples".into()));
    }
    let mut total = 0.0;
    for (i, &(before, after)) in pairs.iter().enumerate() {
        if before == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: zero original confidence"
            )));
        }
        let d = (before - after) / before;
        total += if clamp { d.max(0.0) } else { d };
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of samples whose confidence strictly increases.
pub fn percent_increase(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("percent increase of zero samples".into()));
    }
    let n = pairs.iter().filter(|(before, after)| before < after).count();
    Ok(n as f64 / pairs.len() as f64)
}

/// Fraction of `(target, masked prediction)` rows that agree.
pub fn top1_accuracy(rows: &[(usize, usize)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("top-1 accuracy of zero samples".into()));
    }
    let n = rows.iter().filter(|(t, m)| t == m).count();
    Ok(n as f64 / rows.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InsertionPoint {
    pub fraction: f64,
    /// Softmax confidence of the explained class.
    pub confidence: f64,
    /// Whether the explained class is still the argmax.
    pub hit: bool,
}

pub fn default_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Confidence of `target` as the most salient pixels are restored.
pub fn insertion_curve(
    net: &Network,
    x: &Tensor,
    saliency: &SaliencyMap,
    target: usize,
    fractions: &[f64],
    baseline: &Tensor,
) -> Result<Vec<InsertionPoint>> {
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("fractions must be ascending".into()));
    }
    fractions
        .iter()
        .map(|&fraction| {
            let kept = retain_top_fraction(saliency, x, fraction, baseline)?;
            let pred = predict(net, &kept)?;
            Ok(InsertionPoint {
                fraction,
                confidence: pred.confidence(target) as f64,
                hit: pred.class == target,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        OcclusionConfig { patch: 8, stride: 4 }
    }
}

fn positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..=extent - patch).step_by(stride).collect();
    if *p.last().expect("patch <= extent") != extent - patch {
        p.push(extent - patch);
    }
    p
}

/// Slides a baseline-filled patch over `x`, scores each position by the drop
/// in the predicted class's confidence, averages overlapping scores per pixel
/// and min-max normalizes. A constant map normalizes to all zeros.
pub fn occlusion_baseline(
    net: &Network,
    x: &Tensor,
    cfg: &OcclusionConfig,
    baseline: &Tensor,
) -> Result<SaliencyMap> {
    let [c, h, w] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape("occlusion", format!("image must be [C, H, W], got {s:?}"))),
    };
    if cfg.stride == 0 || cfg.patch == 0 || cfg.patch > h || cfg.patch > w {
        return Err(Error::InvalidArgument(format!(
            "patch {} / stride {} invalid for {h}x{w}",
            cfg.patch, cfg.stride
        )));
    }
    let base = predict(net, x)?;
    let t = base.class;
    let f0 = base.confidence(t) as f64;
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for &oy in &positions(h, cfg.patch, cfg.stride) {
        for &ox in &positions(w, cfg.patch, cfg.stride) {
            let mut occluded = x.clone();
            for ch in 0..c {
                for y in oy..oy + cfg.patch {
                    for xx in ox..ox + cfg.patch {
                        let i = (ch * h + y) * w + xx;
                        occluded.data_mut()[i] = baseline.data()[i];
                    }
                }
            }
            let drop = f0 - predict(net, &occluded)?.confidence(t) as f64;
            for y in oy..oy + cfg.patch {
                for xx in ox..ox + cfg.patch {
                    sum[y * w + xx] += drop;
                    count[y * w + xx] += 1;
                }
            }
        }
    }
    let avg: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    SaliencyMap::new(w, h, min_max(&avg))
}

fn min_max(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub index: usize,
    pub label: usize,
    pub target: usize,
    /// Confidence of `target` on the full image.
    pub before: f64,
    /// Confidence of `target` on the retained image.
    pub after: f64,
    pub masked_class: usize,
    /// `None` when the sample succeeded.
    pub failure: Option<String>,
}

impl SampleRow {
    pub fn failed(index: usize, label: usize, reason: String) -> Self {
        SampleRow {
            index,
            label,
            target: 0,
            before: f64::NAN,
            after: f64::NAN,
            masked_class: 0,
            failure: Some(reason),
        }
    }
}

/// Scores one saliency map at the retention fraction.
pub fn score_sample(
    net: &Network,
    index: usize,
    label: usize,
    x: &Tensor,
    saliency: &SaliencyMap,
    retention: f64,
    baseline: &Tensor,
) -> Result<SampleRow> {
    let full = predict(net, x)?;
    let t = full.class;
    let kept = retain_top_fraction(saliency, x, retention, baseline)?;
    let masked = predict(net, &kept)?;
    Ok(SampleRow {
        index,
        label,
        target: t,
        before: full.confidence(t) as f64,
        after: masked.confidence(t) as f64,
        masked_class: masked.class,
        failure: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InsertionSummary {
    pub fraction: f64,
    pub mean_confidence: f64,
    pub top1: f64,
}

/// Aggregated metrics over the successful samples of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub retention: f64,
    pub n: usize,
    pub ad: f64,
    pub ad_clamped: f64,
    pub pi: f64,
    pub t1: f64,
    /// Top-1 accuracy of the unmasked images against their labels.
    pub full_accuracy: f64,
    pub rows: Vec<SampleRow>,
    pub insertion: Vec<InsertionSummary>,
}

impl EvalReport {
    /// `curves[i]` belongs to the i-th successful row, in row order.
    pub fn build(
        method: &str,
        seed: u64,
        retention: f64,
        rows: Vec<SampleRow>,
        curves: &[Vec<InsertionPoint>],
    ) -> Result<Self> {
        let ok: Vec<&SampleRow> = rows.iter().filter(|r| r.failure.is_none()).collect();
        if ok.is_empty() {
            return Err(Error::InvalidArgument("no sample succeeded".into()));
        }
        let pairs: Vec<(f64, f64)> = ok.iter().map(|r| (r.before, r.after)).collect();
        let classes: Vec<(usize, usize)> = ok.iter().map(|r| (r.target, r.masked_class)).collect();
        let labels: Vec<(usize, usize)> = ok.iter().map(|r| (r.label, r.target)).collect();
        let mut insertion = Vec::new();
        if let Some(first) = curves.first() {
            for (k, p) in first.iter().enumerate() {
                let n = curves.len() as f64;
                let conf: f64 = curves.iter().map(|c| c[k].confidence).sum::<f64>() / n;
                let hits = curves.iter().filter(|c| c[k].hit).count() as f64 / n;
                insertion.push(InsertionSummary {
                    fraction: p.fraction,
                    mean_confidence: conf,
                    top1: hits,
                });
            }
        }
        Ok(EvalReport {
            method: method.to_string(),
            seed,
            retention,
            n: ok.len(),
            ad: average_drop(&pairs, false)?,
            ad_clamped: average_drop(&pairs, true)?,
            pi: percent_increase(&pairs)?,
            t1: top1_accuracy(&classes)?,
            full_accuracy: top1_accuracy(&labels)?,
            rows,
            insertion,
        })
    }

    /// Mean unmasked confidence of the explained class over successful rows.
    pub fn mean_confidence_before(&self) -> f64 {
        let ok: Vec<f64> = self.rows.iter().filter(|r| r.failure.is_none()).map(|r| r.before).collect();
        ok.iter().sum::<f64>() / ok.len() as f64
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failure.is_some()).count()
    }

    pub fn file_name(&self) -> String {
        format!(
            "report_{}_seed{}_ret{:.2}.txt",
            self.method, self.seed, self.retention
        )
    }

    /// `key: value` header, then a per-sample CSV block and an insertion CSV
    /// block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "retention: {}", self.retention);
        let _ = writeln!(s, "n: {}", self.n);
        let _ = writeln!(s, "failed: {}", self.failures());
        let _ = writeln!(s, "ad: {:.17e}", self.ad);
        let _ = writeln!(s, "ad_clamped: {:.17e}", self.ad_clamped);
        let _ = writeln!(s, "pi: {:.17e}", self.pi);
        let _ = writeln!(s, "t1: {:.17e}", self.t1);
        let _ = writeln!(s, "full_accuracy: {:.17e}", self.full_accuracy);
        let _ = writeln!(s);
        let _ = writeln!(s, "[samples]");
        let _ = writeln!(s, "index,label,target,before,after,masked_class,status");
        for r in &self.rows {
            let status = r.failure.as_deref().unwrap_or("ok").replace([',', '\n'], ";");
            let _ = writeln!(
                s,
                "{},{},{},{:.9e},{:.9e},{},{}",
                r.index, r.label, r.target, r.before, r.after, r.masked_class, status
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "[insertion]");
        let _ = writeln!(s, "fraction,mean_confidence,top1");
        for p in &self.insertion {
            let _ = writeln!(s, "{},{:.9e},{:.9e}", p.fraction, p.mean_confidence, p.top1);
        }
        s
    }
}
