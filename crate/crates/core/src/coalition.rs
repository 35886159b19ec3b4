//! Unsupervised extraction of correlated feature coalitions.
//!
//! The extraction network maps one image to `l` feature channels per pixel.
//! Each pixel is labeled with its strongest channel, and the network is then
//! trained to agree with its own labels (cross-entropy against the argmax)
//! while keeping neighbouring features similar (L1 of forward differences).
//! Channels that no pixel selects die out, so the label count shrinks over
//! the run; extraction stops at `k` labels or when the budget is spent.

use std::collections::BTreeSet;

use crate::autodiff::{argmax, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::ExtractionNet;

/// Per-pixel cluster labels, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub clusters: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, clusters: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(
                "label map",
                format!("{} labels for a {width}x{height} grid", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= clusters) {
            return Err(Error::shape("label map", format!("label {bad} >= {clusters}")));
        }
        Ok(LabelMap {
            width,
            height,
            clusters,
            labels,
        })
    }

    pub fn distinct(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }
}

/// Disjoint binary masks covering the grid, one per realized label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoalitionSet {
    pub width: usize,
    pub height: usize,
    /// Label id of each mask, ascending.
    pub ids: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub source: LabelMap,
}

impl CoalitionSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// A single coalition covering the whole grid.
    pub fn whole(width: usize, height: usize) -> Self {
        to_coalition_masks(&LabelMap {
            width,
            height,
            clusters: 1,
            labels: vec![0; width * height],
        })
    }

    pub fn mask_values<T: Real>(&self, i: usize) -> Vec<T> {
        self.masks[i]
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

/// Argmax label per row of a `[q, l]` feature matrix (lowest index on ties).
pub fn assign_labels(r: &Tensor, width: usize, height: usize) -> Result<LabelMap> {
    let [q, l] = match r.shape() {
        [q, l] => [*q, *l],
        s => return Err(Error::shape("assign_labels", format!("expected [q, l], got {s:?}"))),
    };
    if q != width * height || l < 2 {
        return Err(Error::shape(
            "assign_labels",
            format!("[{q}, {l}] features for a {width}x{height} grid"),
        ));
    }
    let labels = r.data().chunks(l).map(argmax).collect();
    LabelMap::new(width, height, l, labels)
}

/// Argmax over the channel axis of channel-first `[.., l, H, W]` values.
pub(crate) fn channel_argmax<T: Real>(values: &[T], l: usize, height: usize, width: usize) -> LabelMap {
    let q = height * width;
    let labels = (0..q)
        .map(|n| {
            let mut best = 0;
            for c in 1..l {
                if values[c * q + n] > values[best * q + n] {
                    best = c;
                }
            }
            best
        })
        .collect();
    LabelMap {
        width,
        height,
        clusters: l,
        labels,
    }
}

/// `-sum_n ln softmax(r_n)[c_n]` on channel-first `[1, l, H, W]` features.
/// Labels are constants.
pub fn similarity_loss_on<T: Real>(tape: &mut Tape<T>, features: Var, labels: &LabelMap) -> Result<Var> {
    let q = labels.width * labels.height;
    let shape = tape.shape(features);
    if shape.len() != 4 || shape[0] != 1 || shape[2] * shape[3] != q {
        return Err(Error::shape(
            "similarity loss",
            format!("features {shape:?} vs {}x{} labels", labels.width, labels.height),
        ));
    }
    let logp = tape.log_softmax(features, 1)?;
    let picks = labels.labels.iter().enumerate().map(|(n, &c)| c * q + n).collect();
    let picked = tape.gather(logp, picks)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -T::one()))
}

/// Sum of absolute forward differences along both trailing spatial axes.
/// No wraparound: the last row and column contribute no difference.
pub fn continuity_loss_on<T: Real>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    let rank = tape.shape(features).len();
    if rank < 2 {
        return Err(Error::shape("continuity loss", "needs [.., H, W]"));
    }
    let (h, w) = (tape.shape(features)[rank - 2], tape.shape(features)[rank - 1]);
    let mut terms = Vec::new();
    if w > 1 {
        let dx = tape.diff(features, rank - 1)?;
        let a = tape.abs(dx);
        terms.push(tape.sum(a));
    }
    if h > 1 {
        let dy = tape.diff(features, rank - 2)?;
        let a = tape.abs(dy);
        terms.push(tape.sum(a));
    }
    match terms.as_slice() {
        [] => {
            let z = tape.constant(&Tensor::scalar(T::zero()));
            Ok(z)
        }
        [t] => Ok(*t),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Transposes `[q, l]` into channel-first `[1, l, height, width]`.
fn channel_first(r: &Tensor, width: usize, height: usize) -> Result<Tensor> {
    let [q, l] = match r.shape() {
        [q, l] => [*q, *l],
        s => return Err(Error::shape("features", format!("expected [q, l], got {s:?}"))),
    };
    if q != width * height {
        return Err(Error::shape("features", format!("{q} rows for {width}x{height}")));
    }
    let d = r.data();
    let data = (0..l).flat_map(|c| (0..q).map(move |n| d[n * l + c])).collect();
    Tensor::new(vec![1, l, height, width], data)
}

/// Cross-entropy of `[q, l]` features against their labels.
pub fn feature_similarity_loss(r: &Tensor, labels: &LabelMap) -> Result<f64> {
    let cf = channel_first(r, labels.width, labels.height)?;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&cf.cast());
    let loss = similarity_loss_on(&mut tape, x, labels)?;
    Ok(tape.scalar_value(loss))
}

/// Continuity loss of a `[H, W, l]` feature field.
pub fn continuity_loss(r: &Tensor) -> Result<f64> {
    let [h, w, l] = match r.shape() {
        [h, w, l] => [*h, *w, *l],
        s => return Err(Error::shape("continuity loss", format!("expected [H, W, l], got {s:?}"))),
    };
    let flat = r.clone().reshape(vec![h * w, l])?;
    let cf = channel_first(&flat, w, h)?;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&cf.cast());
    let loss = continuity_loss_on(&mut tape, x)?;
    Ok(tape.scalar_value(loss))
}

/// One mask per distinct label, in ascending label order.
pub fn to_coalition_masks(labels: &LabelMap) -> CoalitionSet {
    let ids: Vec<usize> = labels.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let masks = ids
        .iter()
        .map(|&id| labels.labels.iter().map(|&l| l == id).collect())
        .collect();
    CoalitionSet {
        width: labels.width,
        height: labels.height,
        ids,
        masks,
        source: labels.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractionConfig {
    /// Continuity weight.
    pub lambda: f32,
    /// Initial cluster count `l`.
    pub clusters: usize,
    /// Stop once at most this many labels remain.
    pub min_clusters: usize,
    pub max_iters: usize,
    pub lr: f32,
    /// Seeds the feature head of the extraction network.
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            lambda: 1.0,
            clusters: 20,
            min_clusters: 4,
            max_iters: 200,
            lr: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionStep {
    pub iteration: usize,
    pub labels: usize,
    pub similarity: f64,
    pub continuity: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub coalitions: CoalitionSet,
    /// Gradient steps taken.
    pub iterations: usize,
    pub trace: Vec<ExtractionStep>,
}

/// Optimizes `enet` on a single `[C, H, W]` image and returns the coalitions
/// of its final labeling.
pub fn extract_coalitions(image: &Tensor, mut enet: ExtractionNet, cfg: &ExtractionConfig) -> Result<Extraction> {
    if cfg.lambda < 0.0 || !cfg.lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    if cfg.min_clusters < 2 || cfg.min_clusters > enet.clusters {
        return Err(Error::InvalidArgument(format!(
            "min clusters {} outside [2, {}]",
            cfg.min_clusters, enet.clusters
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let l = enet.clusters;
    let mut trace = Vec::new();
    let mut iteration = 0;
    let labels = loop {
        let mut tape = Tape::<f32>::new();
        let mut vars = Vec::new();
        let r = enet.forward_on(&mut tape, image, Some(&mut vars))?;
        let labels = channel_argmax(tape.value(r), l, h, w);
        let distinct = labels.distinct();
        if distinct <= cfg.min_clusters || iteration == cfg.max_iters {
            trace.push(ExtractionStep {
                iteration,
                labels: distinct,
                similarity: f64::NAN,
                continuity: f64::NAN,
                total: f64::NAN,
            });
            break labels;
        }
        let sim = similarity_loss_on(&mut tape, r, &labels)?;
        let cont = continuity_loss_on(&mut tape, r)?;
        let weighted = tape.scale(cont, cfg.lambda);
        let total = tape.add(sim, weighted)?;
        let step = ExtractionStep {
            iteration,
            labels: distinct,
            similarity: tape.scalar_value(sim) as f64,
            continuity: tape.scalar_value(cont) as f64,
            total: tape.scalar_value(total) as f64,
        };
        if !step.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: iteration });
        }
        trace.push(step);
        let grads = tape.backward(total)?;
        // Step on the per-pixel mean of L_t so lr does not scale with image area.
        let step_size = cfg.lr / (h * w) as f32;
        let mut it = vars.into_iter();
        for layer in enet.layers.iter_mut() {
            let k = layer.spec.trainable_count();
            for p in layer.params.iter_mut().take(k) {
                let g = grads.wrt(it.next().expect("one var per trainable tensor"));
                for (w, gi) in p.data_mut().iter_mut().zip(&g) {
                    *w -= step_size * gi;
                }
            }
        }
        iteration += 1;
    };
    let distinct = labels.distinct();
    if distinct < 2 {
        return Err(Error::DegenerateClusters {
            iteration,
            labels: distinct,
        });
    }
    Ok(Extraction {
        coalitions: to_coalition_masks(&labels),
        iterations: iteration,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn one_hot_row_picks_its_index() {
        let mut r = Tensor::zeros(vec![1, 5]);
        r.data_mut()[3] = 1.0;
        assert_eq!(assign_labels(&r, 1, 1).unwrap().labels, vec![3]);
        let tie = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(assign_labels(&tie, 1, 1).unwrap().labels, vec![0]);
    }

    #[test]
    fn labels_match_scan_oracle() {
        let r = random(&[16, 5], 1);
        let labels = assign_labels(&r, 4, 4).unwrap();
        for (n, row) in r.data().chunks(5).enumerate() {
            let mut best = 0;
            for i in 0..5 {
                if row[i] > row[best] {
                    best = i;
                }
            }
            assert_eq!(labels.labels[n], best);
        }
    }

    #[test]
    fn label_shape_errors() {
        assert!(assign_labels(&Tensor::zeros(vec![15, 5]), 4, 4).is_err());
        assert!(assign_labels(&Tensor::zeros(vec![16, 1]), 4, 4).is_err());
        assert!(LabelMap::new(2, 1, 3, vec![0, 3]).is_err());
        assert!(LabelMap::new(2, 1, 3, vec![0]).is_err());
    }

    #[test]
    fn similarity_limits() {
        let confident = Tensor::new(vec![1, 2], vec![60.0, 0.0]).unwrap();
        let labels = assign_labels(&confident, 1, 1).unwrap();
        assert!(feature_similarity_loss(&confident, &labels).unwrap() < 1e-20);

        let flat = Tensor::zeros(vec![3, 7]);
        let labels = assign_labels(&flat, 3, 1).unwrap();
        let per_pixel = feature_similarity_loss(&flat, &labels).unwrap() / 3.0;
        assert!((per_pixel - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_direct_cross_entropy() {
        let r = random(&[8, 4], 2);
        let labels = assign_labels(&r, 4, 2).unwrap();
        let mut want = 0.0f64;
        for (n, row) in r.data().chunks(4).enumerate() {
            let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            want -= ((row[labels.labels[n]] as f64).exp() / denom).ln();
        }
        let got = feature_similarity_loss(&r, &labels).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn continuity_examples() {
        assert_eq!(continuity_loss(&Tensor::full(vec![3, 4, 2], 0.7)).unwrap(), 0.0);
        let r = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(continuity_loss(&r).unwrap(), 2.0);
    }

    #[test]
    fn continuity_matches_double_loop() {
        let r = random(&[4, 4, 3], 3);
        let at = |y: usize, x: usize, c: usize| r.data()[(y * 4 + x) * 3 + c] as f64;
        let mut want = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    if x + 1 < 4 {
                        want += (at(y, x + 1, c) - at(y, x, c)).abs();
                    }
                    if y + 1 < 4 {
                        want += (at(y + 1, x, c) - at(y, x, c)).abs();
                    }
                }
            }
        }
        assert!((continuity_loss(&r).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn masks_from_labels() {
        let rows = to_coalition_masks(&LabelMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap());
        assert_eq!(rows.masks, vec![vec![true, true, false, false], vec![false, false, true, true]]);
        let one = to_coalition_masks(&LabelMap::new(2, 2, 4, vec![2; 4]).unwrap());
        assert_eq!(one.masks, vec![vec![true; 4]]);
        assert_eq!(one.ids, vec![2]);
    }

    #[test]
    fn empty_labels_are_dropped() {
        let set = to_coalition_masks(&LabelMap::new(3, 1, 20, vec![17, 4, 17]).unwrap());
        assert_eq!(set.ids, vec![4, 17]);
        assert!(set.masks.iter().all(|m| m.iter().any(|&b| b)));
    }

    fn partition_holds(set: &CoalitionSet) -> bool {
        let q = set.width * set.height;
        (0..q).all(|n| set.masks.iter().filter(|m| m[n]).count() == 1)
    }

    proptest! {
        #[test]
        fn masks_partition_the_grid(labels in prop::collection::vec(0usize..5, 64)) {
            let set = to_coalition_masks(&LabelMap::new(8, 8, 5, labels).unwrap());
            let total: usize = set.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
            prop_assert_eq!(total, 64);
            prop_assert!(partition_holds(&set));
        }

        #[test]
        fn labels_ignore_positive_scale(
            data in prop::collection::vec(-3.0f32..3.0, 12 * 4),
            alpha in 1e-2f32..1e2,
        ) {
            let r = Tensor::new(vec![12, 4], data).unwrap();
            let scaled = Tensor::new(vec![12, 4], r.data().iter().map(|v| v * alpha).collect()).unwrap();
            prop_assert_eq!(assign_labels(&r, 4, 3).unwrap(), assign_labels(&scaled, 4, 3).unwrap());
        }
    }

    mod runs {
        use super::*;
        use crate::harness::four_rectangles;
        use crate::nn::{build_classifier, reconfigure_for_extraction, Architecture};

        fn enet(seed: u64) -> ExtractionNet {
            let net = build_classifier(&Architecture::small_cnn(16, 16, 4), 0).unwrap();
            reconfigure_for_extraction(&net, 8, seed).unwrap()
        }

        #[test]
        fn zero_lambda_drops_continuity_from_total() {
            let (img, _) = four_rectangles(16, 16, 0).unwrap();
            let cfg = ExtractionConfig {
                lambda: 0.0,
                clusters: 8,
                max_iters: 5,
                min_clusters: 2,
                ..Default::default()
            };
            let ex = extract_coalitions(&img, enet(0), &cfg).unwrap();
            for s in ex.trace.iter().filter(|s| s.total.is_finite()) {
                assert_eq!(s.total, s.similarity);
                assert!(s.continuity > 0.0);
            }
        }

        #[test]
        fn uniform_image_terminates_within_budget() {
            let img = Tensor::full(vec![3, 16, 16], 0.4);
            let cfg = ExtractionConfig {
                clusters: 8,
                max_iters: 60,
                ..Default::default()
            };
            match extract_coalitions(&img, enet(1), &cfg) {
                Ok(ex) => {
                    assert!(ex.iterations <= 60);
                    assert!(partition_holds(&ex.coalitions));
                }
                Err(e) => assert!(matches!(e, Error::DegenerateClusters { .. })),
            }
        }

        #[test]
        fn extraction_output_is_a_partition_within_bounds() {
            let (img, _) = four_rectangles(16, 16, 3).unwrap();
            let cfg = ExtractionConfig {
                clusters: 8,
                ..Default::default()
            };
            let ex = extract_coalitions(&img, enet(3), &cfg).unwrap();
            assert!(partition_holds(&ex.coalitions));
            assert!(ex.coalitions.len() <= 8);
            assert!(ex.coalitions.len() >= 2);
            assert_eq!(ex.trace.last().unwrap().labels, ex.coalitions.len());
        }

        #[test]
        fn extraction_is_deterministic() {
            let (img, _) = four_rectangles(16, 16, 4).unwrap();
            let cfg = ExtractionConfig {
                clusters: 8,
                max_iters: 20,
                ..Default::default()
            };
            let a = extract_coalitions(&img, enet(4), &cfg).unwrap();
            let b = extract_coalitions(&img, enet(4), &cfg).unwrap();
            assert_eq!(a.coalitions, b.coalitions);
            assert_eq!(a.trace.len(), b.trace.len());
        }

        #[test]
        fn invalid_settings_are_rejected() {
            let img = Tensor::full(vec![3, 16, 16], 0.4);
            let bad_k = ExtractionConfig {
                clusters: 8,
                min_clusters: 9,
                ..Default::default()
            };
            assert!(extract_coalitions(&img, enet(0), &bad_k).is_err());
            let bad_lambda = ExtractionConfig {
                clusters: 8,
                lambda: -1.0,
                ..Default::default()
            };
            assert!(extract_coalitions(&img, enet(0), &bad_lambda).is_err());
        }
    }
}
