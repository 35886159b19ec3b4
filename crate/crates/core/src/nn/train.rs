use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{LayerSpec, NormMode};
use super::network::Network;
use crate::autodiff::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A labeled `[C, H, W]` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Held-out accuracy of the initial parameters (after statistics calibration).
    pub untrained_accuracy: f64,
    pub held_out_accuracy: f64,
    pub train_accuracy: f64,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD with momentum on mean cross-entropy. Batch norm trains on
/// batch statistics; population statistics are re-estimated from the full
/// training set afterwards. Deterministic given `cfg.seed`.
pub fn train_classifier(
    mut net: Network,
    train: &[Sample],
    held_out: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let classes = net.arch.classes;
    if let Some(s) = train.iter().chain(held_out).find(|s| s.label >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside [0, {classes})",
            s.label
        )));
    }
    let eval_set = if held_out.is_empty() { train } else { held_out };

    calibrate_batch_norm(&mut net, train)?;
    let untrained_accuracy = accuracy(&net, eval_set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<Vec<f32>>> = net
        .layers
        .iter()
        .map(|l| {
            l.params
                .iter()
                .take(l.spec.trainable_count())
                .map(|p| vec![0.0; p.len()])
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(&stack(batch.iter().map(|s| &s.image))?);
            let mut vars = Vec::new();
            let logits = net.forward_on(&mut tape, x, NormMode::Batch, Some(&mut vars))?;
            let logp = tape.log_softmax(logits, 1)?;
            let picks = batch
                .iter()
                .enumerate()
                .map(|(b, s)| b * classes + s.label)
                .collect();
            let picked = tape.gather(logp, picks)?;
            let sum = tape.sum(picked);
            let loss = tape.scale(sum, -1.0 / batch.len() as f32);
            let value = tape.scalar_value(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: value,
                });
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let mut it = vars.iter();
            for (layer, vel) in net.layers.iter_mut().zip(velocity.iter_mut()) {
                let k = layer.spec.trainable_count();
                for (p, v) in layer.params.iter_mut().take(k).zip(vel.iter_mut()) {
                    let var: Var = *it.next().expect("one var per trainable tensor");
                    let g = grads.wrt(var);
                    for ((w, m), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                        *m = cfg.momentum * *m + gi;
                        *w -= cfg.lr * *m;
                    }
                }
            }
        }
        epoch_losses.push(total / train.len() as f64);
    }

    calibrate_batch_norm(&mut net, train)?;
    let report = TrainReport {
        untrained_accuracy,
        held_out_accuracy: accuracy(&net, eval_set)?,
        train_accuracy: accuracy(&net, train)?,
        epoch_losses,
    };
    Ok((net, report))
}

/// Stacks `[C, H, W]` images into `[N, C, H, W]`.
pub fn stack<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::shape("stack", format!("{s:?} vs {:?}", img.shape())));
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::shape("stack", "no images"))?);
    Tensor::new(full, data)
}

const CHUNK: usize = 32;

/// Sets every batch-norm layer's stored statistics to the exact population
/// mean and variance of its input over `data`, front to back.
pub fn calibrate_batch_norm(net: &mut Network, data: &[Sample]) -> Result<()> {
    for idx in 0..net.layers.len() {
        let LayerSpec::BatchNorm { channels } = net.layers[idx].spec else {
            continue;
        };
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for chunk in data.chunks(CHUNK) {
            let mut tape = Tape::<f32>::new();
            let mut h = tape.constant(&stack(chunk.iter().map(|s| &s.image))?);
            for layer in &net.layers[..idx] {
                h = layer.apply(&mut tape, h, NormMode::Frozen, None)?;
            }
            let shape = tape.shape(h);
            let sp: usize = shape[2..].iter().product();
            let v = tape.value(h);
            for b in 0..shape[0] {
                for c in 0..channels {
                    for &x in &v[(b * channels + c) * sp..(b * channels + c + 1) * sp] {
                        sum[c] += x as f64;
                        sq[c] += (x as f64) * (x as f64);
                    }
                }
            }
            count += shape[0] * sp;
        }
        let layer = &mut net.layers[idx];
        for c in 0..channels {
            let mean = sum[c] / count as f64;
            let var = (sq[c] / count as f64 - mean * mean).max(0.0);
            layer.params[2].data_mut()[c] = mean as f32;
            layer.params[3].data_mut()[c] = var as f32;
        }
    }
    Ok(())
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(net: &Network, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let mut hits = 0;
    for chunk in data.chunks(CHUNK) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&stack(chunk.iter().map(|s| &s.image))?);
        let y = net.forward_on(&mut tape, x, NormMode::Frozen, None)?;
        let k = net.arch.classes;
        for (row, s) in tape.value(y).chunks(k).zip(chunk) {
            if autodiff::argmax(row) == s.label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
