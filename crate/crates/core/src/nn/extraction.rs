use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Layer, LayerKind, LayerSpec, NormMode};
use super::network::Network;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Convolution, activation and normalization layers of a classifier with
/// same-padding, followed by a 1x1 convolution to `clusters` channels and a
/// batch norm. Normalization always uses the statistics of the current
/// sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionNet {
    pub input: [usize; 3],
    pub clusters: usize,
    pub layers: Vec<Layer>,
}

/// Keeps conv/relu/batchnorm layers of `net` (copying their parameters),
/// drops pooling, flatten and linear layers, and appends a freshly seeded
/// feature head.
pub fn reconfigure_for_extraction(net: &Network, clusters: usize, seed: u64) -> Result<ExtractionNet> {
    if clusters < 2 {
        return Err(Error::InvalidArgument(format!(
            "cluster count must be at least 2, got {clusters}"
        )));
    }
    let mut layers = Vec::new();
    let mut channels = net.arch.input[0];
    for layer in &net.layers {
        match layer.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                if kernel % 2 == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "{}: even kernels cannot keep the spatial extent",
                        layer.spec
                    )));
                }
                layers.push(Layer {
                    spec: LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride: 1,
                        padding: kernel / 2,
                    },
                    params: layer.params.clone(),
                });
                channels = out_channels;
            }
            LayerSpec::Relu | LayerSpec::BatchNorm { .. } => layers.push(layer.clone()),
            LayerSpec::MaxPool { .. } | LayerSpec::Flatten | LayerSpec::Linear { .. } => {}
        }
    }
    if !layers.iter().any(|l| l.spec.kind() == LayerKind::Conv2d) {
        return Err(Error::InvalidArgument(
            "network has no convolution layers to reuse".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layers.push(Layer::init(
        LayerSpec::Conv2d {
            in_channels: channels,
            out_channels: clusters,
            kernel: 1,
            stride: 1,
            padding: 0,
        },
        &mut rng,
    ));
    layers.push(Layer::init(LayerSpec::BatchNorm { channels: clusters }, &mut rng));
    Ok(ExtractionNet {
        input: net.arch.input,
        clusters,
        layers,
    })
}

impl ExtractionNet {
    /// Records the forward pass of a single `[C, H, W]` image; output is
    /// `[1, clusters, H, W]`.
    pub fn forward_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor,
        mut bind: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if image.shape()[0] != self.input[0] || image.shape().len() != 3 {
            return Err(Error::shape(
                "extraction input",
                format!("expected [{}, H, W], got {:?}", self.input[0], image.shape()),
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut h = tape.constant(&image.cast::<T>().reshape(shape)?);
        for layer in &self.layers {
            h = layer.apply(tape, h, NormMode::Batch, bind.as_deref_mut())?;
        }
        Ok(h)
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.spec.kind()).collect()
    }
}
