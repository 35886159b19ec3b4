use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Layer, LayerKind, LayerSpec, NormMode};
use crate::autodiff::{self, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Input geometry, class count and layer list of a classifier.
///
/// Text form: `input=3x32x32;classes=4;conv2d(3,8,3,1,1);relu;...`
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Three conv-relu-batchnorm-maxpool blocks and a linear head.
    pub fn small_cnn(height: usize, width: usize, classes: usize) -> Self {
        let widths = [8, 16, 16];
        let mut layers = Vec::new();
        let mut c_in = 3;
        for &c in &widths {
            layers.extend([
                LayerSpec::Conv2d {
                    in_channels: c_in,
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::BatchNorm { channels: c },
                LayerSpec::MaxPool { window: 2 },
            ]);
            c_in = c;
        }
        let features = c_in * (height / 8) * (width / 8);
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            in_features: features,
            out_features: classes,
        });
        Architecture {
            input: [3, height, width],
            classes,
            layers,
        }
    }

    /// Walks the shape chain; the error names the first layer that breaks it.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.classes < 2 {
            return Err(Error::Architecture {
                index: 0,
                detail: format!("need at least 2 classes, got {}", self.classes),
            });
        }
        let mut shape = self.input.to_vec();
        let mut shapes = vec![shape.clone()];
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|detail| Error::Architecture {
                    index,
                    detail: format!("{layer}: {detail}"),
                })?;
            shapes.push(shape.clone());
        }
        if shape != [self.classes] {
            return Err(Error::Architecture {
                index: self.layers.len().saturating_sub(1),
                detail: format!("network ends in {shape:?}, expected [{}] logits", self.classes),
            });
        }
        Ok(shapes)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        write!(f, "input={c}x{h}x{w};classes={}", self.classes)?;
        for l in &self.layers {
            write!(f, ";{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |d: String| Error::Config(format!("architecture: {d}"));
        let mut parts = s.split(';').map(str::trim).filter(|p| !p.is_empty());
        let input = parts
            .next()
            .and_then(|p| p.strip_prefix("input="))
            .ok_or_else(|| bad("missing input=CxHxW".into()))?;
        let dims: Vec<usize> = input
            .split('x')
            .map(|d| d.parse().map_err(|e| bad(format!("{input:?}: {e}"))))
            .collect::<Result<_>>()?;
        let input: [usize; 3] = dims
            .try_into()
            .map_err(|_| bad(format!("input needs three dimensions: {input:?}")))?;
        let classes = parts
            .next()
            .and_then(|p| p.strip_prefix("classes="))
            .ok_or_else(|| bad("missing classes=K".into()))?
            .parse()
            .map_err(|e| bad(format!("classes: {e}")))?;
        let layers = parts
            .map(|p| p.parse::<LayerSpec>().map_err(bad))
            .collect::<Result<_>>()?;
        Ok(Architecture {
            input,
            classes,
            layers,
        })
    }
}

/// A classifier: layers with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

/// Class probabilities and the predicted class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub class: usize,
}

impl Prediction {
    pub fn confidence(&self, class: usize) -> f32 {
        self.probs[class]
    }
}

/// Builds and seeds a classifier. Equal seeds give bit-identical parameters.
pub fn build_classifier(arch: &Architecture, seed: u64) -> Result<Network> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch.layers.iter().map(|&s| Layer::init(s, &mut rng)).collect();
    Ok(Network {
        arch: arch.clone(),
        layers,
    })
}

impl Network {
    /// Records the forward pass of a `[N, C, H, W]` batch.
    pub fn forward_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: NormMode,
        mut bind: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return Err(Error::shape(
                "network input",
                format!("expected [N, {:?}], got {shape:?}", self.arch.input),
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.apply(tape, h, mode, bind.as_deref_mut())?;
        }
        Ok(h)
    }

    /// Logits of a single `[C, H, W]` image in inference mode.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f32>> {
        let mut tape = Tape::<f32>::new();
        let x = self.image_leaf(&mut tape, image, false)?;
        let y = self.forward_on(&mut tape, x, NormMode::Frozen, None)?;
        Ok(tape.value(y).to_vec())
    }

    pub(crate) fn image_leaf<T: Real>(&self, tape: &mut Tape<T>, image: &Tensor, grad: bool) -> Result<Var> {
        if image.shape() != self.arch.input {
            return Err(Error::shape(
                "predict",
                format!("image shape {:?} != network input {:?}", image.shape(), self.arch.input),
            ));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let t = image.cast::<T>().reshape(shape)?.with_requires_grad(grad);
        Ok(tape.leaf(&t))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::len).sum()
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.spec.kind()).collect()
    }
}

/// Softmax probabilities and argmax class (lowest index on ties).
pub fn predict(net: &Network, image: &Tensor) -> Result<Prediction> {
    let logits = net.logits(image)?;
    Ok(prediction_from_logits(&logits))
}

pub fn prediction_from_logits(logits: &[f32]) -> Prediction {
    let t = Tensor::new(vec![logits.len()], logits.to_vec()).expect("non-empty logits");
    let probs = autodiff::softmax(&t, 0).expect("axis 0 exists").into_data();
    Prediction {
        class: autodiff::argmax(logits),
        probs,
    }
}
