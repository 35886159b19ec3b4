use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Conv2dGeometry, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Layer kinds understood by the engine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    BatchNorm {
        channels: usize,
    },
    MaxPool {
        window: usize,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Relu,
    BatchNorm,
    MaxPool,
    Flatten,
    Linear,
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch over every non-channel axis; for a
    /// single sample these are per-channel spatial statistics.
    Batch,
    /// Stored population statistics.
    Frozen,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::BatchNorm { .. } => LayerKind::BatchNorm,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Linear { .. } => LayerKind::Linear,
        }
    }

    /// Shapes of the tensors this layer owns, in declaration order.
    /// Batch norm owns `gamma, beta, running_mean, running_var`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerSpec::BatchNorm { channels } => vec![vec![channels]; 4],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    /// Number of leading owned tensors that are trained by gradient descent.
    pub fn trainable_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } | LayerSpec::BatchNorm { .. } => 2,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = spatial(input)?;
                if c != in_channels {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                if stride == 0 || kernel == 0 {
                    return Err("kernel and stride must be positive".into());
                }
                if kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(format!("kernel {kernel} exceeds padded extent {h}x{w}"));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return Err(format!("expects {channels} channels, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { window } => {
                let [c, h, w] = spatial(input)?;
                if window == 0 || window > h || window > w {
                    return Err(format!("pool window {window} does not fit {h}x{w}"));
                }
                Ok(vec![c, h / window, w / window])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match input {
                [n] if *n == in_features => Ok(vec![out_features]),
                _ => Err(format!("expects [{in_features}] features, got {input:?}")),
            },
        }
    }
}

fn spatial(input: &[usize]) -> std::result::Result<[usize; 3], String> {
    match input {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(format!("expects a [C, H, W] input, got {input:?}")),
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv2d({in_channels},{out_channels},{kernel},{stride},{padding})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::BatchNorm { channels } => write!(f, "batchnorm({channels})"),
            LayerSpec::MaxPool { window } => write!(f, "maxpool({window})"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear({in_features},{out_features})"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            Some(_) => return Err(format!("unbalanced parentheses in {s:?}")),
            None => (s, ""),
        };
        let nums: Vec<usize> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| a.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
                .collect::<std::result::Result<_, _>>()?
        };
        let spec = match (name, nums.as_slice()) {
            ("conv2d", [i, o, k, st, p]) => LayerSpec::Conv2d {
                in_channels: *i,
                out_channels: *o,
                kernel: *k,
                stride: *st,
                padding: *p,
            },
            ("relu", []) => LayerSpec::Relu,
            ("batchnorm", [c]) => LayerSpec::BatchNorm { channels: *c },
            ("maxpool", [w]) => LayerSpec::MaxPool { window: *w },
            ("flatten", []) => LayerSpec::Flatten,
            ("linear", [i, o]) => LayerSpec::Linear {
                in_features: *i,
                out_features: *o,
            },
            _ => return Err(format!("unrecognized layer {s:?}")),
        };
        Ok(spec)
    }
}

/// A layer description together with the tensors it owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

impl Layer {
    /// Fan-in scaled uniform initialization; batch norm starts as identity.
    pub fn init(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let params = match spec {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => uniform_params(&spec, in_channels * kernel * kernel, rng),
            LayerSpec::Linear { in_features, .. } => uniform_params(&spec, in_features, rng),
            LayerSpec::BatchNorm { channels } => vec![
                Tensor::full(vec![channels], 1.0),
                Tensor::zeros(vec![channels]),
                Tensor::zeros(vec![channels]),
                Tensor::full(vec![channels], 1.0),
            ],
            _ => Vec::new(),
        };
        Layer { spec, params }
    }

    /// Records this layer on `tape`. Trainable tensors are registered as
    /// gradient leaves when `bind` is given; their vars are appended to it.
    pub fn apply<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: NormMode,
        bind: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let trainable = bind.is_some();
        let mut vars = Vec::new();
        for p in self.params.iter().take(self.spec.trainable_count()) {
            let t = p.cast::<T>().with_requires_grad(trainable);
            vars.push(tape.leaf(&t));
        }
        let out = match self.spec {
            LayerSpec::Conv2d { stride, padding, .. } => tape.conv2d(
                x,
                vars[0],
                Some(vars[1]),
                Conv2dGeometry { stride, padding },
            ),
            LayerSpec::Relu => Ok(tape.relu(x)),
            LayerSpec::BatchNorm { .. } => match mode {
                NormMode::Batch => tape.batch_norm(x, vars[0], vars[1], BATCH_NORM_EPS),
                NormMode::Frozen => {
                    let mean = self.params[2].cast::<T>();
                    let var = self.params[3].cast::<T>();
                    tape.batch_norm_frozen(x, vars[0], vars[1], mean.data(), var.data(), BATCH_NORM_EPS)
                }
            },
            LayerSpec::MaxPool { window } => tape.max_pool(x, window),
            LayerSpec::Flatten => {
                let s = tape.shape(x).to_vec();
                let n = s[0];
                let rest: usize = s[1..].iter().product();
                tape.reshape(x, &[n, rest])
            }
            LayerSpec::Linear { .. } => tape.linear(x, vars[0], Some(vars[1])),
        }
        .map_err(|e| match e {
            Error::Shape { op, detail } => Error::Shape {
                op: format!("{} ({op})", self.spec),
                detail,
            },
            other => other,
        })?;
        if let Some(b) = bind {
            b.extend(vars);
        }
        Ok(out)
    }
}

fn uniform_params(spec: &LayerSpec, fan_in: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    spec.param_shapes()
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape, data).expect("shape matches data")
        })
        .collect()
}

/// Applies one layer to a batched tensor outside any training loop, using
/// batch statistics for normalization.
pub fn apply_layer(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(input);
    let y = layer.apply(&mut tape, x, NormMode::Batch, None)?;
    Ok(tape.tensor(y))
}
