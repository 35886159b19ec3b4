//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every op appends one node holding its forward value. Inputs always have
//! smaller indices than the node that consumes them, so a single reverse
//! sweep over the node list visits each op exactly once in a valid order.
//! `backward` borrows the record immutably; calling it twice yields identical
//! gradients.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape(Var),
    Softmax {
        input: Var,
        axis: Axis,
    },
    LogSoftmax {
        input: Var,
        axis: Axis,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Diff {
        input: Var,
        axis: Axis,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    MarginHinge {
        input: Var,
        // (target, strongest rival) per row, only for rows with positive margin
        active: Vec<Option<(usize, usize)>>,
        classes: usize,
    },
    Blur {
        input: Var,
        plan: BlurPlan<T>,
    },
}

/// outer × len × inner decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Axis {
    fn of(shape: &[usize], axis: usize, op: &str) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(Axis {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn at(&self, o: usize, k: usize, i: usize) -> usize {
        (o * self.len + k) * self.inner + i
    }
}

/// Gather tables for a reflect-padded 2-D correlation with a fixed kernel.
#[derive(Debug)]
struct BlurPlan<T> {
    kernel: Vec<T>,
    size: usize,
    height: usize,
    width: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation record. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of `v`, or `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.sizes[v.0]],
        }
    }

    /// Writes the adjoint of `v` into the gradient buffer of `tensor`.
    pub fn assign(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        tensor.set_grad(self.wrt(v))
    }
}

fn check_suffix(a: &[usize], b: &[usize], op: &str) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::shape(
            op,
            format!("{b:?} does not broadcast against {a:?}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor; its `requires_grad` flag decides whether it
    /// receives an adjoint.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Per-channel batch mean and biased variance recorded by a
    /// [`Tape::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// 2-D cross-correlation, `[N, Ci, H, W] * [Co, Ci, K, K] -> [N, Co, Ho, Wo]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-D input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels, weight expects {wci}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if geom.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} != [{co}]", self.shape(b)),
                ));
            }
        }
        let g = ConvGeom::new(h, w, kh, geom)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh} exceeds padded input {h}x{w}")))?;
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let mut out = vec![T::zero(); n * co * g.ho * g.wo];
        let plane_out = g.ho * g.wo;
        for b in 0..n {
            for o in 0..co {
                let dst = &mut out[(b * co + o) * plane_out..(b * co + o + 1) * plane_out];
                if let Some(bv) = bias {
                    dst.fill(self.nodes[bv.0].value[o]);
                }
                for c in 0..ci {
                    let src = &x[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                    for ky in 0..kh {
                        for kx in 0..kh {
                            let wv = wt[((o * ci + c) * kh + ky) * kh + kx];
                            g.for_each_span(ky, kx, |oy, ox0, iy, ix0, len| {
                                let orow = &mut dst[oy * g.wo + ox0..oy * g.wo + ox0 + len];
                                let irow = &src[iy * w..];
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * irow[ix0 + j * g.stride];
                                }
                            });
                        }
                    }
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            vec![n, co, g.ho, g.wo],
            out,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, &[x], Op::Relu(x))
    }

    /// Batch normalization with statistics over every axis except the channel
    /// axis 1. A batch of one therefore normalizes over spatial positions.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, sp) = self.channel_layout(x, gamma, beta, "batch_norm")?;
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let m = (n * sp) as f64;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * sp;
                s += xv[base..base + sp].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * sp;
                ss += xv[base..base + sp]
                    .iter()
                    .map(|v| (v.f64() - mu).powi(2))
                    .sum::<f64>();
            }
            let v = ss / m;
            mean[ch] = T::lit(mu);
            var[ch] = T::lit(v);
            inv_std[ch] = T::lit(1.0 / (v + eps).sqrt());
        }
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                for i in base..base + sp {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            &[x, gamma, beta],
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    /// Batch normalization with frozen statistics (inference mode).
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, sp) = self.channel_layout(x, gamma, beta, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length != channels"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::lit(1.0 / (v.f64() + eps).sqrt()))
            .collect();
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * sp;
                for i in base..base + sp {
                    out[i] = gv[ch] * (xv[i] - running_mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            &[x, gamma, beta],
            Op::ChannelAffine {
                input: x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    fn channel_layout(&self, x: Var, gamma: Var, beta: Var, op: &str) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape(op, format!("needs [N, C, ...], got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                op,
                format!(
                    "affine parameters {:?}/{:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((xs[0], c, xs[2..].iter().product()))
    }

    /// Non-overlapping max pooling on `[N, C, H, W]`; trailing rows/columns
    /// that do not fill a window are dropped. Ties go to the first index.
    pub fn max_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || window == 0 || xs[2] < window || xs[3] < window {
            return Err(Error::shape(
                "max_pool",
                format!("window {window} does not fit input {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / window, w / window);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * window + dy) * w + ox * window + dx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![n, c, ho, wo], out, &[x], Op::MaxPool { input: x, argmax }))
    }

    /// `[N, In] x [Out, In]^T + [Out] -> [N, Out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[weight.0].value;
        let mut out = vec![T::zero(); n * fout];
        for b in 0..n {
            let row = &xv[b * fin..(b + 1) * fin];
            for o in 0..fout {
                let wr = &wv[o * fin..(o + 1) * fin];
                let mut acc = T::zero();
                for (a, c) in row.iter().zip(wr) {
                    acc += *a * *c;
                }
                if let Some(bv) = bias {
                    acc += self.nodes[bv.0].value[o];
                }
                out[b * fout + o] = acc;
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            vec![n, fout],
            out,
            &inputs,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, &[x], Op::Reshape(x)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ax = Axis::of(self.shape(x), axis, "softmax")?;
        let out = softmax_values(self.value(x), ax, false);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, &[x], Op::Softmax { input: x, axis: ax }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ax = Axis::of(self.shape(x), axis, "log_softmax")?;
        let out = softmax_values(self.value(x), ax, true);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, &[x], Op::LogSoftmax { input: x, axis: ax }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, &[x], Op::Sigmoid(x))
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        check_suffix(self.shape(a), self.shape(b), name)?;
        let av = self.value(a);
        let bv = self.value(b);
        let m = bv.len();
        let value = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % m])).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, &[a, b], op))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, &[x], Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, &[x], Op::AddScalar(x))
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v.f64()).sum();
        self.push(vec![1], vec![T::lit(s)], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.iter().map(|v| v.f64()).sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![T::lit(s)], &[x], Op::Mean(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, value, &[x], Op::Abs(x))
    }

    /// Forward difference `x[i + 1] - x[i]` along `axis`; that axis shrinks by one.
    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ax = Axis::of(self.shape(x), axis, "diff")?;
        if ax.len < 2 {
            return Err(Error::shape("diff", format!("axis {axis} has fewer than 2 entries")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(ax.outer * (ax.len - 1) * ax.inner);
        for o in 0..ax.outer {
            for k in 0..ax.len - 1 {
                for i in 0..ax.inner {
                    out.push(xv[ax.at(o, k + 1, i)] - xv[ax.at(o, k, i)]);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] -= 1;
        Ok(self.push(shape, out, &[x], Op::Diff { input: x, axis: ax }))
    }

    /// Picks flat elements of `x`; output shape `[indices.len()]`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of range {}", xv.len())));
        }
        if indices.is_empty() {
            return Err(Error::shape("gather", "no indices"));
        }
        let value = indices.iter().map(|&i| xv[i]).collect();
        Ok(self.push(vec![indices.len()], value, &[x], Op::Gather { input: x, indices }))
    }

    /// Row-wise `max(0, max_{j != t} x[j] - x[t])` over `[N, K]` (or `[K]`),
    /// one target per row. Zero margin yields a zero subgradient.
    pub fn margin_hinge(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, k) = match xs.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            _ => return Err(Error::shape("margin_hinge", format!("expected [N, K], got {xs:?}"))),
        };
        if k < 2 || targets.len() != rows || targets.iter().any(|&t| t >= k) {
            return Err(Error::shape(
                "margin_hinge",
                format!("{} targets for {rows} rows of {k} classes", targets.len()),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows);
        let mut active = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let row = &xv[r * k..(r + 1) * k];
            let rival = (0..k)
                .filter(|&j| j != t)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if row[b] >= row[j] => Some(b),
                    _ => Some(j),
                })
                .expect("k >= 2");
            let margin = row[rival] - row[t];
            if margin > T::zero() {
                out.push(margin);
                active.push(Some((t, rival)));
            } else {
                out.push(T::zero());
                active.push(None);
            }
        }
        let shape = if xs.len() == 1 { vec![1] } else { vec![rows] };
        Ok(self.push(
            shape,
            out,
            &[x],
            Op::MarginHinge {
                input: x,
                active,
                classes: k,
            },
        ))
    }

    /// Correlates every trailing `H x W` plane of `x` with a fixed odd-sized
    /// square kernel under reflect padding. Output shape equals input shape.
    pub fn blur(&mut self, x: Var, kernel: &Tensor<T>) -> Result<Var> {
        let ks = kernel.shape();
        if ks.len() != 2 || ks[0] != ks[1] || ks[0] % 2 == 0 {
            return Err(Error::shape("blur", format!("kernel must be odd square, got {ks:?}")));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("blur", format!("needs [.., H, W], got {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let size = ks[0];
        let r = (size / 2) as isize;
        let rows = (0..h as isize)
            .flat_map(|y| (-r..=r).map(move |d| reflect_index(y + d, h)))
            .collect();
        let cols = (0..w as isize)
            .flat_map(|c| (-r..=r).map(move |d| reflect_index(c + d, w)))
            .collect();
        let plan = BlurPlan {
            kernel: kernel.data().to_vec(),
            size,
            height: h,
            width: w,
            rows,
            cols,
        };
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.chunks(h * w).zip(out.chunks_mut(h * w)) {
            plan.forward(src, dst);
        }
        Ok(self.push(xs, out, &[x], Op::Blur { input: x, plan }))
    }

    /// Reverse sweep from a scalar `loss`. Nodes that do not require gradients
    /// are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let sizes = self.nodes.iter().map(|n| n.value.len()).collect();
        if !ln.requires_grad {
            return Ok(Gradients { grads, sizes });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, sizes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! slot {
            ($v:expr) => {
                slot(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xs = &self.nodes[input.0].shape;
                let ws = &self.nodes[weight.0].shape;
                let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let cg = ConvGeom::new(h, w, k, *geom).expect("validated in forward");
                let plane_out = cg.ho * cg.wo;
                let x = &self.nodes[input.0].value;
                let wt = &self.nodes[weight.0].value;
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = slot!(*b);
                        for bi in 0..n {
                            for o in 0..co {
                                let s: T = g[(bi * co + o) * plane_out..(bi * co + o + 1) * plane_out]
                                    .iter()
                                    .copied()
                                    .sum();
                                gb[o] += s;
                            }
                        }
                    }
                }
                if self.needs(*weight) {
                    let gw = slot!(*weight);
                    for bi in 0..n {
                        for o in 0..co {
                            let go = &g[(bi * co + o) * plane_out..(bi * co + o + 1) * plane_out];
                            for c in 0..ci {
                                let src = &x[(bi * ci + c) * h * w..(bi * ci + c + 1) * h * w];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let mut s = T::zero();
                                        cg.for_each_span(ky, kx, |oy, ox0, iy, ix0, len| {
                                            let orow = &go[oy * cg.wo + ox0..oy * cg.wo + ox0 + len];
                                            let irow = &src[iy * w..];
                                            for (j, o) in orow.iter().enumerate() {
                                                s += *o * irow[ix0 + j * cg.stride];
                                            }
                                        });
                                        gw[((o * ci + c) * k + ky) * k + kx] += s;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(*input) {
                    let gx = slot!(*input);
                    for bi in 0..n {
                        for o in 0..co {
                            let go = &g[(bi * co + o) * plane_out..(bi * co + o + 1) * plane_out];
                            for c in 0..ci {
                                let dst = &mut gx[(bi * ci + c) * h * w..(bi * ci + c + 1) * h * w];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wv = wt[((o * ci + c) * k + ky) * k + kx];
                                        cg.for_each_span(ky, kx, |oy, ox0, iy, ix0, len| {
                                            let orow = &go[oy * cg.wo + ox0..oy * cg.wo + ox0 + len];
                                            let irow = &mut dst[iy * w..];
                                            for (j, o) in orow.iter().enumerate() {
                                                irow[ix0 + j * cg.stride] += wv * *o;
                                            }
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let gx = slot!(*x);
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let xs = &self.nodes[input.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let sp: usize = xs[2..].iter().product();
                let gv = &self.nodes[gamma.0].value;
                let m = (n * sp) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * sp;
                        for i in base..base + sp {
                            sum_g[ch] += g[i].f64();
                            sum_gx[ch] += (g[i] * xhat[i]).f64();
                        }
                    }
                }
                if self.needs(*gamma) {
                    let gg = slot!(*gamma);
                    for ch in 0..c {
                        gg[ch] += T::lit(sum_gx[ch]);
                    }
                }
                if self.needs(*beta) {
                    let gb = slot!(*beta);
                    for ch in 0..c {
                        gb[ch] += T::lit(sum_g[ch]);
                    }
                }
                if self.needs(*input) {
                    let gx = slot!(*input);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let mg = T::lit(sum_g[ch] / m);
                            let mgx = T::lit(sum_gx[ch] / m);
                            let scale = gv[ch] * inv_std[ch];
                            for i in base..base + sp {
                                gx[i] += scale * (g[i] - mg - xhat[i] * mgx);
                            }
                        }
                    }
                }
            }
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = &self.nodes[input.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let sp: usize = xs[2..].iter().product();
                let xv = &self.nodes[input.0].value;
                let gv = &self.nodes[gamma.0].value;
                if self.needs(*gamma) {
                    let gg = slot!(*gamma);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let s: f64 = (base..base + sp)
                                .map(|i| (g[i] * (xv[i] - mean[ch]) * inv_std[ch]).f64())
                                .sum();
                            gg[ch] += T::lit(s);
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = slot!(*beta);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            gb[ch] += g[base..base + sp].iter().copied().sum();
                        }
                    }
                }
                if self.needs(*input) {
                    let gx = slot!(*input);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * sp;
                            let s = gv[ch] * inv_std[ch];
                            for i in base..base + sp {
                                gx[i] += g[i] * s;
                            }
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.needs(*input) {
                    let gx = slot!(*input);
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = &self.nodes[input.0].shape;
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.nodes[weight.0].shape[0];
                let xv = &self.nodes[input.0].value;
                let wv = &self.nodes[weight.0].value;
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let gb = slot!(*b);
                        for bi in 0..n {
                            for o in 0..fout {
                                gb[o] += g[bi * fout + o];
                            }
                        }
                    }
                }
                if self.needs(*weight) {
                    let gw = slot!(*weight);
                    for bi in 0..n {
                        for o in 0..fout {
                            let go = g[bi * fout + o];
                            for i in 0..fin {
                                gw[o * fin + i] += go * xv[bi * fin + i];
                            }
                        }
                    }
                }
                if self.needs(*input) {
                    let gx = slot!(*input);
                    for bi in 0..n {
                        for o in 0..fout {
                            let go = g[bi * fout + o];
                            for i in 0..fin {
                                gx[bi * fin + i] += go * wv[o * fin + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let gx = slot!(*x);
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                if self.needs(*input) {
                    let y = &node.value;
                    let gx = slot!(*input);
                    for o in 0..axis.outer {
                        for i in 0..axis.inner {
                            let dot: T = (0..axis.len)
                                .map(|k| g[axis.at(o, k, i)] * y[axis.at(o, k, i)])
                                .sum();
                            for k in 0..axis.len {
                                let j = axis.at(o, k, i);
                                gx[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { input, axis } => {
                if self.needs(*input) {
                    let y = &node.value;
                    let gx = slot!(*input);
                    for o in 0..axis.outer {
                        for i in 0..axis.inner {
                            let total: T = (0..axis.len).map(|k| g[axis.at(o, k, i)]).sum();
                            for k in 0..axis.len {
                                let j = axis.at(o, k, i);
                                gx[j] += g[j] - y[j].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let y = &node.value;
                    let gx = slot!(*x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if self.needs(*a) {
                    let ga = slot!(*a);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
                if self.needs(*b) {
                    let gb = slot!(*b);
                    let m = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % m] += sign * *y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let m = bv.len();
                if self.needs(*a) {
                    let ga = slot!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i % m];
                    }
                }
                if self.needs(*b) {
                    let gb = slot!(*b);
                    for i in 0..g.len() {
                        gb[i % m] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let gx = slot!(*x);
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += *b * *c;
                    }
                }
            }
            Op::AddScalar(x) => {
                if self.needs(*x) {
                    let gx = slot!(*x);
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gx = slot!(*x);
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let gx = slot!(*x);
                    let s = g[0] / T::lit(gx.len() as f64);
                    for a in gx.iter_mut() {
                        *a += s;
                    }
                }
            }
            Op::Abs(x) => {
                if self.needs(*x) {
                    let xv = &self.nodes[x.0].value;
                    let gx = slot!(*x);
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] += g[i];
                        } else if xv[i] < T::zero() {
                            gx[i] -= g[i];
                        }
                    }
                }
            }
            Op::Diff { input, axis } => {
                if self.needs(*input) {
                    let gx = slot!(*input);
                    let mut idx = 0;
                    for o in 0..axis.outer {
                        for k in 0..axis.len - 1 {
                            for i in 0..axis.inner {
                                gx[axis.at(o, k + 1, i)] += g[idx];
                                gx[axis.at(o, k, i)] -= g[idx];
                                idx += 1;
                            }
                        }
                    }
                }
            }
            Op::Gather { input, indices } => {
                if self.needs(*input) {
                    let gx = slot!(*input);
                    for (j, &i) in indices.iter().enumerate() {
                        gx[i] += g[j];
                    }
                }
            }
            Op::MarginHinge {
                input,
                active,
                classes,
            } => {
                if self.needs(*input) {
                    let gx = slot!(*input);
                    for (r, a) in active.iter().enumerate() {
                        if let Some((t, j)) = a {
                            gx[r * classes + j] += g[r];
                            gx[r * classes + t] -= g[r];
                        }
                    }
                }
            }
            Op::Blur { input, plan } => {
                if self.needs(*input) {
                    let gx = slot!(*input);
                    let plane = plan.height * plan.width;
                    for (go, dst) in g.chunks(plane).zip(gx.chunks_mut(plane)) {
                        plan.adjoint(go, dst);
                    }
                }
            }
        }
    }
}

impl<T: Real> BlurPlan<T> {
    fn forward(&self, src: &[T], dst: &mut [T]) {
        let s = self.size;
        for y in 0..self.height {
            let rows = &self.rows[y * s..(y + 1) * s];
            for x in 0..self.width {
                let cols = &self.cols[x * s..(x + 1) * s];
                let mut acc = T::zero();
                for (ky, &iy) in rows.iter().enumerate() {
                    let krow = &self.kernel[ky * s..(ky + 1) * s];
                    let srow = &src[iy * self.width..(iy + 1) * self.width];
                    for (kv, &ix) in krow.iter().zip(cols) {
                        acc += *kv * srow[ix];
                    }
                }
                dst[y * self.width + x] = acc;
            }
        }
    }

    fn adjoint(&self, g: &[T], dst: &mut [T]) {
        let s = self.size;
        for y in 0..self.height {
            let rows = &self.rows[y * s..(y + 1) * s];
            for x in 0..self.width {
                let cols = &self.cols[x * s..(x + 1) * s];
                let gv = g[y * self.width + x];
                for (ky, &iy) in rows.iter().enumerate() {
                    let krow = &self.kernel[ky * s..(ky + 1) * s];
                    for (kv, &ix) in krow.iter().zip(cols) {
                        dst[iy * self.width + ix] += *kv * gv;
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_values<T: Real>(x: &[T], ax: Axis, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..ax.outer {
        for i in 0..ax.inner {
            let mut mx = x[ax.at(o, 0, i)];
            for k in 1..ax.len {
                mx = mx.max(x[ax.at(o, k, i)]);
            }
            let total: f64 = (0..ax.len).map(|k| (x[ax.at(o, k, i)] - mx).f64().exp()).sum();
            let log_total = total.ln();
            for k in 0..ax.len {
                let j = ax.at(o, k, i);
                let shifted = (x[j] - mx).f64();
                out[j] = if log {
                    T::lit(shifted - log_total)
                } else {
                    T::lit(shifted.exp() / total)
                };
            }
        }
    }
    out
}

/// Output extents and valid-index spans for one convolution.
#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, k: usize, geom: Conv2dGeometry) -> Option<Self> {
        let ph = h + 2 * geom.padding;
        let pw = w + 2 * geom.padding;
        if k == 0 || k > ph || k > pw {
            return None;
        }
        Some(ConvGeom {
            h,
            w,
            k,
            ho: (ph - k) / geom.stride + 1,
            wo: (pw - k) / geom.stride + 1,
            stride: geom.stride,
            pad: geom.padding,
        })
    }

    /// Range of output positions `o` with `0 <= o * stride + offset - pad < extent`.
    fn valid(&self, offset: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo_num = self.pad as isize - offset as isize;
        let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
        let hi_num = extent as isize - 1 + self.pad as isize - offset as isize;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(out as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }

    /// Calls `f(oy, ox0, iy, ix0, len)` for every output row segment that
    /// reads valid input for kernel tap `(ky, kx)`.
    #[inline]
    fn for_each_span(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        debug_assert!(ky < self.k && kx < self.k);
        let (oy0, oy1) = self.valid(ky, self.h, self.ho);
        let (ox0, ox1) = self.valid(kx, self.w, self.wo);
        if ox1 <= ox0 {
            return;
        }
        let ix0 = ox0 * self.stride + kx - self.pad;
        for oy in oy0..oy1 {
            let iy = oy * self.stride + ky - self.pad;
            f(oy, ox0, iy, ix0, ox1 - ox0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_input_convolution() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = t.constant(&Tensor::full(vec![1, 1, 2, 2], 1.0));
        let y = t
            .conv2d(x, w, None, Conv2dGeometry { stride: 1, padding: 0 })
            .unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y), &[4.0; 4]);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for (stride, pad, seed) in [(1, 0, 1), (1, 1, 2), (2, 1, 3), (2, 0, 4)] {
            let x = random(&[2, 3, 7, 6], seed);
            let w = random(&[4, 3, 3, 3], seed + 100);
            let mut t = Tape::new();
            let xv = t.constant(&x);
            let wv = t.constant(&w);
            let y = t.conv2d(xv, wv, None, Conv2dGeometry { stride, padding: pad }).unwrap();
            let want = conv_oracle(&x, &w, stride, pad);
            assert_eq!(t.value(y).len(), want.len());
            for (a, b) in t.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_bias_and_shape_errors() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::zeros(vec![1, 2, 4, 4]));
        let w = t.constant(&Tensor::zeros(vec![3, 2, 3, 3]));
        let b = t.constant(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.conv2d(x, w, Some(b), Conv2dGeometry { stride: 1, padding: 1 }).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 4, 4]);
        assert_eq!(t.value(y)[16], 2.0);

        let bad = t.constant(&Tensor::zeros(vec![3, 5, 3, 3]));
        let err = t.conv2d(x, bad, None, Conv2dGeometry { stride: 1, padding: 0 });
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn zero_variance_channel_maps_to_beta() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::full(vec![1, 1, 2, 2], 2.0));
        let g = t.constant(&Tensor::full(vec![1], 1.0));
        let b = t.constant(&Tensor::zeros(vec![1]));
        let y = t.batch_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0; 4]);
    }

    #[test]
    fn batch_norm_normalizes_each_channel() {
        let x = random(&[2, 3, 4, 4], 9);
        let mut t = Tape::new();
        let xv = t.constant(&x);
        let g = t.constant(&Tensor::full(vec![3], 1.0));
        let b = t.constant(&Tensor::zeros(vec![3]));
        let y = t.batch_norm(xv, g, b, 1e-5).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| t.value(y)[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn frozen_batch_norm_uses_given_statistics() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::new(vec![1, 2, 1, 1], vec![3.0, 3.0]).unwrap());
        let g = t.constant(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(&Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let y = t.batch_norm_frozen(x, g, b, &[1.0, 3.0], &[4.0, 1.0], 0.0).unwrap();
        assert_eq!(t.value(y), &[1.0, 1.0]);
    }

    #[test]
    fn max_pool_takes_first_of_ties() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&Tensor::full(vec![1, 1, 2, 2], 1.0).with_requires_grad(true));
        let y = t.max_pool(x, 2).unwrap();
        let s = t.sum(y);
        assert_eq!(t.value(y), &[1.0]);
        assert_eq!(t.backward(s).unwrap().wrt(x), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let sa = t.softmax(a, 0).unwrap();
        assert_eq!(t.value(sa), &[0.5, 0.5]);
        let b = t.constant(&Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
        let sb = t.softmax(b, 0).unwrap();
        assert!((t.value(sb)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.value(sb)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let z = random(&[5], 17).cast::<f32>();
        let mut t = Tape::<f32>::new();
        let v = t.constant(&z);
        let s = t.softmax(v, 0).unwrap();
        let denom: f64 = z.data().iter().map(|&v| (v as f64).exp()).sum();
        for (i, &zi) in z.data().iter().enumerate() {
            let want = (zi as f64).exp() / denom;
            assert!((t.value(s)[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = random(&[3, 4], 5);
        let mut t = Tape::new();
        let v = t.constant(&x);
        let s = t.softmax(v, 0).unwrap();
        for col in 0..4 {
            let total: f64 = (0..3).map(|r| t.value(s)[r * 4 + col]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let ls = t.log_softmax(v, 1).unwrap();
        let s1 = t.softmax(v, 1).unwrap();
        for (a, b) in t.value(ls).iter().zip(t.value(s1)) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
        assert!(t.softmax(v, 2).is_err());
    }

    #[test]
    fn linear_form_gradient_is_the_weight() {
        let w = Tensor::new(vec![3], vec![0.5, -2.0, 3.0]).unwrap();
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap().with_requires_grad(true));
        let wv = t.constant(&w);
        let p = t.mul(x, wv).unwrap();
        let loss = t.sum(p);
        assert_eq!(t.backward(loss).unwrap().wrt(x), w.data());
    }

    #[test]
    fn l1_gradient_of_positive_input_is_ones() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&Tensor::new(vec![4], vec![0.1, 2.0, 3.0, 9.0]).unwrap().with_requires_grad(true));
        let a = t.abs(x);
        let loss = t.sum(a);
        assert_eq!(t.backward(loss).unwrap().wrt(x), vec![1.0; 4]);
    }

    #[test]
    fn kinks_take_zero_subgradient() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap().with_requires_grad(true));
        let a = t.abs(x);
        let r = t.relu(x);
        let s = t.add(a, r).unwrap();
        let loss = t.sum(s);
        assert_eq!(t.backward(loss).unwrap().wrt(x), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let x = random(&[1, 2, 5, 5], 3);
        let w = random(&[3, 2, 3, 3], 4);
        let mut t = Tape::new();
        let xv = t.leaf(&x.with_requires_grad(true));
        let wv = t.leaf(&w.with_requires_grad(true));
        let y = t.conv2d(xv, wv, None, Conv2dGeometry { stride: 1, padding: 1 }).unwrap();
        let r = t.relu(y);
        let loss = t.sum(r);
        let g1 = t.backward(loss).unwrap();
        let g2 = t.backward(loss).unwrap();
        assert_eq!(g1.wrt(xv), g2.wrt(xv));
        assert_eq!(g1.wrt(wv), g2.wrt(wv));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&Tensor::zeros(vec![2]).with_requires_grad(true));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn unreachable_leaves_get_zero() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(&Tensor::full(vec![2], 1.0).with_requires_grad(true));
        let other = t.leaf(&Tensor::full(vec![3], 1.0).with_requires_grad(true));
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(other), vec![0.0; 3]);
        assert!(g.get(other).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::full(vec![2], 1.0));
        let loss = t.sum(x);
        assert!(t.backward(loss).unwrap().get(x).is_none());
    }

    #[test]
    fn gradients_assign_into_tensor() {
        let mut x = Tensor::<f32>::full(vec![2], 3.0).with_requires_grad(true);
        let mut t = Tape::new();
        let v = t.leaf(&x);
        let sq = t.mul(v, v).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap().assign(v, &mut x).unwrap();
        assert_eq!(x.grad(), Some(&[6.0f32, 6.0][..]));
    }

    #[test]
    fn broadcast_suffix_mul() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(&Tensor::full(vec![2, 3], 1.0).with_requires_grad(true));
        let b = t.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
        let p = t.mul(a, b).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(b), vec![2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(a), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let c = t.constant(&Tensor::zeros(vec![2]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn diff_is_forward_difference() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::new(vec![2, 3], vec![0.0, 1.0, 3.0, 5.0, 5.0, 2.0]).unwrap());
        let dx = t.diff(x, 1).unwrap();
        assert_eq!(t.shape(dx), &[2, 2]);
        assert_eq!(t.value(dx), &[1.0, 2.0, 0.0, -3.0]);
        let dy = t.diff(x, 0).unwrap();
        assert_eq!(t.value(dy), &[5.0, 4.0, -1.0]);
    }

    #[test]
    fn hinge_rows() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(&Tensor::new(vec![3, 3], vec![0.2, 0.5, 0.3, 0.9, 0.1, 0.0, 0.4, 0.4, 0.2]).unwrap());
        let h = t.margin_hinge(x, &[0, 0, 0]).unwrap();
        let v = t.value(h);
        assert!((v[0] - 0.3).abs() < 1e-6);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert!(t.margin_hinge(x, &[3, 0, 0]).is_err());
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn blur_keeps_constant_fields() {
        let k = Tensor::<f64>::full(vec![5, 5], 1.0 / 25.0);
        let mut t = Tape::new();
        let x = t.constant(&Tensor::full(vec![2, 4, 6], 0.7));
        let y = t.blur(x, &k).unwrap();
        assert!(t.value(y).iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(t.blur(x, &Tensor::full(vec![2, 2], 0.25)).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert!(sigmoid(-1000.0f32) >= 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert!((sigmoid(2.0f64) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }
}
