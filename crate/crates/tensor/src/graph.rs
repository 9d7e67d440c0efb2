//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. One graph
//! is built per forward pass and owned by a single writer; [`Graph::backward`]
//! walks the tape in reverse and returns a [`Gradients`] table.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::{norm, pool, resample};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution parameters bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Batch-norm parameters bound to a graph, with the running statistics they
/// read in evaluation mode and refresh in training mode.
#[derive(Clone, Copy, Debug)]
pub struct BnParams<'a, T> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub epsilon: T,
    pub momentum: T,
}

/// Refreshed running statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    Upsample {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    ChannelScale {
        x: Var,
        w: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Sum {
        x: Var,
    },
    MaskedMean {
        x: Var,
        mask: Vec<T>,
        denom: T,
    },
    Nll {
        logp: Var,
        labels: Vec<Option<usize>>,
        count: usize,
    },
    L2NormalizeChannels {
        x: Var,
        floor: T,
    },
    SumChannels {
        x: Var,
    },
    AbsNormalize {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: &'static str,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits an NCHW-like shape into `(outer, channels, inner)` around axis 1.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let inner: usize = shape.iter().skip(2).product();
    (outer, c, inner)
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected NCHW input, got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for v in vars {
            self.node(*v)?;
        }
        Ok(())
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            name: "constant",
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            name: "param",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, p: &ConvParams) -> Result<Var> {
        self.check(&[x, p.weight])?;
        let geom = ConvGeom::new(self.shape(x), self.shape(p.weight), p.stride, p.padding)?;
        if let Some(b) = p.bias {
            self.check(&[b])?;
            if self.shape(b) != [geom.f] {
                return Err(shape_err("conv2d", format!("bias must have {} entries", geom.f)));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(p.weight).data(),
            p.bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[geom.n, geom.f, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, p.weight];
        inputs.extend(p.bias);
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                x,
                w: p.weight,
                b: p.bias,
                geom,
            },
            &inputs,
        )
    }

    /// Batch normalization. In training mode the batch statistics are used
    /// and the refreshed running statistics are returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        p: &BnParams<'_, T>,
        training: bool,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        self.check(&[x, p.gamma, p.beta])?;
        let (n, c, h, w) = dims4("batch_norm", self.shape(x))?;
        for (what, len) in [
            ("gamma", self.shape(p.gamma).iter().product::<usize>()),
            ("beta", self.shape(p.beta).iter().product::<usize>()),
            ("running_mean", p.running_mean.len()),
            ("running_var", p.running_var.len()),
        ] {
            if len != c {
                return Err(shape_err(
                    "batch_norm",
                    format!("{what} has {len} entries, input has {c} channels"),
                ));
            }
        }
        if p.epsilon <= T::zero() {
            return Err(arg_err("batch_norm", "epsilon must be positive"));
        }
        let dims = (n, c, h * w);
        let gamma = self.value(p.gamma).data();
        let beta = self.value(p.beta).data();
        let (y, xhat, inv_std, stats) = if training {
            let (y, xhat, inv_std, batch) =
                norm::forward_train(self.value(x).data(), dims, gamma, beta, p.epsilon);
            let m = n * h * w;
            let unbias = if m > 1 {
                T::count(m) / T::count(m - 1)
            } else {
                T::one()
            };
            let keep = T::one() - p.momentum;
            let stats = RunningStats {
                mean: p
                    .running_mean
                    .iter()
                    .zip(&batch.mean)
                    .map(|(&r, &b)| keep * r + p.momentum * b)
                    .collect(),
                var: p
                    .running_var
                    .iter()
                    .zip(&batch.var)
                    .map(|(&r, &b)| keep * r + p.momentum * b * unbias)
                    .collect(),
            };
            (y, xhat, inv_std, Some(stats))
        } else {
            if p.running_var.iter().any(|v| *v < T::zero()) {
                return Err(arg_err("batch_norm", "running variance must be nonnegative"));
            }
            let (y, xhat, inv_std) = norm::forward_eval(
                self.value(x).data(),
                dims,
                gamma,
                beta,
                p.running_mean,
                p.running_var,
                p.epsilon,
            );
            (y, xhat, inv_std, None)
        };
        let t = Tensor::new(&[n, c, h, w], y)?;
        let v = self.push(
            "batch_norm",
            t,
            Op::BatchNorm {
                x,
                gamma: p.gamma,
                beta: p.beta,
                xhat,
                inv_std,
                training,
            },
            &[x, p.gamma, p.beta],
        )?;
        Ok((v, stats))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(&[x])?;
        let (n, c, h, w) = dims4("adaptive_avg_pool", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(arg_err("adaptive_avg_pool", "output extents must be positive"));
        }
        if out_h > h || out_w > w {
            return Err(arg_err(
                "adaptive_avg_pool",
                format!("output {out_h}x{out_w} exceeds input {h}x{w}"),
            ));
        }
        let y = pool::forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let t = Tensor::new(&[n, c, out_h, out_w], y)?;
        self.push("adaptive_avg_pool", t, Op::AdaptiveAvgPool { x }, &[x])
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check(&[x])?;
        let (n, c, h, w) = dims4("upsample_bilinear", self.shape(x))?;
        if out_h < h || out_w < w {
            return Err(arg_err(
                "upsample_bilinear",
                format!("output {out_h}x{out_w} is smaller than input {h}x{w}"),
            ));
        }
        if out_h == h && out_w == w {
            let t = self.value(x).clone();
            return self.push("upsample_bilinear", t, Op::Upsample { x }, &[x]);
        }
        let y = resample::forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let t = Tensor::new(&[n, c, out_h, out_w], y)?;
        self.push("upsample_bilinear", t, Op::Upsample { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", t, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", t, Op::Sigmoid { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x).map(|v| v.exp());
        self.push("exp", t, Op::Exp { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x).map(|v| v.abs());
        self.push("abs", t, Op::Abs { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x).map(|v| v * v);
        self.push("square", t, Op::Square { x }, &[x])
    }

    /// Log-softmax over axis 1 (channels) of an `N x C x ...` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("log_softmax", "input needs a channel axis"));
        }
        let (outer, c, inner) = split_axis1(&shape);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let mx = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
                let lse = mx + (0..c).map(|ch| (src[at(ch)] - mx).exp()).sum::<T>().ln();
                for ch in 0..c {
                    out[at(ch)] = src[at(ch)] - lse;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push("log_softmax", t, Op::LogSoftmax { x }, &[x])
    }

    /// Softmax over axis 1, as `exp(log_softmax(x))`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let l = self.log_softmax(x)?;
        self.exp(l)
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| arg_err("concat_channels", "nothing to concatenate"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(shape_err("concat_channels", "inputs need a channel axis"));
        }
        let mut total_c = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(shape_err(
                    "concat_channels",
                    format!("{s:?} incompatible with {base:?}"),
                ));
            }
            total_c += s[1];
        }
        let (outer, _, inner) = split_axis1(&base);
        let mut out = Vec::with_capacity(outer * total_c * inner);
        for o in 0..outer {
            for p in parts {
                let c = self.shape(*p)[1];
                out.extend_from_slice(&self.value(*p).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = base;
        shape[1] = total_c;
        let t = Tensor::new(&shape, out)?;
        self.push(
            "concat_channels",
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// Channels `start..end` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || start >= end || end > shape[1] {
            return Err(arg_err(
                "slice_channels",
                format!("range {start}..{end} invalid for {shape:?}"),
            ));
        }
        let (outer, c, inner) = split_axis1(&shape);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * c + start) * inner..(o * c + end) * inner]);
        }
        let mut s = shape;
        s[1] = end - start;
        let t = Tensor::new(&s, out)?;
        self.push("slice_channels", t, Op::SliceChannels { x, start }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(&[x])?;
        let t = self.value(x).map(|v| v + c);
        self.push("add_scalar", t, Op::AddScalar { x }, &[x])
    }

    /// Multiplies channel `i` of an `N x C x ...` tensor by `w[i]`.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(&[x, w])?;
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = split_axis1(&shape);
        if self.value(w).numel() != c || shape.len() < 2 {
            return Err(shape_err(
                "channel_scale",
                format!("{} weights for {c} channels", self.value(w).numel()),
            ));
        }
        let src = self.value(x).data();
        let wt = self.value(w).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for ch in 0..c {
                let off = (o * c + ch) * inner;
                for i in off..off + inner {
                    out[i] = src[i] * wt[ch];
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push("channel_scale", t, Op::ChannelScale { x, w }, &[x, w])
    }

    /// Fully connected layer: `x (N x in) -> N x out` with `w (out x in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(&[x, w])?;
        let (n, fin) = match *self.shape(x) {
            [n, fin] => (n, fin),
            ref s => return Err(shape_err("linear", format!("input must be N x in, got {s:?}"))),
        };
        let (fout, win) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(shape_err("linear", format!("weight must be out x in, got {s:?}"))),
        };
        if win != fin {
            return Err(shape_err("linear", format!("input width {fin}, weight expects {win}")));
        }
        let mut out = vec![T::zero(); n * fout];
        let mut beta = T::zero();
        if let Some(b) = b {
            self.check(&[b])?;
            if self.value(b).numel() != fout {
                return Err(shape_err("linear", "bias width mismatch"));
            }
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bd);
            }
            beta = T::one();
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut out,
        );
        let t = Tensor::new(&[n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", t, Op::Linear { x, w, b }, &inputs)
    }

    /// Spatial mean: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let (n, c, h, w) = dims4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let denom = T::count(hw);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let t = Tensor::new(&[n, c], out)?;
        self.push("global_avg_pool", t, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::count(n))
    }

    /// `sum(x * mask) / sum(mask)` with a constant mask of the same size.
    pub fn masked_mean(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        self.check(&[x])?;
        if mask.len() != self.value(x).numel() {
            return Err(shape_err("masked_mean", "mask size differs from input"));
        }
        let denom: T = mask.iter().copied().sum();
        if denom <= T::zero() {
            return Err(arg_err("masked_mean", "mask selects no elements"));
        }
        let num: T = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| v * m)
            .sum();
        let t = Tensor::scalar(num / denom);
        self.push(
            "masked_mean",
            t,
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                denom,
            },
            &[x],
        )
    }

    /// Mean negative log-likelihood over positions with a label. `logp` is
    /// `N x C x ...`; `labels` has one entry per `(n, spatial)` position.
    pub fn nll(&mut self, logp: Var, labels: &[Option<usize>]) -> Result<Var> {
        self.check(&[logp])?;
        let shape = self.shape(logp).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("nll", "input needs a class axis"));
        }
        let (outer, c, inner) = split_axis1(&shape);
        if labels.len() != outer * inner {
            return Err(shape_err(
                "nll",
                format!("{} labels for {} positions", labels.len(), outer * inner),
            ));
        }
        let src = self.value(logp).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (pos, label) in labels.iter().enumerate() {
            if let Some(k) = *label {
                if k >= c {
                    return Err(arg_err("nll", format!("label {k} out of range for {c} classes")));
                }
                let (o, i) = (pos / inner, pos % inner);
                total -= src[(o * c + k) * inner + i];
                count += 1;
            }
        }
        if count == 0 {
            return Err(arg_err("nll", "no labelled positions"));
        }
        let t = Tensor::scalar(total / T::count(count));
        self.push(
            "nll",
            t,
            Op::Nll {
                logp,
                labels: labels.to_vec(),
                count,
            },
            &[logp],
        )
    }

    /// Divides every axis-1 vector by `max(norm, floor)`.
    pub fn l2_normalize_channels(&mut self, x: Var, floor: T) -> Result<Var> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("l2_normalize_channels", "input needs a channel axis"));
        }
        let (outer, c, inner) = split_axis1(&shape);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |ch: usize| (o * c + ch) * inner + i;
                let norm = (0..c).map(|ch| src[at(ch)] * src[at(ch)]).sum::<T>().sqrt();
                let d = norm.max(floor);
                for ch in 0..c {
                    out[at(ch)] = src[at(ch)] / d;
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        self.push(
            "l2_normalize_channels",
            t,
            Op::L2NormalizeChannels { x, floor },
            &[x],
        )
    }

    /// Sums over axis 1, keeping it with extent 1.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("sum_channels", "input needs a channel axis"));
        }
        let (outer, c, inner) = split_axis1(&shape);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for ch in 0..c {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * c + ch) * inner + i];
                }
            }
        }
        let mut s = shape;
        s[1] = 1;
        let t = Tensor::new(&s, out)?;
        self.push("sum_channels", t, Op::SumChannels { x }, &[x])
    }

    /// `|x_i| / sum_j |x_j|` over all elements.
    pub fn abs_normalize(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let total: T = self.value(x).data().iter().map(|v| v.abs()).sum();
        if total <= T::zero() {
            return Err(arg_err("abs_normalize", "all entries are zero"));
        }
        let t = self.value(x).map(|v| v.abs() / total);
        self.push("abs_normalize", t, Op::AbsNormalize { x }, &[x])
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(arg_err(
                "backward",
                format!("output must be a scalar, has {} elements", root.value.numel()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.filter(|_| n.requires_grad)
                        .map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape"))
                })
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn map_grad(&self, v: Var, gy: &[T], f: impl Fn(T, T, T) -> T, y: &[T]) -> Vec<T> {
        self.nodes[v.0]
            .value
            .data()
            .iter()
            .zip(gy)
            .zip(y)
            .map(|((&x, &g), &yv)| f(x, g, yv))
            .collect()
    }

    fn propagate(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let cg = conv::backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("nchw");
                let bg = norm::backward(
                    gy,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    (n, c, h * w),
                    *training,
                );
                self.accumulate(grads, *x, bg.dx);
                self.accumulate(grads, *gamma, bg.dgamma);
                self.accumulate(grads, *beta, bg.dbeta);
            }
            Op::AdaptiveAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("nchw");
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let dx = pool::backward(gy, n * c, h, w, oh, ow);
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample { x } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("nchw");
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let dx = if oh == h && ow == w {
                    gy.to_vec()
                } else {
                    resample::backward(gy, n * c, h, w, oh, ow)
                };
                self.accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = self.map_grad(*x, gy, |xv, g, _| if xv > T::zero() { g } else { T::zero() }, y);
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = self.map_grad(*x, gy, |_, g, s| g * s * (T::one() - s), y);
                self.accumulate(grads, *x, dx);
            }
            Op::Exp { x } => {
                let dx = self.map_grad(*x, gy, |_, g, e| g * e, y);
                self.accumulate(grads, *x, dx);
            }
            Op::Abs { x } => {
                let dx = self.map_grad(
                    *x,
                    gy,
                    |xv, g, _| {
                        if xv > T::zero() {
                            g
                        } else if xv < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    },
                    y,
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Square { x } => {
                let two = T::lit(2.0);
                let dx = self.map_grad(*x, gy, |xv, g, _| two * xv * g, y);
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax { x } => {
                let (outer, c, inner) = split_axis1(node.value.shape());
                let mut dx = vec![T::zero(); gy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + i;
                        let gsum: T = (0..c).map(|ch| gy[at(ch)]).sum();
                        for ch in 0..c {
                            dx[at(ch)] = gy[at(ch)] - y[at(ch)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts } => {
                let (outer, total_c, inner) = split_axis1(node.value.shape());
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if self.requires_grad(*p) {
                        let mut dp = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let base = (o * total_c + offset) * inner;
                            dp.extend_from_slice(&gy[base..base + c * inner]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let (outer, c, inner) = split_axis1(self.shape(*x));
                let sc = node.value.shape()[1];
                let mut dx = vec![T::zero(); outer * c * inner];
                for o in 0..outer {
                    let dst = (o * c + start) * inner;
                    dx[dst..dst + sc * inner].copy_from_slice(&gy[o * sc * inner..(o + 1) * sc * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul { a, b } => {
                let da = self.map_grad(*b, gy, |bv, g, _| bv * g, y);
                let db = self.map_grad(*a, gy, |av, g, _| av * g, y);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, gy.iter().map(|&g| g * *c).collect());
            }
            Op::AddScalar { x } => {
                self.accumulate(grads, *x, gy.to_vec());
            }
            Op::ChannelScale { x, w } => {
                let (outer, c, inner) = split_axis1(self.shape(*x));
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let off = (o * c + ch) * inner;
                        for i in off..off + inner {
                            dx[i] = gy[i] * wv[ch];
                            dw[ch] += gy[i] * xv[i];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, T::one(), gy, false, self.value(*w).data(), false, T::zero(), &mut dx);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, T::one(), gy, true, self.value(*x).data(), false, T::zero(), &mut dw);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); fout];
                    for row in gy.chunks(fout) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += *g;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("nchw");
                let hw = h * w;
                let inv = T::one() / T::count(hw);
                let mut dx = Vec::with_capacity(gy.len() * hw);
                for &g in gy {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gy[0]; n]);
            }
            Op::MaskedMean { x, mask, denom } => {
                let s = gy[0] / *denom;
                self.accumulate(grads, *x, mask.iter().map(|&m| m * s).collect());
            }
            Op::Nll {
                logp,
                labels,
                count,
            } => {
                let (_, c, inner) = split_axis1(self.shape(*logp));
                let mut dx = vec![T::zero(); self.value(*logp).numel()];
                let s = -gy[0] / T::count(*count);
                for (pos, label) in labels.iter().enumerate() {
                    if let Some(k) = *label {
                        let (o, i) = (pos / inner, pos % inner);
                        dx[(o * c + k) * inner + i] = s;
                    }
                }
                self.accumulate(grads, *logp, dx);
            }
            Op::L2NormalizeChannels { x, floor } => {
                let (outer, c, inner) = split_axis1(self.shape(*x));
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + i;
                        let norm = (0..c).map(|ch| xv[at(ch)] * xv[at(ch)]).sum::<T>().sqrt();
                        if norm > *floor {
                            let dot: T = (0..c).map(|ch| y[at(ch)] * gy[at(ch)]).sum();
                            for ch in 0..c {
                                dx[at(ch)] = (gy[at(ch)] - y[at(ch)] * dot) / norm;
                            }
                        } else {
                            for ch in 0..c {
                                dx[at(ch)] = gy[at(ch)] / *floor;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumChannels { x } => {
                let (outer, c, inner) = split_axis1(self.shape(*x));
                let mut dx = vec![T::zero(); outer * c * inner];
                for o in 0..outer {
                    for ch in 0..c {
                        for i in 0..inner {
                            dx[(o * c + ch) * inner + i] = gy[o * inner + i];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AbsNormalize { x } => {
                let xv = self.value(*x).data();
                let total: T = xv.iter().map(|v| v.abs()).sum();
                let weighted: T = gy.iter().zip(xv).map(|(&g, &v)| g * v.abs()).sum();
                let dx = xv
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| {
                        let sign = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        sign * (g / total - weighted / (total * total))
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Which side of every non-differentiable point the recorded values sit
    /// on: the sign of each relu and abs input and whether each normalized
    /// vector exceeds its floor. Equal patterns mean the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } | Op::Abs { x } | Op::AbsNormalize { x } => {
                    bits.extend(self.value(*x).data().iter().map(|&v| v > T::zero()));
                }
                Op::L2NormalizeChannels { x, floor } => {
                    let shape = self.shape(*x);
                    let (outer, c, inner) = split_axis1(shape);
                    let src = self.value(*x).data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let sq = (0..c).map(|ch| src[(o * c + ch) * inner + i].powi(2)).sum::<T>();
                            bits.push(sq.sqrt() > *floor);
                        }
                    }
                }
                _ => {}
            }
        }
        bits
    }
}
