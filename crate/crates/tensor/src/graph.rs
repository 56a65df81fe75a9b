//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and whatever it needs for the backward pass, so
//! node order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep.

use crate::conv::{
    col2im, conv_out_extent, conv_transpose_out_extent, im2col, ConvGeometry,
};
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    /// Normalizes over the last axis.
    Softmax,
}

/// Statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics reported by a training-mode batch norm:
/// mean and unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) struct StatUpdate<T> {
    pub store_uid: u64,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats<T>,
}

pub(crate) struct Binding {
    pub store_uid: u64,
    pub param: ParamId,
    pub var: Var,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        in_channels: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Scale(Var, T),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Narrow {
        input: Var,
        start: usize,
    },
    BroadcastSpatial(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::BroadcastSpatial(_) => "broadcast_spatial",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    label: Option<String>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    pub(crate) bindings: Vec<Binding>,
    pub(crate) stat_updates: Vec<StatUpdate<T>>,
    /// `(first node index, name)` transitions set by [`Graph::scope`].
    scopes: Vec<(usize, String)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            stat_updates: Vec::new(),
            scopes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            label: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on `v` by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Attaches a human-readable label used in non-finite diagnostics.
    pub fn label(&mut self, v: Var, label: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(label.into());
        v
    }

    /// A leaf holding `value`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// A leaf bound to a stored parameter. When `requires_grad` is set, the
    /// gradient can later be pulled back into the store with
    /// [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, requires_grad: bool) -> Var {
        let v = self.input(store.value(id).clone(), requires_grad);
        self.nodes[v.0].label = Some(store.name(id).to_string());
        if requires_grad {
            self.bindings.push(Binding {
                store_uid: store.uid(),
                param: id,
                var: v,
            });
        }
        v
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stat_updates.push(update);
    }

    /// The first node (in evaluation order) whose value contains a NaN or
    /// infinity, with its op name and label.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str, Option<&str>)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| (Var(i), n.op.name(), n.label.as_deref()))
        })
    }

    /// Names the layer that the nodes created from now on belong to.
    pub fn scope(&mut self, name: impl Into<String>) {
        self.scopes.push((self.nodes.len(), name.into()));
    }

    /// The scope that was active when `v` was created.
    pub fn scope_of(&self, v: Var) -> Option<&str> {
        let i = self.scopes.partition_point(|(start, _)| *start <= v.0);
        i.checked_sub(1).map(|i| self.scopes[i].1.as_str())
    }

    /// Human-readable location of the first non-finite value, if any.
    pub fn describe_non_finite(&self) -> Option<String> {
        let (v, op, label) = self.first_non_finite()?;
        let mut s = format!("`{op}` node {}", v.0);
        if let Some(scope) = self.scope_of(v) {
            s.push_str(&format!(" in layer `{scope}`"));
        }
        if let Some(label) = label {
            s.push_str(&format!(" (parameter `{label}`)"));
        }
        Some(s)
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        let shape = self.shape(v);
        if shape.len() != rank {
            return Err(TensorError::Rank {
                op,
                expected: rank,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    fn expect_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(TensorError::Rank {
                op,
                expected: sa.len(),
                got: sb.to_vec(),
            });
        }
        for (&x, &y) in sa.iter().zip(sb) {
            if x != y {
                return Err(TensorError::dim(op, "elementwise", x, y));
            }
        }
        Ok(())
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.value(b).numel() != channels {
                return Err(TensorError::dim(op, "bias", channels, self.value(b).numel()));
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Layer ops
    // ------------------------------------------------------------------

    /// 2-D convolution. `input` is `[N, C, H, W]`, `weight` `[C', C, K, K]`,
    /// `bias` `[C']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        self.expect_rank(OP, input, 4)?;
        self.expect_rank(OP, weight, 4)?;
        let (n, c, h, w) = dims4(self.shape(input));
        let ws = self.shape(weight);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != c {
            return Err(TensorError::dim(OP, "in_channels", ws[1], c));
        }
        if ws[3] != k {
            return Err(TensorError::dim(OP, "kernel_width", k, ws[3]));
        }
        if stride == 0 {
            return Err(TensorError::config(OP, "stride must be positive"));
        }
        self.check_bias(OP, bias, cout)?;
        let oh = conv_out_extent(h, k, stride, padding)
            .ok_or_else(|| TensorError::dim(OP, "height", k, h + 2 * padding))?;
        let ow = conv_out_extent(w, k, stride, padding)
            .ok_or_else(|| TensorError::dim(OP, "width", k, w + 2 * padding))?;
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let hw = oh * ow;
        let mut out = vec![T::zero(); n * cout * hw];
        let mut cols = vec![T::zero(); geom.col_rows() * hw];
        for b in 0..n {
            im2col(&x[b * geom.image_len()..(b + 1) * geom.image_len()], &geom, &mut cols);
            let y = &mut out[b * cout * hw..(b + 1) * cout * hw];
            gemm(cout, geom.col_rows(), hw, wt, false, &cols, false, y, false);
            if let Some(bv) = bias {
                add_channel_bias(y, self.value(bv).data(), hw);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new([n, cout, oh, ow], out)?;
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels: cout,
            },
        ))
    }

    /// Transposed convolution, the adjoint of [`conv2d`](Self::conv2d) with the
    /// same geometry. `weight` is `[C_in, C_out, K, K]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        self.expect_rank(OP, input, 4)?;
        self.expect_rank(OP, weight, 4)?;
        if stride == 0 {
            return Err(TensorError::config(OP, "stride must be positive"));
        }
        if output_padding >= stride {
            return Err(TensorError::config(
                OP,
                format!("output_padding {output_padding} must be smaller than stride {stride}"),
            ));
        }
        let (n, cin, h, w) = dims4(self.shape(input));
        let ws = self.shape(weight);
        let (cout, k) = (ws[1], ws[2]);
        if ws[0] != cin {
            return Err(TensorError::dim(OP, "in_channels", ws[0], cin));
        }
        if ws[3] != k {
            return Err(TensorError::dim(OP, "kernel_width", k, ws[3]));
        }
        self.check_bias(OP, bias, cout)?;
        let oh = conv_transpose_out_extent(h, k, stride, padding, output_padding)
            .ok_or_else(|| TensorError::config(OP, "output height would be empty"))?;
        let ow = conv_transpose_out_extent(w, k, stride, padding, output_padding)
            .ok_or_else(|| TensorError::config(OP, "output width would be empty"))?;
        let geom = ConvGeometry {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            padding,
            out_height: h,
            out_width: w,
        };
        debug_assert_eq!(conv_out_extent(oh, k, stride, padding), Some(h));
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let in_hw = h * w;
        let out_len = geom.image_len();
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = vec![T::zero(); geom.col_rows() * in_hw];
        for b in 0..n {
            let xb = &x[b * cin * in_hw..(b + 1) * cin * in_hw];
            gemm(geom.col_rows(), cin, in_hw, wt, true, xb, false, &mut cols, false);
            let y = &mut out[b * out_len..(b + 1) * out_len];
            col2im(&cols, &geom, y);
            if let Some(bv) = bias {
                add_channel_bias(y, self.value(bv).data(), oh * ow);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new([n, cout, oh, ow], out)?;
        Ok(self.push(
            value,
            rg,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_channels: cin,
            },
        ))
    }

    /// Per-channel normalization over every axis except axis 1, followed by the
    /// affine map `gamma·x̂ + beta`. Returns the batch statistics when
    /// normalizing with [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        const OP: &str = "batch_norm";
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                got: shape,
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (axis, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(TensorError::dim(OP, axis, c, self.value(v).numel()));
            }
        }
        let eps = T::from_f64(eps);
        let x = self.value(input).data();
        let count = n * inner;
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(TensorError::DegenerateBatch { op: OP, batch: n });
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let m = T::from_f64(count as f64);
                for (ch, (mu, vr)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut s = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        s += x[base..base + inner].iter().copied().sum::<T>();
                    }
                    *mu = s / m;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        sq += x[base..base + inner]
                            .iter()
                            .map(|&v| (v - *mu) * (v - *mu))
                            .sum::<T>();
                    }
                    *vr = sq / m;
                }
                let unbias = T::from_f64(count as f64 / (count as f64 - 1.0));
                let batch = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbias).collect(),
                };
                (mean, var, Some(batch))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::dim(OP, "running_stats", c, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(shape, out)?;
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: batch.is_some(),
            },
        );
        Ok((v, batch))
    }

    /// Affine map `input · weight + bias` with `input` `[B, F]`, `weight`
    /// `[F, F']`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "dense";
        self.expect_rank(OP, input, 2)?;
        self.expect_rank(OP, weight, 2)?;
        let (b, f) = (self.shape(input)[0], self.shape(input)[1]);
        let (wf, fo) = (self.shape(weight)[0], self.shape(weight)[1]);
        if wf != f {
            return Err(TensorError::dim(OP, "in_features", wf, f));
        }
        self.check_bias(OP, bias, fo)?;
        let mut out = vec![T::zero(); b * fo];
        gemm(
            b,
            f,
            fo,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            false,
        );
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(fo) {
                row.iter_mut().zip(bd).for_each(|(y, &bb)| *y += bb);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|v| self.rg(v));
        let value = Tensor::new([b, fo], out)?;
        Ok(self.push(value, rg, Op::Dense { input, weight, bias }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => Ok(self.unary(input, |v| v.max(T::zero()), Op::Relu(input))),
            Activation::LeakyRelu(alpha) => {
                let a = T::from_f64(alpha);
                Ok(self.unary(
                    input,
                    move |v| if v >= T::zero() { v } else { a * v },
                    Op::LeakyRelu(input, a),
                ))
            }
            Activation::Tanh => Ok(self.unary(input, |v| v.tanh(), Op::Tanh(input))),
            Activation::Sigmoid => Ok(self.unary(input, sigmoid, Op::Sigmoid(input))),
            Activation::Softmax => self.softmax(input),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(alpha))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis_split("softmax", input)?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            softmax_row(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::Softmax(input)))
    }

    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let (rows, cols) = self.last_axis_split("log_softmax", input)?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::LogSoftmax(input)))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`;
    /// `logits` is `[B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        self.expect_rank(OP, logits, 2)?;
        let (b, c) = (self.shape(logits)[0], self.shape(logits)[1]);
        if labels.len() != b {
            return Err(TensorError::dim(OP, "batch", b, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::dim(OP, "class", c, bad));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            total += log_sum_exp(row) - row[label];
        }
        let value = Tensor::scalar(total / T::from_f64(b as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise and reduction ops
    // ------------------------------------------------------------------

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(input).map(f);
        let rg = self.rg(input);
        self.push(value, rg, op)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.exp(), Op::Exp(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary(x, |v| v * v, Op::Square(x)))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through only inside the
    /// interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::config("clamp", format!("lo {lo} > hi {hi}")));
        }
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        Ok(self.unary(x, move |v| v.max(lo).min(hi), Op::Clamp { input: x, lo, hi }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        Ok(self.unary(x, move |v| v * f, Op::Scale(x, f)))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let o = T::from_f64(offset);
        Ok(self.unary(x, move |v| v + o, Op::AddScalar(x)))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.expect_same_shape(op_name, a, b)?;
        let (xa, xb) = (self.value(a), self.value(b));
        let data = xa.data().iter().zip(xb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(xa.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ------------------------------------------------------------------
    // Shape ops
    // ------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Collapses every axis after the first: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = *shape.first().unwrap_or(&1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    /// Concatenates along axis 1. All inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::config(OP, "no inputs"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                got: base,
            });
        }
        let inner: usize = base[2..].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(TensorError::Rank {
                    op: OP,
                    expected: base.len(),
                    got: s.to_vec(),
                });
            }
            if s[0] != base[0] {
                return Err(TensorError::dim(OP, "batch", base[0], s[0]));
            }
            if s[2..] != base[2..] {
                return Err(TensorError::dim(OP, "spatial", inner, s[2..].iter().product()));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let n = base[0];
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[b * wd * inner..(b + 1) * wd * inner]);
            }
        }
        let mut shape = base;
        shape[1] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
        ))
    }

    /// Slice `[start, start + len)` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "narrow";
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                got: shape,
            });
        }
        if start + len > shape[1] {
            return Err(TensorError::dim(OP, "axis1", shape[1], start + len));
        }
        let inner: usize = shape[2..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for b in 0..shape[0] {
            let row = b * shape[1] * inner;
            out.extend_from_slice(&d[row + start * inner..row + (start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[1] = len;
        let rg = self.rg(x);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, rg, Op::Narrow { input: x, start }))
    }

    /// Replicates a `[B, C]` tensor over an `h × w` grid: `[B, C, h, w]`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.expect_rank("broadcast_spatial", x, 2)?;
        let (b, c) = (self.shape(x)[0], self.shape(x)[1]);
        let hw = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * hw);
        for &v in d {
            out.extend(std::iter::repeat_n(v, hw));
        }
        let rg = self.rg(x);
        let value = Tensor::new([b, c, h, w], out)?;
        Ok(self.push(value, rg, Op::BroadcastSpatial(x)))
    }

    fn last_axis_split(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        let cols = *shape.last().ok_or_else(|| TensorError::Rank {
            op,
            expected: 1,
            got: Vec::new(),
        })?;
        Ok((self.value(x).numel() / cols.max(1), cols))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// Intermediate gradients are recomputed on each call; gradients on leaves
    /// accumulate across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += T::one(),
            slot @ None => *slot = Some(vec![T::one()]),
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes: &[Node<T>] = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels,
            } => {
                let cout = *out_channels;
                let hw = geom.col_cols();
                let batch = g.len() / (cout * hw);
                let ilen = geom.image_len();
                if let Some(b) = bias.and_then(|b| acc(grads, nodes, b)) {
                    channel_sums(g, cout, hw, b);
                }
                if let Some(dw) = acc(grads, nodes, *weight) {
                    let x = val(*input);
                    let mut cols = vec![T::zero(); geom.col_rows() * hw];
                    for b in 0..batch {
                        im2col(&x[b * ilen..(b + 1) * ilen], geom, &mut cols);
                        let dy = &g[b * cout * hw..(b + 1) * cout * hw];
                        gemm(cout, hw, geom.col_rows(), dy, false, &cols, true, dw, true);
                    }
                }
                let w = val(*weight);
                if let Some(dx) = acc(grads, nodes, *input) {
                    let mut dcols = vec![T::zero(); geom.col_rows() * hw];
                    for b in 0..batch {
                        let dy = &g[b * cout * hw..(b + 1) * cout * hw];
                        gemm(geom.col_rows(), cout, hw, w, true, dy, false, &mut dcols, false);
                        col2im(&dcols, geom, &mut dx[b * ilen..(b + 1) * ilen]);
                    }
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_channels,
            } => {
                let cin = *in_channels;
                let in_hw = geom.col_cols();
                let olen = geom.image_len();
                let batch = g.len() / olen;
                if let Some(b) = bias.and_then(|b| acc(grads, nodes, b)) {
                    channel_sums(g, geom.channels, geom.height * geom.width, b);
                }
                let need_w = nodes[weight.0].requires_grad;
                let need_x = nodes[input.0].requires_grad;
                if !(need_w || need_x) {
                    return;
                }
                let mut dcols_all = Vec::with_capacity(batch);
                for b in 0..batch {
                    let mut dcols = vec![T::zero(); geom.col_rows() * in_hw];
                    im2col(&g[b * olen..(b + 1) * olen], geom, &mut dcols);
                    dcols_all.push(dcols);
                }
                if let Some(dw) = acc(grads, nodes, *weight) {
                    let x = val(*input);
                    for (b, dcols) in dcols_all.iter().enumerate() {
                        let xb = &x[b * cin * in_hw..(b + 1) * cin * in_hw];
                        gemm(cin, in_hw, geom.col_rows(), xb, false, dcols, true, dw, true);
                    }
                }
                let w = val(*weight);
                if let Some(dx) = acc(grads, nodes, *input) {
                    for (b, dcols) in dcols_all.iter().enumerate() {
                        let dxb = &mut dx[b * cin * in_hw..(b + 1) * cin * in_hw];
                        gemm(cin, geom.col_rows(), in_hw, w, false, dcols, false, dxb, true);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = nodes[input.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = T::from_f64((n * inner) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for k in base..base + inner {
                            sum_dy[ch] += g[k];
                            sum_dy_xhat[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if let Some(dg) = acc(grads, nodes, *gamma) {
                    dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &s)| *d += s);
                }
                if let Some(db) = acc(grads, nodes, *beta) {
                    db.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s);
                }
                let gm = nodes[gamma.0].value.data();
                if let Some(dx) = acc(grads, nodes, *input) {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let scale = gm[ch] * inv_std[ch];
                            for k in base..base + inner {
                                dx[k] += if *train {
                                    scale / m
                                        * (m * g[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let xs = nodes[input.0].value.shape();
                let (b, f) = (xs[0], xs[1]);
                let fo = nodes[weight.0].value.shape()[1];
                if let Some(db) = bias.and_then(|v| acc(grads, nodes, v)) {
                    for row in g.chunks(fo) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                }
                if let Some(dw) = acc(grads, nodes, *weight) {
                    gemm(f, b, fo, val(*input), true, g, false, dw, true);
                }
                let w = val(*weight);
                if let Some(dx) = acc(grads, nodes, *input) {
                    gemm(b, fo, f, g, false, w, true, dx, true);
                }
            }
            Op::Relu(x) => elementwise_back(grads, nodes, *x, g, |xi, _| {
                if xi > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::LeakyRelu(x, a) => {
                let a = *a;
                elementwise_back(grads, nodes, *x, g, move |xi, _| {
                    if xi >= T::zero() {
                        T::one()
                    } else {
                        a
                    }
                })
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                with_output(grads, nodes, *x, g, y, |_, yi| T::one() - yi * yi)
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                with_output(grads, nodes, *x, g, y, |_, yi| yi * (T::one() - yi))
            }
            Op::Exp(x) => {
                let y = node.value.data();
                with_output(grads, nodes, *x, g, y, |_, yi| yi)
            }
            Op::Log(x) => elementwise_back(grads, nodes, *x, g, |xi, _| T::one() / xi),
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                elementwise_back(grads, nodes, *x, g, move |xi, _| two * xi)
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                elementwise_back(grads, nodes, *input, g, move |xi, _| {
                    if xi >= lo && xi <= hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Scale(x, f) => {
                let f = *f;
                elementwise_back(grads, nodes, *x, g, move |_, _| f)
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                if let Some(dx) = acc(grads, nodes, *x) {
                    for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap_or(&1);
                if let Some(dx) = acc(grads, nodes, *x) {
                    for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let total: T = gr.iter().copied().sum();
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gi - yi.exp() * total;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len().max(1);
                let scale = g[0] / T::from_f64(labels.len() as f64);
                if let Some(dx) = acc(grads, nodes, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == label { T::one() } else { T::zero() };
                            dx[r * c + k] += scale * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = acc(grads, nodes, v) {
                        d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi);
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                if let Some(d) = acc(grads, nodes, *a) {
                    for ((d, &gi), &o) in d.iter_mut().zip(g).zip(xb) {
                        *d += gi * o;
                    }
                }
                if let Some(d) = acc(grads, nodes, *b) {
                    for ((d, &gi), &o) in d.iter_mut().zip(g).zip(xa) {
                        *d += gi * o;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Concat { inputs, widths } => {
                let shape = node.value.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &wd) in inputs.iter().zip(widths) {
                    if let Some(dx) = acc(grads, nodes, v) {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * inner..(b * total + offset + wd) * inner];
                            let dst = &mut dx[b * wd * inner..(b + 1) * wd * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += wd;
                }
            }
            Op::Narrow { input, start } => {
                let ishape = nodes[input.0].value.shape();
                let (n, full) = (ishape[0], ishape[1]);
                let inner: usize = ishape[2..].iter().product();
                let len = node.value.shape()[1];
                if let Some(dx) = acc(grads, nodes, *input) {
                    for b in 0..n {
                        let dst = &mut dx[(b * full + start) * inner..(b * full + start + len) * inner];
                        let src = &g[b * len * inner..(b + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::BroadcastSpatial(x) => {
                let hw = node.value.shape()[2] * node.value.shape()[3];
                if let Some(dx) = acc(grads, nodes, *x) {
                    for (d, chunk) in dx.iter_mut().zip(g.chunks(hw)) {
                        *d += chunk.iter().copied().sum::<T>();
                    }
                }
            }
        }
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], hw: usize) {
    for (plane, &b) in y.chunks_mut(hw).zip(bias) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

/// Accumulates per-channel sums of an `[N, C, hw]` gradient into `out`.
fn channel_sums<T: Scalar>(g: &[T], channels: usize, hw: usize, out: &mut [T]) {
    for (i, plane) in g.chunks(hw).enumerate() {
        out[i % channels] += plane.iter().copied().sum::<T>();
    }
}

fn acc<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// `dx += g · f(x, y)` for an elementwise op whose local derivative needs
/// only the input.
fn elementwise_back<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    g: &[T],
    f: impl Fn(T, T) -> T,
) {
    if let Some(dx) = acc(grads, nodes, x) {
        let xs = nodes[x.0].value.data();
        for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xs) {
            *d += gi * f(xi, T::zero());
        }
    }
}

/// Like [`elementwise_back`] but the derivative is expressed through the
/// op's output `y`.
fn with_output<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    x: Var,
    g: &[T],
    y: &[T],
    f: impl Fn(T, T) -> T,
) {
    if let Some(dx) = acc(grads, nodes, x) {
        for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
            *d += gi * f(T::zero(), yi);
        }
    }
}
