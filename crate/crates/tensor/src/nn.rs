//! Parameterized layers over a [`ParamStore`].
//!
//! Layers only hold [`ParamId`]s; values live in the store so that a model can
//! be run at either precision and serialized by name.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Activation, Graph, NormStats, StatUpdate, Var};
use crate::params::{normal_tensor, ParamId, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// How a forward pass treats parameters and normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch norm uses batch statistics (and records running-stat updates).
    pub train: bool,
    /// Parameters are recorded as gradient-requiring leaves.
    pub grad: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        grad: true,
    };
    /// Batch statistics, but parameters held constant (e.g. the frozen side of
    /// an adversarial step).
    pub const FROZEN: Mode = Mode {
        train: true,
        grad: false,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        grad: false,
    };
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_trainable(
            format!("{name}.weight"),
            normal_tensor([in_features, out_features], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add_trainable(format!("{name}.bias"), Tensor::zeros([out_features])));
        Dense {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight, mode.grad);
        let b = self.bias.map(|b| g.param(store, b, mode.grad));
        g.dense(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_trainable(
            format!("{name}.weight"),
            normal_tensor([out_channels, in_channels, kernel, kernel], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add_trainable(format!("{name}.bias"), Tensor::zeros([out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight, mode.grad);
        let b = self.bias.map(|b| g.param(store, b, mode.grad));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_trainable(
            format!("{name}.weight"),
            normal_tensor([in_channels, out_channels, kernel, kernel], INIT_STD, rng),
        );
        let bias = bias.then(|| store.add_trainable(format!("{name}.bias"), Tensor::zeros([out_channels])));
        ConvTranspose2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight, mode.grad);
        let b = self.bias.map(|b| g.param(store, b, mode.grad));
        g.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add_trainable(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add_trainable(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma, mode.grad);
        let beta = g.param(store, self.beta, mode.grad);
        if mode.train {
            let (y, stats) = g.batch_norm(x, gamma, beta, NormStats::Batch, self.eps)?;
            if let Some(stats) = stats {
                g.record_stats(StatUpdate {
                    store_uid: store.uid(),
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
            }
            Ok(y)
        } else {
            let stats = NormStats::Running {
                mean: store.value(self.running_mean).data(),
                var: store.value(self.running_var).data(),
            };
            Ok(g.batch_norm(x, gamma, beta, stats, self.eps)?.0)
        }
    }
}

/// Convolution-like layer followed by optional batch norm and an activation.
#[derive(Clone, Debug)]
pub struct Block<L> {
    pub layer: L,
    pub norm: Option<BatchNorm>,
    pub activation: Option<Activation>,
}

pub trait Layer {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var>;
}

impl Layer for Dense {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward(g, store, x, mode)
    }
}

impl Layer for Conv2d {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward(g, store, x, mode)
    }
}

impl Layer for ConvTranspose2d {
    fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.forward(g, store, x, mode)
    }
}

impl<L: Layer> Block<L> {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut y = self.layer.apply(g, store, x, mode)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(g, store, y, mode)?;
        }
        if let Some(act) = self.activation {
            y = g.activation(y, act)?;
        }
        Ok(y)
    }
}
