//! Block constructors shared by the models.

use cvaegan_tensor::{Activation, BatchNorm, Block, Conv2d, ConvTranspose2d, ParamStore, Scalar};
use rand::Rng;

pub const LEAK: f64 = 0.2;

/// 5×5 stride-2 convolution, halving the spatial extent, with batch norm.
pub fn down<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    activation: Activation,
    rng: &mut R,
) -> Block<Conv2d> {
    Block {
        layer: Conv2d::new(store, name, cin, cout, 5, 2, 2, false, rng),
        norm: Some(BatchNorm::new(store, &format!("{name}.bn"), cout)),
        activation: Some(activation),
    }
}

/// 5×5 stride-2 transposed convolution, doubling the spatial extent. The
/// output layer has a bias, no batch norm and a tanh.
pub fn up<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    output: bool,
    rng: &mut R,
) -> Block<ConvTranspose2d> {
    Block {
        layer: ConvTranspose2d::new(store, name, cin, cout, 5, 2, 2, 1, output, rng),
        norm: (!output).then(|| BatchNorm::new(store, &format!("{name}.bn"), cout)),
        activation: Some(if output { Activation::Tanh } else { Activation::Relu }),
    }
}
