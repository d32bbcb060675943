use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::real::Real;
use crate::rng::Rng;

fn uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    // He-uniform bound for ReLU stacks.
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Dense layer `y = x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self { weight: uniform(vec![input, output], input, rng), bias: Tensor::zeros(vec![output]) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(vec![input, output]), bias: Tensor::zeros(vec![output]) }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (Var, Var) {
        (tape.leaf(self.weight.clone(), trainable), tape.leaf(self.bias.clone(), trainable))
    }

    pub fn forward(tape: &mut Tape<T>, bound: (Var, Var), x: Var) -> crate::autodiff::Result<Var> {
        let y = tape.matmul(x, bound.0)?;
        tape.channel_bias(y, bound.1)
    }
}

/// Cubic 3D convolution with bias, weight `[out, in, k, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn init(input: usize, output: usize, k: usize, rng: &mut Rng) -> Self {
        Self { weight: uniform(vec![output, input, k, k, k], input * k * k * k, rng), bias: Tensor::zeros(vec![output]) }
    }

    pub fn zeros(input: usize, output: usize, k: usize) -> Self {
        Self { weight: Tensor::zeros(vec![output, input, k, k, k]), bias: Tensor::zeros(vec![output]) }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (Var, Var) {
        (tape.leaf(self.weight.clone(), trainable), tape.leaf(self.bias.clone(), trainable))
    }

    pub fn forward(tape: &mut Tape<T>, bound: (Var, Var), x: Var, stride: usize, pad: usize) -> crate::autodiff::Result<Var> {
        let y = tape.conv3d(x, bound.0, stride, pad)?;
        tape.channel_bias(y, bound.1)
    }
}
