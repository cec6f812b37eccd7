//! Dense layer forward pass and weight initialization.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn apply<S: Scalar>(self, pre: &Tensor<S>) -> Tensor<S> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Tanh => pre.map(|v| v.tanh()),
            Activation::Relu => pre.map(|v| if v > S::zero() { v } else { S::zero() }),
            Activation::Sigmoid => pre.map(sigmoid),
            Activation::Softmax => softmax_rows(pre),
        }
    }
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    let one = S::one();
    if v >= S::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

/// activation(input · W + b). Bias length must equal W's column count.
pub fn forward_layer<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    activation: Activation,
) -> Result<Tensor<S>> {
    if !input.is_finite_all() {
        return Err(Error::Numeric("non-finite layer input".into()));
    }
    let (_, cols) = weights.mat_dims();
    if bias.len() != cols {
        return Err(Error::Shape(format!(
            "bias length {} vs {cols} output units",
            bias.len()
        )));
    }
    let mut pre = matmul(input, weights)?;
    let (n, m) = pre.mat_dims();
    for i in 0..n {
        let row = &mut pre.as_mut_slice()[i * m..(i + 1) * m];
        for (v, &b) in row.iter_mut().zip(bias.as_slice()) {
            *v += b;
        }
    }
    Ok(activation.apply(&pre))
}

/// Uniform bound for a weight matrix feeding the given activation:
/// sqrt(6/(fan_in+fan_out)) in general, scaled by sqrt(2) with fan_in only
/// for rectified units.
pub fn init_bound(fan_in: usize, fan_out: usize, activation: Activation) -> f64 {
    match activation {
        Activation::Relu => (6.0 / fan_in as f64).sqrt() * std::f64::consts::SQRT_2,
        _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    }
}

/// Weight matrix drawn uniformly in ±init_bound, row-major draw order.
/// Draws happen in f64 so every scalar type sees the same sequence.
pub fn init_weight<S: Scalar>(
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    rng: &mut ChaCha12Rng,
) -> Tensor<S> {
    let bound = init_bound(fan_in, fan_out, activation);
    let data = (0..fan_in * fan_out)
        .map(|_| S::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent dims")
}
