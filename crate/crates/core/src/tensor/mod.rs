//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! [`Tensor`] is a row-major n-dimensional array. Differentiable computation
//! is recorded on a [`Tape`]: forward methods execute eagerly and append an
//! operation node; [`Tape::backward`] replays the record in exact reverse
//! order. [`Parameter`] pairs a tensor with an SGD momentum buffer.
//!
//! Everything is double precision. Forward passes validate that outputs are
//! finite; a NaN/Inf anywhere is reported as an error rather than silently
//! propagated into training.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{MapPick, NodeId, Tape};

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use rand::Rng;

/// Dense row-major array of `f64` with an optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    /// Scalar (single element) tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        self.grad = grad;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Errors if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {context}")))
        }
    }
}

/// A trainable tensor plus its SGD momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    tensor: Tensor,
    velocity: Vec<f64>,
}

impl Parameter {
    pub fn new(tensor: Tensor) -> Parameter {
        let n = tensor.numel();
        Parameter {
            tensor: tensor.with_requires_grad(),
            velocity: vec![0.0; n],
        }
    }

    /// Zero-mean Gaussian scaled by sqrt(2 / fan_in), the usual choice for
    /// layers feeding a ReLU. Biases are created separately with zeros.
    pub fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Parameter {
        let std = (2.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * standard_normal(rng)).collect();
        Parameter::new(Tensor::from_vec(shape, data).expect("shape/data agree"))
    }

    /// Zero-mean Gaussian with a fixed standard deviation, for prediction
    /// heads that should start near zero output.
    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Parameter {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * standard_normal(rng)).collect();
        Parameter::new(Tensor::from_vec(shape, data).expect("shape/data agree"))
    }

    pub fn zeros(shape: &[usize]) -> Parameter {
        Parameter::new(Tensor::zeros(shape))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.tensor.numel() {
            return Err(Error::Dim(format!(
                "gradient length {} does not match parameter of {} elements",
                grad.len(),
                self.tensor.numel()
            )));
        }
        self.tensor.set_grad(Some(grad));
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.tensor.set_grad(None);
    }

    /// Adds `grad` into the stored gradient, installing it if absent.
    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        if grad.len() != self.tensor.numel() {
            return Err(Error::Dim(format!(
                "gradient length {} does not match parameter of {} elements",
                grad.len(),
                self.tensor.numel()
            )));
        }
        match &mut self.tensor.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => self.tensor.grad = Some(grad.to_vec()),
        }
        Ok(())
    }
}

/// One SGD update with momentum and L2 weight decay:
///
/// `v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v`
///
/// Gradients are cleared afterwards. Every parameter must carry a gradient,
/// otherwise the step is refused before touching any weight.
pub fn sgd_step<'a, I>(params: I, lr: f64, momentum: f64, weight_decay: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    let params: Vec<&'a mut Parameter> = params.into_iter().collect();
    for (i, p) in params.iter().enumerate() {
        if p.tensor.grad.is_none() {
            return Err(Error::State(format!(
                "sgd_step: parameter {i} has no gradient"
            )));
        }
    }
    for p in params {
        let grad = p.tensor.grad.take().expect("checked above");
        for ((v, w), g) in p
            .velocity
            .iter_mut()
            .zip(p.tensor.data.iter_mut())
            .zip(&grad)
        {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Numerically stable softmax of one row (max subtraction).
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Times the raw convolution kernels; only exists for the bench example.
#[doc(hidden)]
#[allow(clippy::too_many_arguments)]
pub fn bench_conv_raw(
    input: &[f64],
    dims: (usize, usize, usize),
    kern: &[f64],
    kdims: (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    reps: usize,
) -> (f64, f64, f64) {
    use std::time::Instant;
    let mut sink = 0.0;
    let t0 = Instant::now();
    let mut out = Vec::new();
    for _ in 0..reps {
        out = kernels::conv2d_forward(input, dims, kern, kdims, bias, stride);
        sink += out[0];
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64 * 1e3;
    let d_out: Vec<f64> = out.iter().map(|v| v * 0.5).collect();
    let t1 = Instant::now();
    for _ in 0..reps {
        let mut d_in = vec![0.0; input.len()];
        let mut d_k = vec![0.0; kern.len()];
        let mut d_b = vec![0.0; bias.len()];
        kernels::conv2d_backward(
            input,
            dims,
            kern,
            kdims,
            stride,
            &d_out,
            Some(&mut d_in),
            &mut d_k,
            &mut d_b,
        );
        sink += d_in[0] + d_k[0] + d_b[0];
    }
    let bwd = t1.elapsed().as_secs_f64() / reps as f64 * 1e3;
    (fwd, bwd, sink)
}
