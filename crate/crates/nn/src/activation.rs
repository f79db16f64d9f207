//! Elementwise nonlinearities.

use crate::error::{shape_err, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f64 = 0.01;

pub fn lrelu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::lit(slope);
    x.map(|v| if v >= T::zero() { v } else { s * v })
}

pub fn lrelu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
    same_shape("lrelu backward", x, grad)?;
    let s = T::lit(slope);
    let data = x.data().iter().zip(grad.data()).map(|(&v, &g)| if v >= T::zero() { g } else { s * g }).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Backward from the sigmoid *output* `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sigmoid backward", y, grad)?;
    let data = y.data().iter().zip(grad.data()).map(|(&v, &g)| g * v * (T::one() - v)).collect();
    Tensor::new(y.shape().to_vec(), data)
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?}", a.shape()), b.shape()));
    }
    Ok(())
}

fn missing(op: &'static str) -> NnError {
    NnError::Invalid {
        op,
        msg: "called before forward".into(),
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<T> {
    pub slope: f64,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Default for LeakyRelu<T> {
    fn default() -> Self {
        LeakyRelu {
            slope: LRELU_SLOPE,
            input: None,
        }
    }
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        lrelu(x, self.slope)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing("LeakyRelu::backward"))?;
        lrelu_backward(&x, grad, self.slope)
    }
}

/// Plain ReLU, only used by the activation ablation of the fusion head.
#[derive(Debug, Clone)]
pub struct Relu<T> {
    inner: LeakyRelu<T>,
}

impl<T: Scalar> Default for Relu<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Relu {
            inner: LeakyRelu { slope: 0.0, input: None },
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.inner.slope = 0.0;
        self.inner.forward(x)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner.backward(grad)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = sigmoid(x);
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing("Sigmoid::backward"))?;
        sigmoid_backward(&y, grad)
    }
}
