//! Dense float64 tensors and the hand-differentiated operator set used by the
//! networks: valid 3D cross-correlation, ReLU, softplus and the periodic
//! channel-to-space shuffle.

mod activation;
mod conv;
pub mod gradcheck;
mod shuffle;

pub use activation::{relu, relu_vjp, sigmoid, softplus, softplus_scalar, softplus_vjp};
pub use conv::{conv3d, conv3d_vjp, ConvGrads, ConvSpec};
pub use shuffle::{shuffle3d, shuffle3d_vjp, unshuffle3d};

use crate::error::{Error, Result};

/// Row-major (last index fastest) array of `f64` with an optional gradient
/// buffer of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} elements, data has {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Returns a copy with the same shape and new contents.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Tensor::new(self.shape.clone(), data)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Checks that every value (and gradient, if allocated) is finite.
    pub fn validate(&self, context: &str) -> Result<()> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: context.to_string(),
                index,
            });
        }
        if let Some(g) = &self.grad {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("{context} (gradient)"),
                    index,
                });
            }
        }
        Ok(())
    }

    /// Interprets the tensor as `[C, D, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [c, d, h, w] => Ok([c, d, h, w]),
            _ => Err(Error::shape(
                op,
                format!("expected a [C, D, H, W] tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
