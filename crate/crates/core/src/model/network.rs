//! Forward and backward passes of one conv→ReLU→conv→ReLU→conv→shuffle stack.

use crate::error::Result;
use crate::tensor::{conv3d, conv3d_vjp, relu, relu_vjp, shuffle3d, shuffle3d_vjp, Tensor};

/// Activations saved for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
}

impl Trace {
    /// Smallest |pre-activation| over both hidden layers.
    pub(crate) fn hidden_margin(&self) -> f64 {
        self.pre1.data().iter().chain(self.pre2.data()).fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Raw (shuffled, pre-link) output of one network on a normalized input.
pub(crate) fn forward(
    weights: [&Tensor; 3],
    biases: [&Tensor; 3],
    x: &Tensor,
    r: usize,
    c: usize,
) -> Result<(Tensor, Trace)> {
    let pre1 = conv3d(x, weights[0], biases[0])?;
    let act1 = relu(&pre1);
    let pre2 = conv3d(&act1, weights[1], biases[1])?;
    let act2 = relu(&pre2);
    let pre3 = conv3d(&act2, weights[2], biases[2])?;
    let out = shuffle3d(&pre3, r, c)?;
    Ok((
        out,
        Trace {
            input: x.clone(),
            pre1,
            act1,
            pre2,
            act2,
        },
    ))
}

/// Gradients `(weight, bias)` per layer for the cotangent of the raw output.
pub(crate) fn backward(
    weights: [&Tensor; 3],
    trace: &Trace,
    grad_out: &Tensor,
    r: usize,
) -> Result<[(Tensor, Tensor); 3]> {
    let g3 = shuffle3d_vjp(grad_out, r)?;
    let l3 = conv3d_vjp(&g3, &trace.act2, weights[2])?;
    let g2 = relu_vjp(&l3.input, &trace.pre2)?;
    let l2 = conv3d_vjp(&g2, &trace.act1, weights[1])?;
    let g1 = relu_vjp(&l2.input, &trace.pre1)?;
    let l1 = conv3d_vjp(&g1, &trace.input, weights[0])?;
    Ok([
        (l1.weights, l1.bias),
        (l2.weights, l2.bias),
        (l3.weights, l3.bias),
    ])
}
