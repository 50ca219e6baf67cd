use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.with_data(x.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

/// Passes the cotangent where `saved_x > 0`; the subgradient at 0 is 0.
pub fn relu_vjp(grad_out: &Tensor, saved_x: &Tensor) -> Result<Tensor> {
    same_shape("relu_vjp", grad_out, saved_x)?;
    let data = grad_out
        .data()
        .iter()
        .zip(saved_x.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    grad_out.with_data(data)
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Tensor {
    map(x, softplus_scalar)
}

pub fn softplus_vjp(grad_out: &Tensor, saved_x: &Tensor) -> Result<Tensor> {
    same_shape("softplus_vjp", grad_out, saved_x)?;
    let data = grad_out
        .data()
        .iter()
        .zip(saved_x.data())
        .map(|(&g, &x)| g * sigmoid(x))
        .collect();
    grad_out.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values() {
        assert_eq!(relu(&t(&[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let g = relu_vjp(&t(&[5.0, 5.0]), &t(&[-1.0, 2.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
        assert_eq!(relu_vjp(&t(&[1.0]), &t(&[0.0])).unwrap().data(), &[0.0]);
    }

    #[test]
    fn softplus_values() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus_scalar(100.0), 100.0);
        assert!(softplus_scalar(-100.0) > 0.0);
        assert!(softplus_scalar(1000.0).is_finite());
    }

    #[test]
    fn softplus_derivative_matches_central_difference() {
        let h = 1e-5;
        for &x in &[-29.0, -3.2, -0.4, 0.0, 0.7, 2.5, 12.0, 29.5] {
            let fd = (softplus_scalar(x + h) - softplus_scalar(x - h)) / (2.0 * h);
            let an = sigmoid(x);
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            assert!(rel <= 1e-6, "x={x} rel={rel}");
        }
    }

    #[test]
    fn vjp_shape_mismatch() {
        assert!(relu_vjp(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
        assert!(softplus_vjp(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    proptest! {
        #[test]
        fn relu_split_identity(v in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let x = t(&v);
            let neg = map(&x, |a| -a);
            let lhs = relu(&x);
            let rhs = relu(&neg);
            for ((a, b), c) in lhs.data().iter().zip(rhs.data()).zip(&v) {
                prop_assert_eq!(a + b, c.abs());
            }
        }
    }
}
