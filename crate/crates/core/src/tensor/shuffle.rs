use super::Tensor;
use crate::error::{Error, Result};

/// Input channel feeding output position `(ch, i, j, k)`.
#[inline]
fn source_channel(ch: usize, i: usize, j: usize, k: usize, r: usize) -> usize {
    ch * r * r * r + i % r + r * (j % r) + r * r * (k % r)
}

/// Periodic shuffle `[r³·c, D, H, W] → [c, rD, rH, rW]`:
/// `out[ch, i, j, k] = F[ch·r³ + i%r + r·(j%r) + r²·(k%r), i/r, j/r, k/r]`.
pub fn shuffle3d(features: &Tensor, r: usize, c: usize) -> Result<Tensor> {
    let [cin, d, h, w] = features.dims4("shuffle3d")?;
    if r == 0 || c == 0 || cin != r * r * r * c {
        return Err(Error::shape(
            "shuffle3d",
            format!("{cin} input channels is not r^3*c = {}^3*{}", r, c),
        ));
    }
    let (od, oh, ow) = (d * r, h * r, w * r);
    let src = features.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for i in 0..od {
            for j in 0..oh {
                for k in 0..ow {
                    let s = source_channel(ch, i, j, k, r);
                    out.push(src[((s * d + i / r) * h + j / r) * w + k / r]);
                }
            }
        }
    }
    Tensor::new(vec![c, od, oh, ow], out)
}

/// Inverse of [`shuffle3d`].
pub fn unshuffle3d(hr: &Tensor, r: usize) -> Result<Tensor> {
    let [c, od, oh, ow] = hr.dims4("unshuffle3d")?;
    if r == 0 || od % r != 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::shape(
            "unshuffle3d",
            format!("spatial dims {:?} not divisible by r={r}", [od, oh, ow]),
        ));
    }
    let (d, h, w) = (od / r, oh / r, ow / r);
    let mut out = vec![0.0; hr.len()];
    let src = hr.data();
    let mut idx = 0;
    for ch in 0..c {
        for i in 0..od {
            for j in 0..oh {
                for k in 0..ow {
                    let s = source_channel(ch, i, j, k, r);
                    out[((s * d + i / r) * h + j / r) * w + k / r] = src[idx];
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(vec![c * r * r * r, d, h, w], out)
}

/// The shuffle is a permutation, so its vector-Jacobian product is the
/// inverse permutation applied to the cotangent.
pub fn shuffle3d_vjp(grad_out: &Tensor, r: usize) -> Result<Tensor> {
    unshuffle3d(grad_out, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn r1_is_identity() {
        let mut g = rng::stream(1, &[]);
        let f = Tensor::from_fn(&[3, 2, 3, 4], |_| rng::normal(&mut g));
        assert_eq!(shuffle3d(&f, 1, 3).unwrap(), f);
    }

    #[test]
    fn r2_eight_channel_enumeration() {
        let f = Tensor::new(vec![8, 1, 1, 1], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = shuffle3d(&f, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        // (i, j, k) → i + 2j + 4k, enumerated by hand
        let expected = [
            ((0, 0, 0), 0.0),
            ((1, 0, 0), 1.0),
            ((0, 1, 0), 2.0),
            ((1, 1, 0), 3.0),
            ((0, 0, 1), 4.0),
            ((1, 0, 1), 5.0),
            ((0, 1, 1), 6.0),
            ((1, 1, 1), 7.0),
        ];
        for ((i, j, k), v) in expected {
            assert_eq!(y.data()[(i * 2 + j) * 2 + k], v);
        }
    }

    #[test]
    fn round_trip_and_multiset() {
        for r in [2, 3] {
            let mut g = rng::stream(r as u64, &[]);
            let f = Tensor::from_fn(&[2 * r * r * r, 2, 3, 2], |_| rng::normal(&mut g));
            let y = shuffle3d(&f, r, 2).unwrap();
            assert_eq!(unshuffle3d(&y, r).unwrap(), f);
            let mut a = f.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn divisibility_error() {
        let f = Tensor::zeros(&[7, 1, 1, 1]);
        assert!(shuffle3d(&f, 2, 1).is_err());
        assert!(unshuffle3d(&Tensor::zeros(&[1, 3, 2, 2]), 2).is_err());
    }
}
