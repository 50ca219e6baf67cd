use super::Tensor;
use crate::error::{Error, Result};

/// Largest im2col buffer (in elements) built at once; bigger outputs are
/// processed in slabs of output depth.
const COL_BUDGET: usize = 1 << 21;

/// Geometry of one valid, stride-1 convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(kernel: [usize; 3], in_channels: usize, out_channels: usize) -> Result<Self> {
        let spec = ConvSpec {
            kernel,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Invalid(format!(
                "kernel extents must be odd, got {:?}",
                self.kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Invalid("channel counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = input[a].checked_sub(self.kernel[a])? + 1;
        }
        Some(out)
    }
}

/// Gradients of `conv3d` with respect to its three arguments.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

struct Geometry {
    cin: usize,
    cout: usize,
    din: [usize; 3],
    kernel: [usize; 3],
    dout: [usize; 3],
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.dout[1] * self.dout[2]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    /// Output-depth slab length that keeps the im2col buffer under budget.
    fn slab(&self) -> usize {
        (COL_BUDGET / (self.k() * self.plane()).max(1)).clamp(1, self.dout[0].max(1))
    }
}

fn geometry(op: &'static str, input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Geometry> {
    let [cin, d, h, w] = input.dims4(op)?;
    let [cout, wcin, kd, kh, kw] = match weights.shape()[..] {
        [a, b, c, d, e] => [a, b, c, d, e],
        _ => {
            return Err(Error::shape(
                op,
                format!("weights must be [C_out, C_in, kd, kh, kw], got {:?}", weights.shape()),
            ))
        }
    };
    if wcin != cin {
        return Err(Error::shape(
            op,
            format!("channel axis: input has {cin} channels, weights expect {wcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            op,
            format!("bias axis: expected [{cout}], got {:?}", bias.shape()),
        ));
    }
    let spec = ConvSpec::new([kd, kh, kw], cin, cout)?;
    let names = ["depth", "height", "width"];
    let din = [d, h, w];
    for a in 0..3 {
        if din[a] < spec.kernel[a] {
            return Err(Error::shape(
                op,
                format!(
                    "{} axis: input extent {} is smaller than kernel extent {}",
                    names[a], din[a], spec.kernel[a]
                ),
            ));
        }
    }
    Ok(Geometry {
        cin,
        cout,
        din,
        kernel: spec.kernel,
        dout: spec.output_dims(din).expect("checked above"),
    })
}

/// Fills `col[k, p]` for output depths `z0..z0+nz`.
fn im2col(g: &Geometry, input: &[f64], z0: usize, nz: usize, col: &mut [f64]) {
    let [_, h, w] = g.din;
    let [kd, kh, kw] = g.kernel;
    let [_, ho, wo] = g.dout;
    let pc = nz * ho * wo;
    let vol = g.din.iter().product::<usize>();
    let mut k = 0;
    for c in 0..g.cin {
        let src = &input[c * vol..(c + 1) * vol];
        for a in 0..kd {
            for b in 0..kh {
                for d in 0..kw {
                    let row = &mut col[k * pc..(k + 1) * pc];
                    for z in 0..nz {
                        for y in 0..ho {
                            let s = ((z0 + z + a) * h + y + b) * w + d;
                            let t = (z * ho + y) * wo;
                            row[t..t + wo].copy_from_slice(&src[s..s + wo]);
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

/// Scatters-adds `col[k, p]` back onto the input gradient.
fn col2im(g: &Geometry, col: &[f64], z0: usize, nz: usize, grad_in: &mut [f64]) {
    let [_, h, w] = g.din;
    let [kd, kh, kw] = g.kernel;
    let [_, ho, wo] = g.dout;
    let pc = nz * ho * wo;
    let vol = g.din.iter().product::<usize>();
    let mut k = 0;
    for c in 0..g.cin {
        let dst = &mut grad_in[c * vol..(c + 1) * vol];
        for a in 0..kd {
            for b in 0..kh {
                for d in 0..kw {
                    let row = &col[k * pc..(k + 1) * pc];
                    for z in 0..nz {
                        for y in 0..ho {
                            let s = ((z0 + z + a) * h + y + b) * w + d;
                            let t = (z * ho + y) * wo;
                            for (o, v) in dst[s..s + wo].iter_mut().zip(&row[t..t + wo]) {
                                *o += v;
                            }
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

/// `C = alpha * A·B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.0.len() >= extent(m, k, a.1, a.2));
    assert!(b.0.len() >= extent(k, n, b.1, b.2));
    assert!(c.0.len() >= extent(m, n, c.1, c.2));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

/// Valid, stride-1 3D cross-correlation:
/// `out[o, z, y, x] = bias[o] + Σ input[c, z+a, y+b, x+d] · weights[o, c, a, b, d]`.
pub fn conv3d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = geometry("conv3d", input, weights, bias)?;
    input.validate("conv3d input")?;
    let plane = g.plane();
    let per_out = g.dout[0] * plane;
    let mut out = vec![0.0; g.cout * per_out];
    for (o, chunk) in out.chunks_mut(per_out.max(1)).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias.data()[o]);
    }
    let k = g.k();
    let slab = g.slab();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * slab * plane]
    };
    let mut z0 = 0;
    while z0 < g.dout[0] {
        let nz = slab.min(g.dout[0] - z0);
        let pc = nz * plane;
        let c_block = &mut out[z0 * plane..];
        if g.is_pointwise() {
            let vol = g.din.iter().product::<usize>();
            gemm(
                g.cout,
                k,
                pc,
                (weights.data(), k as isize, 1),
                (&input.data()[z0 * plane..], vol as isize, 1),
                1.0,
                (c_block, per_out as isize, 1),
            );
        } else {
            im2col(&g, input.data(), z0, nz, &mut col[..k * pc]);
            gemm(
                g.cout,
                k,
                pc,
                (weights.data(), k as isize, 1),
                (&col[..k * pc], pc as isize, 1),
                1.0,
                (c_block, per_out as isize, 1),
            );
        }
        z0 += nz;
    }
    Tensor::new(vec![g.cout, g.dout[0], g.dout[1], g.dout[2]], out)
}

/// Vector-Jacobian products of `conv3d` for the cotangent `grad_out`.
pub fn conv3d_vjp(grad_out: &Tensor, saved_input: &Tensor, weights: &Tensor) -> Result<ConvGrads> {
    let cout = weights.shape().first().copied().unwrap_or(0);
    let bias = Tensor::zeros(&[cout]);
    let g = geometry("conv3d_vjp", saved_input, weights, &bias)?;
    let expected = [g.cout, g.dout[0], g.dout[1], g.dout[2]];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv3d_vjp",
            format!("grad_out is {:?}, conv output is {:?}", grad_out.shape(), expected),
        ));
    }
    let plane = g.plane();
    let per_out = g.dout[0] * plane;
    let k = g.k();
    let go = grad_out.data();

    let grad_bias: Vec<f64> = (0..g.cout)
        .map(|o| go[o * per_out..(o + 1) * per_out].iter().sum())
        .collect();
    let mut grad_w = vec![0.0; g.cout * k];
    let mut grad_in = vec![0.0; saved_input.len()];

    let slab = g.slab();
    let (mut col, mut gcol) = if g.is_pointwise() {
        (Vec::new(), Vec::new())
    } else {
        (vec![0.0; k * slab * plane], vec![0.0; k * slab * plane])
    };
    let vol = g.din.iter().product::<usize>();
    let mut z0 = 0;
    while z0 < g.dout[0] {
        let nz = slab.min(g.dout[0] - z0);
        let pc = nz * plane;
        let g_block = &go[z0 * plane..];
        if g.is_pointwise() {
            // grad_w[o, c] += Σ_p g[o, p] · x[c, p]
            gemm(
                g.cout,
                pc,
                k,
                (g_block, per_out as isize, 1),
                (&saved_input.data()[z0 * plane..], 1, vol as isize),
                1.0,
                (&mut grad_w, k as isize, 1),
            );
            // grad_x[c, p] = Σ_o w[o, c] · g[o, p]
            gemm(
                k,
                g.cout,
                pc,
                (weights.data(), 1, k as isize),
                (g_block, per_out as isize, 1),
                0.0,
                (&mut grad_in[z0 * plane..], vol as isize, 1),
            );
        } else {
            let col = &mut col[..k * pc];
            let gcol = &mut gcol[..k * pc];
            im2col(&g, saved_input.data(), z0, nz, col);
            gemm(
                g.cout,
                pc,
                k,
                (g_block, per_out as isize, 1),
                (col, 1, pc as isize),
                1.0,
                (&mut grad_w, k as isize, 1),
            );
            gemm(
                k,
                g.cout,
                pc,
                (weights.data(), 1, k as isize),
                (g_block, per_out as isize, 1),
                0.0,
                (gcol, pc as isize, 1),
            );
            col2im(&g, gcol, z0, nz, &mut grad_in);
        }
        z0 += nz;
    }

    Ok(ConvGrads {
        input: saved_input.with_data(grad_in)?,
        weights: weights.with_data(grad_w)?,
        bias: Tensor::new(vec![g.cout], grad_bias)?,
    })
}
