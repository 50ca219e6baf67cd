//! The subpixel network variants: a baseline mean regressor, a
//! heteroscedastic mean/standard-deviation twin, and variational-dropout
//! versions of both whose weights are drawn from a factored Gaussian posterior.

pub mod checkpoint;
mod config;
pub(crate) mod network;
mod params;

pub use config::{ArchConfig, DropoutKind, Variant, HIDDEN, KERNELS, MARGIN, RECEPTIVE_FIELD};
pub use params::{
    init_params, sample_weights, ConvLayer, ModelParams, Network, Normalization, WeightSample,
    INIT_LOG_VAR,
};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus_scalar, Tensor};
use network::Trace;
use params::filter_len;

/// Lower bound on predicted standard deviations, in target units.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Mean patch and, for heteroscedastic variants, per-component standard
/// deviations, both in target units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mu: Tensor,
    pub sigma: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroOutput {
    pub mu: Tensor,
    pub sigma_diag: Tensor,
}

/// `out[c, ...] = t[c, ...] · scale[c] + shift[c]`.
pub(crate) fn affine_channels(t: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    let c = t.shape()[0];
    let per = t.len() / c.max(1);
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i / per;
            v * scale[ch] + shift[ch]
        })
        .collect();
    t.with_data(data).expect("same shape")
}

impl ModelParams {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, d, h, w] = x.dims4("forward")?;
        if c != self.arch.c {
            return Err(Error::shape(
                "forward",
                format!("channel axis: model expects {} channels, input has {c}", self.arch.c),
            ));
        }
        if [d, h, w].iter().any(|&n| n < RECEPTIVE_FIELD) {
            return Err(Error::TooSmall {
                got: [d, h, w],
                need: RECEPTIVE_FIELD,
            });
        }
        x.validate("forward input")
    }

    pub fn normalize_input(&self, x: &Tensor) -> Tensor {
        let n = &self.norm;
        let scale: Vec<f64> = n.input_std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = n.input_mean.iter().zip(&n.input_std).map(|(m, s)| -m / s).collect();
        affine_channels(x, &scale, &shift)
    }

    pub fn normalize_target(&self, y: &Tensor) -> Tensor {
        let n = &self.norm;
        let scale: Vec<f64> = n.target_std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = n.target_mean.iter().zip(&n.target_std).map(|(m, s)| -m / s).collect();
        affine_channels(y, &scale, &shift)
    }

    fn denormalize_mean(&self, mu_n: &Tensor) -> Tensor {
        affine_channels(mu_n, &self.norm.target_std, &self.norm.target_mean)
    }

    fn denormalize_sigma(&self, sigma_n: &Tensor) -> Tensor {
        let zero = vec![0.0; self.arch.c];
        affine_channels(sigma_n, &self.norm.target_std, &zero)
    }
}

/// Network outputs in normalized target units plus what backprop needs.
#[derive(Debug, Clone)]
pub(crate) struct Pass {
    pub mu_n: Tensor,
    pub sigma_n: Option<Tensor>,
    raw_sigma: Option<Tensor>,
    traces: Vec<Trace>,
}

fn concrete_weights<'a>(
    params: &'a ModelParams,
    sample: Option<&'a WeightSample>,
    net: usize,
) -> [&'a Tensor; 3] {
    match sample {
        Some(s) => std::array::from_fn(|l| &s.weights[net][l]),
        None => params.networks()[net].weights(),
    }
}

/// Runs both networks on a normalized input. `sample = None` uses the
/// posterior means.
pub(crate) fn forward_normalized(
    params: &ModelParams,
    xn: &Tensor,
    sample: Option<&WeightSample>,
) -> Result<Pass> {
    let (r, c) = (params.arch.r, params.arch.c);
    let nets = params.networks();
    let (mu_n, t0) = network::forward(concrete_weights(params, sample, 0), nets[0].biases(), xn, r, c)?;
    let mut traces = vec![t0];
    let (sigma_n, raw_sigma) = if nets.len() > 1 {
        let (raw, t1) = network::forward(concrete_weights(params, sample, 1), nets[1].biases(), xn, r, c)?;
        traces.push(t1);
        let per = raw.len() / c;
        let floors: Vec<f64> = params.norm.target_std.iter().map(|s| SIGMA_FLOOR / s).collect();
        let sig = raw.with_data(
            raw.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| softplus_scalar(v) + floors[i / per])
                .collect(),
        )?;
        (Some(sig), Some(raw))
    } else {
        (None, None)
    };
    Ok(Pass {
        mu_n,
        sigma_n,
        raw_sigma,
        traces,
    })
}

/// Distance of the nearest hidden pre-activation from its ReLU kink.
pub(crate) fn hidden_margin(params: &ModelParams, x: &Tensor, sample: Option<&WeightSample>) -> Result<f64> {
    let pass = forward_normalized(params, &params.normalize_input(x), sample)?;
    Ok(pass.traces.iter().map(network::Trace::hidden_margin).fold(f64::INFINITY, f64::min))
}

/// Gradients of a scalar loss with respect to every tensor in
/// [`ModelParams::tensors`] order, given its cotangents on the normalized
/// mean and standard deviation.
pub(crate) fn backward_normalized(
    params: &ModelParams,
    sample: Option<&WeightSample>,
    pass: &Pass,
    grad_mu_n: &Tensor,
    grad_sigma_n: Option<&Tensor>,
) -> Result<Vec<Vec<f64>>> {
    let r = params.arch.r;
    let kind = params.arch.variant.dropout();
    let mut cotangents = vec![grad_mu_n.clone()];
    if let (Some(gs), Some(raw)) = (grad_sigma_n, pass.raw_sigma.as_ref()) {
        let g = gs.with_data(
            gs.data()
                .iter()
                .zip(raw.data())
                .map(|(g, &v)| g * sigmoid(v))
                .collect(),
        )?;
        cotangents.push(g);
    }
    let nets = params.networks();
    if cotangents.len() != nets.len() {
        return Err(Error::Invalid(
            "heteroscedastic variants need a standard-deviation cotangent".into(),
        ));
    }
    let mut out = Vec::new();
    for (n, net) in nets.iter().enumerate() {
        let weights = concrete_weights(params, sample, n);
        let grads = network::backward(weights, &pass.traces[n], &cotangents[n], r)?;
        for (l, ((gw, gb), layer)) in grads.into_iter().zip(&net.layers).enumerate() {
            let gw = gw.into_data();
            match (kind, layer.log_var.as_ref()) {
                (Some(kind), Some(lv)) => {
                    let lv = lv.data();
                    let (gm, glv) = match sample {
                        None => (gw, vec![0.0; lv.len()]),
                        Some(s) => {
                            let eps = &s.eps[n][l];
                            match kind {
                                DropoutKind::PerWeight => {
                                    let glv = gw
                                        .iter()
                                        .zip(eps)
                                        .zip(lv)
                                        .map(|((g, e), lv)| g * e * 0.5 * (0.5 * lv).exp())
                                        .collect();
                                    (gw, glv)
                                }
                                DropoutKind::PerFilter => {
                                    let fl = filter_len(&layer.weight);
                                    let m = layer.weight.data();
                                    let mut gm = vec![0.0; gw.len()];
                                    let mut glv = vec![0.0; lv.len()];
                                    for o in 0..lv.len() {
                                        let sa = (0.5 * lv[o]).exp();
                                        let factor = 1.0 + sa * eps[o];
                                        let mut acc = 0.0;
                                        for i in o * fl..(o + 1) * fl {
                                            gm[i] = gw[i] * factor;
                                            acc += gw[i] * m[i];
                                        }
                                        glv[o] = acc * eps[o] * 0.5 * sa;
                                    }
                                    (gm, glv)
                                }
                            }
                        }
                    };
                    out.push(gm);
                    out.push(gb.into_data());
                    out.push(glv);
                }
                _ => {
                    out.push(gw);
                    out.push(gb.into_data());
                }
            }
        }
    }
    Ok(out)
}

/// Forward pass with posterior-mean weights or a given weight draw,
/// returning outputs in target units.
pub fn predict(params: &ModelParams, x: &Tensor, sample: Option<&WeightSample>) -> Result<Prediction> {
    params.check_input(x)?;
    let xn = params.normalize_input(x);
    let pass = forward_normalized(params, &xn, sample)?;
    Ok(Prediction {
        mu: params.denormalize_mean(&pass.mu_n),
        sigma: pass.sigma_n.as_ref().map(|s| params.denormalize_sigma(s)),
    })
}

/// Mean prediction `[c, n, n, n] → [c, (n−4)r, (n−4)r, (n−4)r]` (any
/// spatial extents ≥ 5 are accepted).
pub fn forward_mean(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    params.check_input(x)?;
    let xn = params.normalize_input(x);
    let nets = params.networks();
    let (mu_n, _) = network::forward(nets[0].weights(), nets[0].biases(), &xn, params.arch.r, params.arch.c)?;
    Ok(params.denormalize_mean(&mu_n))
}

/// Mean and per-component standard deviation from the two networks.
pub fn forward_hetero(params: &ModelParams, x: &Tensor) -> Result<HeteroOutput> {
    if !params.arch.variant.is_hetero() {
        return Err(Error::Invalid(format!(
            "forward_hetero needs a heteroscedastic variant, got {}",
            params.arch.variant
        )));
    }
    let p = predict(params, x, None)?;
    Ok(HeteroOutput {
        mu: p.mu,
        sigma_diag: p.sigma.expect("hetero variant"),
    })
}

/// Forward pass with weights drawn by [`sample_weights`]`(params, seed)`.
pub fn forward_stochastic(params: &ModelParams, x: &Tensor, seed: u64) -> Result<Prediction> {
    let sample = sample_weights(params, seed)?;
    predict(params, x, Some(&sample))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut g = rng::stream(seed, &[]);
        Tensor::from_fn(shape, |_| rng::normal(&mut g))
    }

    fn params(v: Variant, r: usize, c: usize) -> ModelParams {
        init_params(ArchConfig::new(r, c, v).unwrap(), 11).unwrap()
    }

    #[test]
    fn output_shapes() {
        let p = params(Variant::Baseline, 2, 6);
        assert_eq!(forward_mean(&p, &random(&[6, 5, 5, 5], 1)).unwrap().shape(), &[6, 2, 2, 2]);
        assert_eq!(forward_mean(&p, &random(&[6, 11, 11, 11], 1)).unwrap().shape(), &[6, 14, 14, 14]);
        assert_eq!(forward_mean(&p, &random(&[6, 6, 7, 9], 1)).unwrap().shape(), &[6, 4, 6, 10]);
        assert!(matches!(
            forward_mean(&p, &random(&[6, 4, 5, 5], 1)),
            Err(Error::TooSmall { .. })
        ));
        assert!(forward_mean(&p, &random(&[5, 5, 5, 5], 1)).is_err());
    }

    #[test]
    fn zero_network_returns_target_mean() {
        let mut p = params(Variant::Baseline, 2, 2);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.norm.target_mean = vec![1.5, -0.25];
        p.norm.target_std = vec![3.0, 2.0];
        let y = forward_mean(&p, &random(&[2, 6, 6, 6], 3)).unwrap();
        let per = y.len() / 2;
        assert!(y.data()[..per].iter().all(|&v| v == 1.5));
        assert!(y.data()[per..].iter().all(|&v| v == -0.25));
    }

    #[test]
    fn hetero_sigma_positive_and_floored() {
        let p = params(Variant::Hetero, 2, 3);
        let x = random(&[3, 7, 7, 7], 4);
        let out = forward_hetero(&p, &x).unwrap();
        assert_eq!(out.mu.shape(), out.sigma_diag.shape());
        assert!(out.sigma_diag.data().iter().all(|&s| s > 0.0));
        assert_eq!(out.mu, forward_mean(&p, &x).unwrap());

        let mut q = p.clone();
        let last = &mut q.cov_net.as_mut().unwrap().layers[2];
        last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        last.bias.data_mut().iter_mut().for_each(|v| *v = -1e4);
        let out = forward_hetero(&q, &x).unwrap();
        assert!(out.sigma_diag.data().iter().all(|&s| s == SIGMA_FLOOR));
        assert!(forward_hetero(&params(Variant::Baseline, 2, 3), &x).is_err());
    }

    #[test]
    fn stochastic_forward_limits() {
        let mut p = params(Variant::HeteroVd2, 2, 2);
        let x = random(&[2, 6, 6, 6], 5);
        p.set_log_var(-460.0);
        let det = predict(&p, &x, None).unwrap();
        assert_eq!(forward_stochastic(&p, &x, 3).unwrap(), det);
        p.set_log_var(-4.0);
        assert_ne!(forward_stochastic(&p, &x, 3).unwrap(), forward_stochastic(&p, &x, 4).unwrap());
        assert_eq!(forward_stochastic(&p, &x, 3).unwrap(), forward_stochastic(&p, &x, 3).unwrap());
        assert!(forward_stochastic(&params(Variant::Hetero, 2, 2), &x, 0).is_err());
    }

    #[test]
    fn output_variance_shrinks_with_log_var() {
        let mut p = params(Variant::BaselineVd1, 2, 1);
        let x = random(&[1, 5, 5, 5], 6);
        let mut last = f64::INFINITY;
        for lv in [-4.0, -6.0, -8.0, -10.0] {
            p.set_log_var(lv);
            let outs: Vec<Vec<f64>> = (0..200)
                .map(|s| forward_stochastic(&p, &x, s).unwrap().mu.into_data())
                .collect();
            let n = outs.len() as f64;
            let mut total = 0.0;
            for i in 0..outs[0].len() {
                let mean = outs.iter().map(|o| o[i]).sum::<f64>() / n;
                total += outs.iter().map(|o| (o[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            }
            assert!(total < last, "lv={lv}: {total} !< {last}");
            last = total;
        }
    }

    #[test]
    fn shift_equivariance() {
        let p = params(Variant::Baseline, 2, 2);
        let x = random(&[2, 9, 8, 8], 7);
        let y = forward_mean(&p, &x).unwrap();
        // drop the first LR slice along depth
        let per = 9 * 8 * 8;
        let mut shifted = Vec::new();
        for c in 0..2 {
            shifted.extend_from_slice(&x.data()[c * per + 64..(c + 1) * per]);
        }
        let xs = Tensor::new(vec![2, 8, 8, 8], shifted).unwrap();
        let ys = forward_mean(&p, &xs).unwrap();
        let [_, d, h, w] = y.dims4("t").unwrap();
        let [_, ds, _, _] = ys.dims4("t").unwrap();
        assert_eq!(ds + 2, d);
        for c in 0..2 {
            for z in 0..ds {
                for yy in 0..h {
                    for xx in 0..w {
                        let a = ys.data()[((c * ds + z) * h + yy) * w + xx];
                        let b = y.data()[((c * d + z + 2) * h + yy) * w + xx];
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
