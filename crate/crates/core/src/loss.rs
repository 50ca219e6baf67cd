//! Training objectives with exact gradients.
//!
//! All data terms are evaluated in normalized target units. The
//! heteroscedastic negative log-likelihood is split into a Mahalanobis term
//! `M = Σ_d (y_d − μ_d)² / σ_d²` and an entropy term `H = Σ_d log σ_d²`, each
//! averaged over patches. The variational KL uses the cubic approximation
//! `−KL ≈ 0.5·log α + c₁α + c₂α² + c₃α³ + const` with `α` clipped to `(0, 1]`
//! and the constant chosen so that `KL(α = 1) = 0`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, DropoutKind, ModelParams, WeightSample};
use crate::par::Parallelism;
use crate::rng;
use crate::tensor::Tensor;

pub const KL_C1: f64 = 1.161_451_24;
pub const KL_C2: f64 = -1.502_041_18;
pub const KL_C3: f64 = 0.586_299_21;
/// Additive constant making the clipped KL vanish at `α = 1`.
pub const KL_CONST: f64 = KL_C1 + KL_C2 + KL_C3;

/// Components of one objective evaluation. `total = data_term() + kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mahalanobis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    /// Weighted KL contribution included in `total`.
    pub kl: f64,
    /// Unweighted KL of the posterior.
    pub kl_raw: f64,
}

impl LossReport {
    pub fn data_term(&self) -> f64 {
        self.mse.unwrap_or(0.0) + self.mahalanobis.unwrap_or(0.0) + self.entropy.unwrap_or(0.0)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over all components and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same("mse_loss", pred, target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, pred.with_data(grad)?))
}

/// Heteroscedastic NLL terms of one patch with their gradients.
#[derive(Debug, Clone)]
pub struct HeteroNll {
    pub mahalanobis: f64,
    pub entropy: f64,
    pub grad_mu: Tensor,
    /// Gradient of `M + H` with respect to sigma.
    pub grad_sigma: Tensor,
    /// The `M` part of `grad_sigma`; the `H` part is `2/σ`.
    pub grad_sigma_mahalanobis: Tensor,
}

/// `M = Σ_d (y_d − μ_d)²/σ_d²` and `H = Σ_d log σ_d²` for one patch.
pub fn hetero_nll(mu: &Tensor, sigma: &Tensor, target: &Tensor) -> Result<HeteroNll> {
    check_same("hetero_nll", mu, sigma)?;
    check_same("hetero_nll", mu, target)?;
    if let Some(i) = sigma.data().iter().position(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Invalid(format!(
            "hetero_nll needs positive finite sigma, got {} at index {i}",
            sigma.data()[i]
        )));
    }
    let (mut m, mut h) = (0.0, 0.0);
    let mut gmu = Vec::with_capacity(mu.len());
    let mut gsig = Vec::with_capacity(mu.len());
    let mut gsig_m = Vec::with_capacity(mu.len());
    for ((&u, &s), &y) in mu.data().iter().zip(sigma.data()).zip(target.data()) {
        let res = y - u;
        let var = s * s;
        m += res * res / var;
        h += var.ln();
        gmu.push(-2.0 * res / var);
        let dm = -2.0 * res * res / (var * s);
        gsig_m.push(dm);
        gsig.push(dm + 2.0 / s);
    }
    Ok(HeteroNll {
        mahalanobis: m,
        entropy: h,
        grad_mu: mu.with_data(gmu)?,
        grad_sigma: sigma.with_data(gsig)?,
        grad_sigma_mahalanobis: sigma.with_data(gsig_m)?,
    })
}

/// KL of one noise unit as a function of `α`, and `dKL/dα` (zero where clipped).
pub fn kl_unit(alpha: f64) -> (f64, f64) {
    if !(alpha < 1.0) {
        return (0.0, 0.0);
    }
    let a = alpha;
    let kl = KL_CONST - (0.5 * a.ln() + KL_C1 * a + KL_C2 * a * a + KL_C3 * a * a * a);
    let d = -(0.5 / a + KL_C1 + 2.0 * KL_C2 * a + 3.0 * KL_C3 * a * a);
    (kl, d)
}

/// Summed KL over every noise unit (one per weight for Var I, one per
/// filter for Var II) and its gradient in [`ModelParams::tensors`] order.
pub fn vardrop_kl(params: &ModelParams) -> Result<(f64, Vec<Vec<f64>>)> {
    let kind = params
        .arch
        .variant
        .dropout()
        .ok_or_else(|| Error::NotVariational(params.arch.variant.to_string()))?;
    let mut total = 0.0;
    let mut grads = Vec::new();
    for net in [Some(&params.mean_net), params.cov_net.as_ref()].into_iter().flatten() {
        for layer in &net.layers {
            let m = layer.weight.data();
            let lv = layer.log_var.as_ref().expect("variational layer").data();
            let mut gm = vec![0.0; m.len()];
            let mut glv = vec![0.0; lv.len()];
            match kind {
                DropoutKind::PerWeight => {
                    for i in 0..m.len() {
                        let alpha = lv[i].exp() / (m[i] * m[i]);
                        let (kl, d) = kl_unit(alpha);
                        total += kl;
                        if d != 0.0 {
                            glv[i] = d * alpha;
                            gm[i] = d * (-2.0 * alpha / m[i]);
                        }
                    }
                }
                DropoutKind::PerFilter => {
                    for o in 0..lv.len() {
                        let alpha = lv[o].exp();
                        let (kl, d) = kl_unit(alpha);
                        total += kl;
                        glv[o] = d * alpha;
                    }
                }
            }
            grads.push(gm);
            grads.push(vec![0.0; layer.bias.len()]);
            grads.push(glv);
        }
    }
    Ok((total, grads))
}

/// Knobs of [`total_objective`] that change over training.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOptions {
    /// Multiplier on the raw KL, i.e. `λ_KL · warm-up / N_train`.
    pub kl_scale: f64,
    /// Draw fresh weight noise per patch (training) or use posterior means.
    pub sample_noise: bool,
    pub parallelism: Parallelism,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            kl_scale: 0.0,
            sample_noise: true,
            parallelism: Parallelism::Serial,
        }
    }
}

struct ItemResult {
    mse: f64,
    m: f64,
    h: f64,
    grads: Vec<Vec<f64>>,
}

fn item(
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    sample: Option<&WeightSample>,
    batch: f64,
    need_grad: bool,
) -> Result<ItemResult> {
    let xn = params.normalize_input(x);
    let yn = params.normalize_target(y);
    let pass = model::forward_normalized(params, &xn, sample)?;
    check_same("total_objective", &pass.mu_n, &yn)?;
    let mut res = ItemResult {
        mse: 0.0,
        m: 0.0,
        h: 0.0,
        grads: Vec::new(),
    };
    let (gmu, gsig) = match &pass.sigma_n {
        None => {
            let (l, g) = mse_loss(&pass.mu_n, &yn)?;
            res.mse = l / batch;
            (g, None)
        }
        Some(sigma) => {
            let nll = hetero_nll(&pass.mu_n, sigma, &yn)?;
            res.m = nll.mahalanobis / batch;
            res.h = nll.entropy / batch;
            (nll.grad_mu, Some(nll.grad_sigma))
        }
    };
    if need_grad {
        let scale = 1.0 / batch;
        let gmu = gmu.with_data(gmu.data().iter().map(|v| v * scale).collect())?;
        let gsig = gsig
            .map(|g| g.with_data(g.data().iter().map(|v| v * scale).collect()))
            .transpose()?;
        res.grads = model::backward_normalized(params, sample, &pass, &gmu, gsig.as_ref())?;
    }
    Ok(res)
}

fn evaluate(
    params: &ModelParams,
    batch: &[(&Tensor, &Tensor)],
    seed: u64,
    opts: ObjectiveOptions,
    need_grad: bool,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let variational = params.arch.variant.is_variational();
    let n = batch.len() as f64;
    let results = opts.parallelism.map(batch.len(), |i| {
        let sample = if variational && opts.sample_noise {
            Some(model::sample_weights(params, rng::derive_seed(seed, &[i as u64]))?)
        } else {
            None
        };
        item(params, batch[i].0, batch[i].1, sample.as_ref(), n, need_grad)
    });
    let mut grads = if need_grad { params.zero_grads() } else { Vec::new() };
    let (mut mse, mut m, mut h) = (0.0, 0.0, 0.0);
    for r in results {
        let r = r?;
        mse += r.mse;
        m += r.m;
        h += r.h;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let (kl_raw, kl) = if variational {
        let (raw, kg) = vardrop_kl(params)?;
        if need_grad && opts.kl_scale != 0.0 {
            for (acc, g) in grads.iter_mut().zip(&kg) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += opts.kl_scale * v;
                }
            }
        }
        (raw, opts.kl_scale * raw)
    } else {
        (0.0, 0.0)
    };
    let hetero = params.arch.variant.is_hetero();
    let report = LossReport {
        total: if hetero { m + h } else { mse } + kl,
        mse: (!hetero).then_some(mse),
        mahalanobis: hetero.then_some(m),
        entropy: hetero.then_some(h),
        kl,
        kl_raw,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            context: "objective".into(),
            index: 0,
        });
    }
    Ok((report, grads))
}

/// Batch objective and its gradient in [`ModelParams::tensors`] order.
///
/// Baseline variants use the mean squared error over all components,
/// heteroscedastic ones `M + H` averaged over patches; variational variants
/// add `opts.kl_scale · KL`. Weight noise for patch `i` is drawn with seed
/// `derive_seed(seed, [i])`.
pub fn total_objective(
    params: &ModelParams,
    batch: &[(&Tensor, &Tensor)],
    seed: u64,
    opts: ObjectiveOptions,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    evaluate(params, batch, seed, opts, true)
}

/// [`total_objective`] without the backward pass.
pub fn objective_value(
    params: &ModelParams,
    batch: &[(&Tensor, &Tensor)],
    seed: u64,
    opts: ObjectiveOptions,
) -> Result<LossReport> {
    evaluate(params, batch, seed, opts, false).map(|(r, _)| r)
}
