//! The finite-difference suite: every operator, every loss term and the
//! full objective of every variant, checked against central differences.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{self, ObjectiveOptions};
use crate::model::{self, init_params, ArchConfig, Variant};
use crate::rng;
use crate::tensor::gradcheck::{GradCheck, GradCheckReport};
use crate::tensor::{self, Tensor};

/// Tolerance for single operators and loss terms.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for whole-network objectives.
pub const END_TO_END_TOL: f64 = 1e-5;
pub const STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 10.0 * STEP;
const KINK_ATTEMPTS: u64 = 256;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }
}

fn random(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    let mut g = rng::stream(seed, &[tag]);
    Tensor::from_fn(shape, |_| rng::normal(&mut g))
}

/// Random values bounded away from 0 so ReLU kinks stay out of reach of the
/// finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    let t = random(shape, seed, tag);
    let data = t
        .data()
        .iter()
        .map(|&v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
        .collect();
    t.with_data(data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn check(tol: f64, seed: u64) -> GradCheck {
    GradCheck {
        step: STEP,
        tol,
        seed,
        ..Default::default()
    }
}

/// Per-operator and per-loss-term checks at [`OP_TOL`].
pub fn operator_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let gc = check(OP_TOL, seed);

    // conv3d, contracted with a fixed random cotangent
    let x = random(&[2, 5, 5, 5], seed, 1);
    let w = random(&[3, 2, 3, 3, 3], seed, 2);
    let b = random(&[3], seed, 3);
    let cot = random(&[3, 3, 3, 3], seed, 4);
    let report = gc.run(
        &names(&["input", "weights", "bias"]),
        &[x, w, b],
        |p| Ok(dot(&tensor::conv3d(&p[0], &p[1], &p[2])?, &cot)),
        |p| {
            let g = tensor::conv3d_vjp(&cot, &p[0], &p[1])?;
            Ok(vec![g.input.into_data(), g.weights.into_data(), g.bias.into_data()])
        },
    )?;
    out.push(SuiteEntry { name: "conv3d".into(), report });

    let x = away_from_zero(&[40], seed, 5);
    let cot = random(&[40], seed, 6);
    let report = gc.run(
        &names(&["x"]),
        &[x],
        |p| Ok(dot(&tensor::relu(&p[0]), &cot)),
        |p| Ok(vec![tensor::relu_vjp(&cot, &p[0])?.into_data()]),
    )?;
    out.push(SuiteEntry { name: "relu".into(), report });

    let x = random(&[40], seed, 7).with_data((0..40).map(|i| -25.0 + 1.25 * i as f64).collect())?;
    let report = gc.run(
        &names(&["x"]),
        &[x],
        |p| Ok(dot(&tensor::softplus(&p[0]), &cot)),
        |p| Ok(vec![tensor::softplus_vjp(&cot, &p[0])?.into_data()]),
    )?;
    out.push(SuiteEntry { name: "softplus".into(), report });

    let f = random(&[16, 2, 1, 2], seed, 8);
    let cot_hr = random(&[2, 4, 2, 4], seed, 9);
    let report = gc.run(
        &names(&["features"]),
        &[f],
        |p| Ok(dot(&tensor::shuffle3d(&p[0], 2, 2)?, &cot_hr)),
        |_| Ok(vec![tensor::shuffle3d_vjp(&cot_hr, 2)?.into_data()]),
    )?;
    out.push(SuiteEntry { name: "shuffle3d".into(), report });

    let pred = random(&[30], seed, 10);
    let target = random(&[30], seed, 11);
    let report = gc.run(
        &names(&["pred"]),
        &[pred],
        |p| Ok(loss::mse_loss(&p[0], &target)?.0),
        |p| Ok(vec![loss::mse_loss(&p[0], &target)?.1.into_data()]),
    )?;
    out.push(SuiteEntry { name: "mse".into(), report });

    let mu = random(&[30], seed, 12);
    let sigma = random(&[30], seed, 13).with_data(
        random(&[30], seed, 13).data().iter().map(|v| 0.3 + v.abs()).collect(),
    )?;
    let report = gc.run(
        &names(&["mu", "sigma"]),
        &[mu.clone(), sigma.clone()],
        |p| Ok(loss::hetero_nll(&p[0], &p[1], &target)?.mahalanobis),
        |p| {
            let r = loss::hetero_nll(&p[0], &p[1], &target)?;
            Ok(vec![r.grad_mu.into_data(), r.grad_sigma_mahalanobis.into_data()])
        },
    )?;
    out.push(SuiteEntry { name: "hetero_mahalanobis".into(), report });
    let report = gc.run(
        &names(&["sigma"]),
        &[sigma],
        |p| Ok(loss::hetero_nll(&mu, &p[0], &target)?.entropy),
        |p| {
            let r = loss::hetero_nll(&mu, &p[0], &target)?;
            let gh: Vec<f64> = r
                .grad_sigma
                .data()
                .iter()
                .zip(r.grad_sigma_mahalanobis.data())
                .map(|(a, b)| a - b)
                .collect();
            Ok(vec![gh])
        },
    )?;
    out.push(SuiteEntry { name: "hetero_entropy".into(), report });

    for variant in [Variant::BaselineVd1, Variant::HeteroVd2] {
        let mut params = init_params(ArchConfig::new(2, 2, variant)?, seed)?;
        params.set_log_var(-4.0);
        let tensors: Vec<Tensor> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let report = check(OP_TOL, seed).run(
            &params.tensor_names(),
            &tensors,
            |p| Ok(loss::vardrop_kl(&params.with_tensors(p)?)?.0),
            |p| Ok(loss::vardrop_kl(&params.with_tensors(p)?)?.1),
        )?;
        out.push(SuiteEntry {
            name: format!("kl[{variant}]"),
            report,
        });
    }
    Ok(out)
}

/// Full objective of `variant` on a two-patch batch of 5³ inputs, with
/// frozen weight noise.
pub fn composite_check(variant: Variant, seed: u64) -> Result<SuiteEntry> {
    let (r, c) = (2, 2);
    let mut params = init_params(ArchConfig::new(r, c, variant)?, seed)?;
    if variant.is_variational() {
        params.set_log_var(-8.0);
    }
    if let Some(cov) = params.cov_net.as_mut() {
        // a small random head (init leaves it at zero) keeps predicted
        // sigmas O(1) while every covariance layer still gets a gradient
        let last = &mut cov.layers[2];
        let head = random(last.weight.shape(), seed, 40);
        last.weight.data_mut().iter_mut().zip(head.data()).for_each(|(w, h)| *w = 0.01 * h);
        last.bias.data_mut().iter_mut().for_each(|v| *v = 1.0);
    }
    params.norm.target_mean = vec![0.2, -0.1];
    params.norm.target_std = vec![1.5, 0.8];
    let noise_seed = rng::derive_seed(seed, &[99]);
    let samples = (0..2u64)
        .map(|i| {
            variant
                .is_variational()
                .then(|| model::sample_weights(&params, rng::derive_seed(noise_seed, &[i])))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    // redraw inputs until no hidden unit sits within reach of its ReLU kink
    let mut xs = Vec::new();
    for attempt in 0..KINK_ATTEMPTS {
        xs = (0..2).map(|i| random(&[c, 5, 5, 5], seed, 1000 * attempt + 20 + i)).collect();
        let margin = xs
            .iter()
            .zip(&samples)
            .map(|(x, s)| model::hidden_margin(&params, x, s.as_ref()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if margin > KINK_MARGIN {
            break;
        }
        if attempt + 1 == KINK_ATTEMPTS {
            return Err(Error::Invalid(format!("no kink-free input for {variant} after {KINK_ATTEMPTS} draws")));
        }
    }
    let ys: Vec<Tensor> = (0..2).map(|i| random(&[c, r, r, r], seed, 30 + i)).collect();
    let batch: Vec<(&Tensor, &Tensor)> = xs.iter().zip(&ys).collect();
    let opts = ObjectiveOptions {
        kl_scale: 1e-6,
        ..Default::default()
    };
    let tensors: Vec<Tensor> = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let gc = GradCheck {
        max_entries: 24,
        ..check(END_TO_END_TOL, seed)
    };
    let report = gc.run(
        &params.tensor_names(),
        &tensors,
        |p| Ok(loss::objective_value(&params.with_tensors(p)?, &batch, noise_seed, opts)?.total),
        |p| Ok(loss::total_objective(&params.with_tensors(p)?, &batch, noise_seed, opts)?.1),
    )?;
    Ok(SuiteEntry {
        name: format!("objective[{variant}]"),
        report,
    })
}

/// Operator checks followed by the composite check of every variant.
pub fn run_gradient_suite(seed: u64) -> Result<SuiteReport> {
    let mut entries = operator_checks(seed)?;
    for v in Variant::ALL {
        entries.push(composite_check(v, seed)?);
    }
    Ok(SuiteReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_pass() {
        for e in operator_checks(3).unwrap() {
            assert!(e.passed(), "{}: {:?}", e.name, e.report);
        }
    }

    #[test]
    fn composite_baseline_and_hetero_vd1_pass() {
        for v in [Variant::Baseline, Variant::HeteroVd1] {
            let e = composite_check(v, 5).unwrap();
            assert!(e.passed(), "{}: {:#?}", e.name, e.report);
        }
    }
}
