//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Settings for a finite-difference comparison.
///
/// The error of a tensor is normwise:
/// `max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, floor)`
/// over the checked entries, so entries whose gradient is tiny next to the
/// rest of the tensor are judged on the tensor's scale rather than on their
/// own roundoff.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Tensors larger than this are checked on a seeded random subset.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-12,
            max_entries: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the largest absolute deviation.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err <= self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.max_rel_err > self.tol)
            .map(|t| t.name.as_str())
            .collect()
    }
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck {
            tol,
            ..Default::default()
        }
    }

    /// Compares `grad(params)` with central differences of `loss` around
    /// `params`. `grad` returns one flat gradient per parameter tensor.
    pub fn run<L, G>(
        &self,
        names: &[String],
        params: &[Tensor],
        loss: L,
        grad: G,
    ) -> Result<GradCheckReport>
    where
        L: Fn(&[Tensor]) -> Result<f64>,
        G: Fn(&[Tensor]) -> Result<Vec<Vec<f64>>>,
    {
        if names.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} names for {} parameter tensors",
                names.len(),
                params.len()
            )));
        }
        let f0 = loss(params)?;
        if !f0.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck loss".into(),
                index: 0,
            });
        }
        let analytic = grad(params)?;
        if analytic.len() != params.len() {
            return Err(Error::Invalid("gradient count mismatch".into()));
        }
        let mut work: Vec<Tensor> = params.to_vec();
        let mut tensors = Vec::with_capacity(params.len());
        for (t, (name, ga)) in names.iter().zip(&analytic).enumerate() {
            let n = params[t].len();
            if ga.len() != n {
                return Err(Error::shape(
                    "gradcheck",
                    format!("gradient for {name} has {} entries, tensor has {n}", ga.len()),
                ));
            }
            let entries: Vec<usize> = if n <= self.max_entries {
                (0..n).collect()
            } else {
                let mut g = rng::stream(self.seed, &[t as u64]);
                let mut v = index::sample(&mut g, n, self.max_entries).into_vec();
                v.sort_unstable();
                v
            };
            let mut report = TensorReport {
                name: name.clone(),
                checked: entries.len(),
                max_rel_err: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            let mut worst_abs = -1.0;
            let mut scale = self.floor;
            for i in entries {
                let orig = work[t].data()[i];
                work[t].data_mut()[i] = orig + self.step;
                let fp = loss(&work)?;
                work[t].data_mut()[i] = orig - self.step;
                let fm = loss(&work)?;
                work[t].data_mut()[i] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("gradcheck loss perturbing {name}"),
                        index: i,
                    });
                }
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = ga[i];
                scale = scale.max(a.abs()).max(numeric.abs());
                let dev = (a - numeric).abs();
                if dev > worst_abs || dev.is_nan() {
                    worst_abs = dev;
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
            report.max_rel_err = if worst_abs.is_nan() { f64::INFINITY } else { worst_abs.max(0.0) / scale };
            tensors.push(report);
        }
        Ok(GradCheckReport {
            tol: self.tol,
            tensors,
        })
    }
}

/// Runs [`GradCheck`] with the default step, error floor and sampling.
pub fn finite_diff_check<L, G>(
    names: &[String],
    params: &[Tensor],
    loss: L,
    grad: G,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Vec<f64>>>,
{
    GradCheck {
        step,
        tol,
        ..Default::default()
    }
    .run(names, params, loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn linear_function_is_exact() {
        let coeffs = [0.5, -2.0, 3.25];
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = finite_diff_check(
            &names(&["x"]),
            &[x],
            |p| Ok(p[0].data().iter().zip(&coeffs).map(|(a, c)| a * c).sum()),
            |_| Ok(vec![coeffs.to_vec()]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_error() < 1e-9, "{}", report.max_error());
    }

    #[test]
    fn corrupted_gradient_is_reported_by_name() {
        let a = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let b = Tensor::new(vec![2], vec![1.1, 0.2]).unwrap();
        let report = finite_diff_check(
            &names(&["good", "bad"]),
            &[a, b],
            |p| {
                Ok(p[0].data().iter().map(|v| v * v).sum::<f64>()
                    + p[1].data().iter().map(|v| v * v * v).sum::<f64>())
            },
            |p| {
                Ok(vec![
                    p[0].data().iter().map(|v| 2.0 * v).collect(),
                    // wrong: should be 3v²
                    p[1].data().iter().map(|v| 2.0 * v * v).collect(),
                ])
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures(), vec!["bad"]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = finite_diff_check(
            &names(&["x"]),
            &[x],
            |p| Ok(1.0 / p[0].data()[0]),
            |_| Ok(vec![vec![0.0]]),
            1e-5,
            1e-6,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
