use serde::{Deserialize, Serialize};

use super::config::{ArchConfig, DropoutKind};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Initial log-variance of the weight posteriors (near-deterministic start).
pub const INIT_LOG_VAR: f64 = -10.0;

/// One convolution layer. `log_var` is present only for variational variants:
/// per weight it holds `log s²` (additive noise, Var I); per output filter it
/// holds `log α`, the variance of a multiplicative `1 + √α·ε` factor (Var II).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub log_var: Option<Tensor>,
}

/// The three layers of one subpixel network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<ConvLayer>,
}

impl Network {
    pub(crate) fn weights(&self) -> [&Tensor; 3] {
        std::array::from_fn(|l| &self.layers[l].weight)
    }

    pub(crate) fn biases(&self) -> [&Tensor; 3] {
        std::array::from_fn(|l| &self.layers[l].bias)
    }
}

/// Per-channel z-scoring statistics of network inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl Normalization {
    pub fn identity(c: usize) -> Self {
        Normalization {
            input_mean: vec![0.0; c],
            input_std: vec![1.0; c],
            target_mean: vec![0.0; c],
            target_std: vec![1.0; c],
        }
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        let all = [
            &self.input_mean,
            &self.input_std,
            &self.target_mean,
            &self.target_std,
        ];
        if all.iter().any(|v| v.len() != c) {
            return Err(Error::Invalid(format!(
                "normalization statistics must have {c} entries per field"
            )));
        }
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite()))
            || self
                .input_std
                .iter()
                .chain(&self.target_std)
                .any(|&s| s <= 0.0)
        {
            return Err(Error::Invalid(
                "normalization statistics must be finite with positive std".into(),
            ));
        }
        Ok(())
    }
}

/// Full parameter set of one network variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub mean_net: Network,
    pub cov_net: Option<Network>,
    pub norm: Normalization,
}

const COV_NET: u64 = 1;

fn init_network(arch: &ArchConfig, seed: u64, net: u64) -> Network {
    let layers = arch
        .layer_specs()
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            // the covariance head starts flat: a He-scaled last layer puts some
            // initial sigmas near zero, and the resulting early gradient spikes
            // stall Adam's step size for thousands of steps
            let head = net == COV_NET && l + 1 == arch.layer_specs().len();
            let std = if head { 0.0 } else { (2.0 / spec.fan_in() as f64).sqrt() };
            let mut g = rng::stream(seed, &[rng::TAG_INIT, net, l as u64]);
            let shape = spec.weight_shape();
            let weight = Tensor::from_fn(&shape, |_| std * rng::normal(&mut g));
            let log_var = arch.variant.dropout().map(|kind| match kind {
                DropoutKind::PerWeight => Tensor::full(&shape, INIT_LOG_VAR),
                DropoutKind::PerFilter => Tensor::full(&[spec.out_channels], INIT_LOG_VAR),
            });
            ConvLayer {
                weight,
                bias: Tensor::zeros(&[spec.out_channels]),
                log_var,
            }
        })
        .collect();
    Network { layers }
}

/// He-scaled Gaussian weights, zero biases and, for variational variants,
/// posterior log-variances at [`INIT_LOG_VAR`]. The covariance net's last
/// layer starts at zero, so every initial sigma is `softplus(0)` target
/// standard deviations. Deterministic in `seed`.
pub fn init_params(arch: ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    Ok(ModelParams {
        arch,
        mean_net: init_network(&arch, seed, 0),
        cov_net: arch.variant.is_hetero().then(|| init_network(&arch, seed, COV_NET)),
        norm: Normalization::identity(arch.c),
    })
}

impl ModelParams {
    pub(crate) fn networks(&self) -> Vec<&Network> {
        std::iter::once(&self.mean_net)
            .chain(self.cov_net.as_ref())
            .collect()
    }

    /// Every trainable tensor with a stable name, in optimizer order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, net) in ["mean", "cov"].iter().zip(self.networks()) {
            for (l, layer) in net.layers.iter().enumerate() {
                out.push((format!("{prefix}.{l}.weight"), &layer.weight));
                out.push((format!("{prefix}.{l}.bias"), &layer.bias));
                if let Some(lv) = &layer.log_var {
                    out.push((format!("{prefix}.{l}.log_var"), lv));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let nets = std::iter::once(&mut self.mean_net).chain(self.cov_net.as_mut());
        for net in nets {
            for layer in net.layers.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
                if let Some(lv) = layer.log_var.as_mut() {
                    out.push(lv);
                }
            }
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero gradient buffers shaped like [`Self::tensors`].
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect()
    }

    /// Copy of `self` with tensors replaced, in [`Self::tensors`] order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<ModelParams> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("with_tensors", format!("{:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    /// Sets every posterior log-variance to `value`.
    pub fn set_log_var(&mut self, value: f64) {
        let nets = std::iter::once(&mut self.mean_net).chain(self.cov_net.as_mut());
        for net in nets {
            for layer in net.layers.iter_mut() {
                if let Some(lv) = layer.log_var.as_mut() {
                    lv.data_mut().iter_mut().for_each(|v| *v = value);
                }
            }
        }
    }

    /// Checks shapes against the architecture and finiteness of all values.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.norm.validate(self.arch.c)?;
        if self.cov_net.is_some() != self.arch.variant.is_hetero() {
            return Err(Error::Invalid(format!(
                "covariance network presence does not match variant {}",
                self.arch.variant
            )));
        }
        for net in self.networks() {
            if net.layers.len() != 3 {
                return Err(Error::Invalid("networks have exactly three layers".into()));
            }
            for (layer, spec) in net.layers.iter().zip(self.arch.layer_specs()) {
                if layer.weight.shape() != spec.weight_shape() || layer.bias.shape() != [spec.out_channels] {
                    return Err(Error::shape(
                        "params",
                        format!("layer weights {:?} do not match {:?}", layer.weight.shape(), spec),
                    ));
                }
                let expected_lv: Option<Vec<usize>> = self.arch.variant.dropout().map(|k| match k {
                    DropoutKind::PerWeight => spec.weight_shape().to_vec(),
                    DropoutKind::PerFilter => vec![spec.out_channels],
                });
                if layer.log_var.as_ref().map(|t| t.shape().to_vec()) != expected_lv {
                    return Err(Error::shape("params", "log-variance layout does not match variant"));
                }
            }
        }
        for (name, t) in self.tensors() {
            t.validate(&name)?;
        }
        Ok(())
    }
}

/// One concrete draw of every weight tensor from the approximate posterior,
/// together with the standard-normal draws that produced it.
#[derive(Debug, Clone)]
pub struct WeightSample {
    pub(crate) weights: Vec<[Tensor; 3]>,
    pub(crate) eps: Vec<[Vec<f64>; 3]>,
}

impl WeightSample {
    pub fn mean_weights(&self) -> [&Tensor; 3] {
        std::array::from_fn(|l| &self.weights[0][l])
    }

    pub fn cov_weights(&self) -> Option<[&Tensor; 3]> {
        self.weights.get(1).map(|w| std::array::from_fn(|l| &w[l]))
    }
}

pub(crate) fn filter_len(weight: &Tensor) -> usize {
    weight.len() / weight.shape()[0]
}

/// `θ = m + s·ε` (per weight) or `θ = m·(1 + √α·ε_filter)` (per filter).
pub(crate) fn perturb(layer: &ConvLayer, kind: DropoutKind, eps: &[f64]) -> Tensor {
    let m = layer.weight.data();
    let lv = layer.log_var.as_ref().expect("variational layer").data();
    let data: Vec<f64> = match kind {
        DropoutKind::PerWeight => m
            .iter()
            .zip(lv)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect(),
        DropoutKind::PerFilter => {
            let fl = filter_len(&layer.weight);
            m.iter()
                .enumerate()
                .map(|(i, &m)| {
                    let o = i / fl;
                    m * (1.0 + (0.5 * lv[o]).exp() * eps[o])
                })
                .collect()
        }
    };
    layer.weight.with_data(data).expect("same shape")
}

/// Draws `θᵗ` from the factored Gaussian posterior. Deterministic in `seed`;
/// for hetero variants both networks are sampled.
pub fn sample_weights(params: &ModelParams, seed: u64) -> Result<WeightSample> {
    let kind = params
        .arch
        .variant
        .dropout()
        .ok_or_else(|| Error::NotVariational(params.arch.variant.to_string()))?;
    let mut weights = Vec::new();
    let mut eps_all = Vec::new();
    for (n, net) in params.networks().into_iter().enumerate() {
        let mut ws: Vec<Tensor> = Vec::with_capacity(3);
        let mut es: Vec<Vec<f64>> = Vec::with_capacity(3);
        for (l, layer) in net.layers.iter().enumerate() {
            let mut g = rng::stream(seed, &[rng::TAG_WEIGHT_NOISE, n as u64, l as u64]);
            let count = match kind {
                DropoutKind::PerWeight => layer.weight.len(),
                DropoutKind::PerFilter => layer.weight.shape()[0],
            };
            let eps: Vec<f64> = (0..count).map(|_| rng::normal(&mut g)).collect();
            ws.push(perturb(layer, kind, &eps));
            es.push(eps);
        }
        weights.push(ws.try_into().expect("three layers"));
        eps_all.push(es.try_into().expect("three layers"));
    }
    Ok(WeightSample {
        weights,
        eps: eps_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn arch(v: Variant) -> ArchConfig {
        ArchConfig::new(2, 6, v).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(arch(Variant::HeteroVd1), 5).unwrap();
        let b = init_params(arch(Variant::HeteroVd1), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean_net.layers[0].weight.shape(), &[50, 6, 3, 3, 3]);
        assert!(a.cov_net.is_some());
        a.validate().unwrap();
        let c = init_params(arch(Variant::HeteroVd1), 6).unwrap();
        assert_ne!(a, c);
        assert_ne!(a.mean_net, *a.cov_net.as_ref().unwrap());
    }

    #[test]
    fn covariance_head_starts_flat() {
        let p = init_params(arch(Variant::Hetero), 2).unwrap();
        let cov = p.cov_net.as_ref().unwrap();
        assert!(cov.layers[2].weight.data().iter().all(|&w| w == 0.0));
        assert!(cov.layers[1].weight.data().iter().any(|&w| w != 0.0));
        assert!(p.mean_net.layers[2].weight.data().iter().any(|&w| w != 0.0));
    }

    #[test]
    fn layer1_std_is_he_scaled() {
        // 50·6·27 = 8100 weights per draw; pool two seeds for > 10⁴ samples.
        let mut vals = Vec::new();
        for seed in 0..2 {
            let p = init_params(arch(Variant::Baseline), seed).unwrap();
            vals.extend_from_slice(p.mean_net.layers[0].weight.data());
        }
        assert!(vals.len() >= 10_000);
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expected = (2.0f64 / (6.0 * 27.0)).sqrt();
        assert!((std / expected - 1.0).abs() < 0.1, "{std} vs {expected}");
    }

    #[test]
    fn log_var_layouts() {
        let p1 = init_params(arch(Variant::BaselineVd1), 0).unwrap();
        assert_eq!(p1.mean_net.layers[2].log_var.as_ref().unwrap().shape(), &[48, 100, 3, 3, 3]);
        let p2 = init_params(arch(Variant::BaselineVd2), 0).unwrap();
        assert_eq!(p2.mean_net.layers[2].log_var.as_ref().unwrap().shape(), &[48]);
        let p0 = init_params(arch(Variant::Hetero), 0).unwrap();
        assert!(p0.mean_net.layers.iter().all(|l| l.log_var.is_none()));
        assert_eq!(p0.tensors().len(), 12);
        assert_eq!(p2.tensors().len(), 9);
    }

    #[test]
    fn degenerate_posterior_sample_equals_mean() {
        let mut p = init_params(arch(Variant::HeteroVd1), 1).unwrap();
        p.set_log_var(-460.0);
        let s = sample_weights(&p, 9).unwrap();
        for (sw, layer) in s.mean_weights().iter().zip(&p.mean_net.layers) {
            assert_eq!(sw.data(), layer.weight.data());
        }
        let mut p2 = init_params(arch(Variant::BaselineVd2), 1).unwrap();
        p2.set_log_var(-460.0);
        let s2 = sample_weights(&p2, 9).unwrap();
        assert_eq!(s2.mean_weights()[0].data(), p2.mean_net.layers[0].weight.data());
    }

    #[test]
    fn sampling_rejects_deterministic_variants() {
        let p = init_params(arch(Variant::Hetero), 0).unwrap();
        assert!(matches!(sample_weights(&p, 0), Err(Error::NotVariational(_))));
    }

    #[test]
    fn sample_mean_converges_to_posterior_mean() {
        let mut p = init_params(ArchConfig::new(1, 1, Variant::BaselineVd1).unwrap(), 2).unwrap();
        p.set_log_var((0.05f64).powi(2).ln());
        let s = 0.05;
        let draws = 10_000;
        let m = p.mean_net.layers[0].weight.data().to_vec();
        let mut acc = vec![0.0; m.len()];
        for t in 0..draws {
            let w = sample_weights(&p, t).unwrap();
            for (a, v) in acc.iter_mut().zip(w.mean_weights()[0].data()) {
                *a += v;
            }
        }
        let se = s / (draws as f64).sqrt();
        for (a, m) in acc.iter().zip(&m) {
            assert!((a / draws as f64 - m).abs() < 4.0 * se);
        }
    }

    #[test]
    fn per_filter_noise_is_shared_within_a_filter() {
        let mut p = init_params(arch(Variant::BaselineVd2), 3).unwrap();
        p.set_log_var(-2.0);
        let s = sample_weights(&p, 4).unwrap();
        let m = &p.mean_net.layers[0].weight;
        let w = s.mean_weights()[0];
        let fl = filter_len(m);
        for o in 0..m.shape()[0] {
            let ratios: Vec<f64> = (o * fl..(o + 1) * fl)
                .map(|i| w.data()[i] / m.data()[i])
                .collect();
            assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
        }
    }
}
