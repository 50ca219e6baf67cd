//! ADAM optimisation with seeded mini-batches, validation-based model
//! selection and ensembles trained on independently drawn patch sets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_patch_pairs, split_train_valid, PatchPair, Volume};
use crate::error::{Error, Result};
use crate::loss::{objective_value, total_objective, LossReport, ObjectiveOptions};
use crate::model::{init_params, ArchConfig, ModelParams, Normalization, Variant};
use crate::par::Parallelism;
use crate::rng::{self, TAG_ENSEMBLE, TAG_PATCHES, TAG_SHUFFLE, TAG_SPLIT, TAG_WEIGHT_NOISE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub r: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight on the KL term before the `1/N_train` scaling.
    pub kl_weight: f64,
    /// Fraction of epochs over which the KL weight ramps linearly to full.
    pub kl_warmup_fraction: f64,
    pub valid_fraction: f64,
    pub ensemble_size: usize,
    /// Patches drawn per training volume when sampling from volumes.
    pub patches_per_volume: usize,
    pub include_exterior: bool,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Baseline,
            r: 2,
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            kl_weight: 1.0,
            kl_warmup_fraction: 0.1,
            valid_fraction: 0.1,
            ensemble_size: 1,
            patches_per_volume: 400,
            include_exterior: true,
            parallelism: Parallelism::Serial,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return bad(format!("valid_fraction must lie in (0, 1), got {}", self.valid_fraction));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return bad(format!("kl_warmup_fraction must lie in [0, 1], got {}", self.kl_warmup_fraction));
        }
        if !(self.kl_weight >= 0.0) {
            return bad(format!("kl_weight must be non-negative, got {}", self.kl_weight));
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1".into());
        }
        if self.r == 0 {
            return bad("r must be at least 1".into());
        }
        Ok(())
    }

    /// KL multiplier of an epoch before the `1/N_train` scaling.
    pub fn kl_ramp(&self, epoch: usize) -> f64 {
        let warm = (self.kl_warmup_fraction * self.epochs as f64).ceil() as usize;
        if warm == 0 {
            self.kl_weight
        } else {
            self.kl_weight * ((epoch + 1) as f64 / warm as f64).min(1.0)
        }
    }
}

/// First and second moment estimates of ADAM.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update of every tensor in
/// [`ModelParams::tensors`] order.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} tensors, {} gradients, {} moments", tensors.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (t, g)) in tensors.iter().zip(grads).enumerate() {
        if t.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::shape("adam_step", format!("tensor {i}: size {} vs gradient {}", t.len(), g.len())));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of tensor {i}"),
                index: j,
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, t) in tensors.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), m), v) in t.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

fn channel_stats(tensors: impl Iterator<Item = Tensor>, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut count = vec![0usize; c];
    for t in tensors {
        let per = t.len() / c;
        for (i, &v) in t.data().iter().enumerate() {
            let ch = i / per;
            sum[ch] += v;
            sq[ch] += v * v;
            count[ch] += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n.max(1) as f64).collect();
    let std = (0..c)
        .map(|ch| {
            let var = sq[ch] / count[ch].max(1) as f64 - mean[ch] * mean[ch];
            let s = var.max(0.0).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Per-channel z-scoring statistics of the LR inputs and HR targets.
pub fn normalization_from(pairs: &[PatchPair], c: usize) -> Normalization {
    let (input_mean, input_std) = channel_stats(pairs.iter().map(|p| p.lr.clone()), c);
    let (target_mean, target_std) = channel_stats(pairs.iter().map(|p| p.hr.clone()), c);
    Normalization {
        input_mean,
        input_std,
        target_mean,
        target_std,
    }
}

/// One epoch of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-size-weighted mean of the training objective components.
    pub train: LossReport,
    /// Data term on the validation pairs at the posterior means.
    pub valid: f64,
    pub kl_scale: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation data term.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub log: Vec<EpochLog>,
    pub n_train: usize,
    pub n_valid: usize,
    /// Set when training stopped early on a non-finite loss.
    pub diverged: Option<String>,
}

impl TrainOutcome {
    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }
}

fn refs(pairs: &[PatchPair]) -> Vec<(&Tensor, &Tensor)> {
    pairs.iter().map(|p| (&p.lr, &p.hr)).collect()
}

fn accumulate(acc: &mut Option<LossReport>, r: &LossReport, w: f64) {
    let add = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => Some(a + w * b),
        _ => None,
    };
    *acc = Some(match acc.take() {
        None => LossReport {
            total: w * r.total,
            mse: r.mse.map(|v| w * v),
            mahalanobis: r.mahalanobis.map(|v| w * v),
            entropy: r.entropy.map(|v| w * v),
            kl: w * r.kl,
            kl_raw: w * r.kl_raw,
        },
        Some(a) => LossReport {
            total: a.total + w * r.total,
            mse: add(a.mse, r.mse),
            mahalanobis: add(a.mahalanobis, r.mahalanobis),
            entropy: add(a.entropy, r.entropy),
            kl: a.kl + w * r.kl,
            kl_raw: a.kl_raw + w * r.kl_raw,
        },
    });
}

/// Validation data term at the posterior means.
pub fn validation_loss(params: &ModelParams, pairs: &[PatchPair], parallelism: Parallelism) -> Result<f64> {
    let opts = ObjectiveOptions {
        kl_scale: 0.0,
        sample_noise: false,
        parallelism,
    };
    Ok(objective_value(params, &refs(pairs), 0, opts)?.data_term())
}

/// Trains one model on `pairs`, holding out `valid_fraction` of them for
/// model selection.
pub fn train(config: &TrainConfig, pairs: &[PatchPair]) -> Result<TrainOutcome> {
    config.validate()?;
    let first = pairs.first().ok_or_else(|| Error::Invalid("no training pairs".into()))?;
    let [c, ..] = first.lr.dims4("train")?;
    let expect_hr = crate::data::CORE * config.r;
    let [hc, hd, ..] = first.hr.dims4("train")?;
    if hc != c || hd != expect_hr {
        return Err(Error::Config(format!(
            "pairs have HR targets of side {hd} but r = {} needs {expect_hr}",
            config.r
        )));
    }
    let (train_set, valid_set) = split_train_valid(pairs, config.valid_fraction, rng::derive_seed(config.seed, &[TAG_SPLIT]))?;
    let mut params = init_params(ArchConfig::new(config.r, c, config.variant)?, config.seed)?;
    params.norm = normalization_from(&train_set, c);
    params.validate()?;
    let mut state = AdamState::new(&params);
    let n_train = train_set.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut diverged = None;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, &[TAG_SHUFFLE, epoch as u64]));
        let kl_scale = config.kl_ramp(epoch) / n_train as f64;
        let opts = ObjectiveOptions {
            kl_scale,
            sample_noise: true,
            parallelism: config.parallelism,
        };
        let mut acc = None;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(&Tensor, &Tensor)> = chunk.iter().map(|&i| (&train_set[i].lr, &train_set[i].hr)).collect();
            let seed = rng::derive_seed(config.seed, &[TAG_WEIGHT_NOISE, epoch as u64, b as u64]);
            let step = total_objective(&params, &batch, seed, opts).and_then(|(report, grads)| {
                adam_step(&mut params, &grads, &mut state, config.lr)?;
                Ok(report)
            });
            match step {
                Ok(report) => accumulate(&mut acc, &report, chunk.len() as f64 / n_train as f64),
                Err(e @ (Error::NonFinite { .. } | Error::Invalid(_))) => {
                    diverged = Some(format!("epoch {epoch}, batch {b}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let valid = validation_loss(&params, &valid_set, config.parallelism);
        let valid = match valid {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                diverged = Some(format!("epoch {epoch}: validation loss {v}"));
                break;
            }
            Err(e @ (Error::NonFinite { .. } | Error::Invalid(_))) => {
                diverged = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let improved = best.as_ref().is_none_or(|(_, _, v)| valid < *v);
        if improved {
            best = Some((params.clone(), epoch, valid));
        }
        log.push(EpochLog {
            epoch,
            train: acc.expect("at least one batch"),
            valid,
            kl_scale,
            best: improved,
        });
    }
    match best {
        Some((params, best_epoch, best_valid)) => Ok(TrainOutcome {
            params,
            best_epoch,
            best_valid,
            log,
            n_train,
            n_valid: valid_set.len(),
            diverged,
        }),
        None => Err(Error::Diverged {
            epoch: 0,
            reason: diverged.unwrap_or_else(|| "no epoch completed".into()),
        }),
    }
}

/// Seed of ensemble member `k`; member 0 uses the configured seed.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        rng::derive_seed(seed, &[TAG_ENSEMBLE, k as u64])
    }
}

/// Draws `patches_per_volume` pairs from each volume with a seed derived
/// from `seed`.
pub fn sample_training_set(config: &TrainConfig, volumes: &[Volume], seed: u64) -> Result<Vec<PatchPair>> {
    let mut pairs = Vec::with_capacity(volumes.len() * config.patches_per_volume);
    for (id, vol) in volumes.iter().enumerate() {
        let s = rng::derive_seed(seed, &[TAG_PATCHES]);
        pairs.extend(sample_patch_pairs(vol, config.r, config.patches_per_volume, s, config.include_exterior, id)?);
    }
    Ok(pairs)
}

/// Trains `ensemble_size` models, each on its own patch draw from `volumes`
/// and with its own initialisation and noise seeds.
pub fn train_ensemble(config: &TrainConfig, volumes: &[Volume]) -> Result<Vec<TrainOutcome>> {
    config.validate()?;
    if volumes.is_empty() {
        return Err(Error::Invalid("no training volumes".into()));
    }
    (0..config.ensemble_size)
        .map(|k| {
            let member = TrainConfig {
                seed: member_seed(config.seed, k),
                ..config.clone()
            };
            let pairs = sample_training_set(&member, volumes, member.seed)?;
            train(&member, &pairs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use crate::model::checkpoint::params_checksum;

    fn scalar_params() -> ModelParams {
        init_params(ArchConfig::new(1, 1, Variant::Baseline).unwrap(), 0).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = scalar_params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = p.zero_grads();
        adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut p = scalar_params();
        let mut s = AdamState::new(&p);
        let mut g = p.zero_grads();
        g[0][0] = 0.37;
        let before = p.tensors()[0].1.data()[0];
        adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
        let after = p.tensors()[0].1.data()[0];
        assert!(((after - before) - (-1e-3 * 0.37 / (0.37 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_sign() {
        let mut p = scalar_params();
        let mut s = AdamState::new(&p);
        let mut g = p.zero_grads();
        g[0][0] = -2.5;
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.tensors()[0].1.data()[0];
            adam_step(&mut p, &g, &mut s, 1e-3).unwrap();
            last = p.tensors()[0].1.data()[0] - before;
        }
        assert!((last - 1e-3).abs() < 1e-9, "{last}");
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = scalar_params();
        let mut s = AdamState::new(&p);
        let mut g = p.zero_grads();
        g[1][0] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &g, &mut s, 1e-3), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(train(&bad, &[]).is_err());
        let c = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        assert_eq!(c.kl_ramp(0), 0.5);
        assert_eq!(c.kl_ramp(1), 1.0);
        assert_eq!(c.kl_ramp(19), 1.0);
    }

    fn tiny_pairs(seed: u64, n: usize) -> Vec<PatchPair> {
        let hr = generate_phantom(&PhantomSpec {
            dims: [24; 3],
            c: 1,
            tensor_mode: false,
            seed,
            ..PhantomSpec::default()
        })
        .unwrap();
        sample_patch_pairs(&hr, 1, n, seed, true, 0).unwrap()
    }

    #[test]
    fn training_is_reproducible_and_selects_best() {
        let pairs = tiny_pairs(1, 6);
        let cfg = TrainConfig {
            variant: Variant::HeteroVd2,
            r: 1,
            epochs: 3,
            batch_size: 2,
            valid_fraction: 0.34,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train(&cfg, &pairs).unwrap();
        let b = train(&cfg, &pairs).unwrap();
        assert_eq!(a.log_jsonl(), b.log_jsonl());
        assert_eq!(params_checksum(&a.params), params_checksum(&b.params));
        assert_eq!((a.n_train, a.n_valid), (4, 2));
        assert!(a.log.iter().all(|e| a.best_valid <= e.valid));
        assert_eq!(a.log.len(), 3);
    }

    #[test]
    fn wrong_factor_is_rejected() {
        let pairs = tiny_pairs(2, 4);
        let cfg = TrainConfig {
            r: 2,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &pairs), Err(Error::Config(_))));
    }
}
