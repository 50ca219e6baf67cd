//! Whole-volume super-resolution by tessellation, Monte Carlo predictive
//! moments, inverse-variance ensemble fusion and propagation to MD/FA maps.

use serde::{Deserialize, Serialize};

use crate::data::Volume;
use crate::error::{Error, Result};
use crate::model::{self, checkpoint::params_checksum, ModelParams, Prediction, WeightSample, MARGIN, SIGMA_FLOOR};
use crate::par::Parallelism;
use crate::rng::{self, TAG_MC, TAG_OUTPUT_NOISE};

/// Default number of Monte Carlo samples.
pub const DEFAULT_SAMPLES: usize = 200;
/// Default LR input tile side.
pub const DEFAULT_TILE: usize = 22;

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

/// Pads every face by `m` voxels by mirroring about the edge voxel.
pub fn reflect_pad(vol: &Volume, m: usize) -> Result<Volume> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d <= m) {
        return Err(Error::TooSmall {
            got: dims,
            need: m + 1,
        });
    }
    let pd = dims.map(|d| d + 2 * m);
    let mut data = Vec::with_capacity(vol.channels() * pd.iter().product::<usize>());
    let m = m as isize;
    for ch in 0..vol.channels() {
        for z in 0..pd[0] as isize {
            let sz = reflect(z - m, dims[0]);
            for y in 0..pd[1] as isize {
                let sy = reflect(y - m, dims[1]);
                for x in 0..pd[2] as isize {
                    data.push(vol.get(ch, sz, sy, reflect(x - m, dims[2])));
                }
            }
        }
    }
    Volume::new(vol.channels(), pd, data, None)
}

/// HR reconstruction with a per-voxel write count.
#[derive(Debug, Clone, PartialEq)]
pub struct Tessellation {
    pub mean: Volume,
    pub sigma: Option<Volume>,
    /// Number of writes per HR voxel; identically 1 for a valid tiling.
    pub coverage: Vec<u32>,
}

fn tiles(n: usize, core: usize) -> Vec<(usize, usize)> {
    (0..n).step_by(core).map(|k| (k, core.min(n - k))).collect()
}

/// Reconstructs the HR volume from `lr` with input tiles of side `tile`,
/// using posterior-mean weights or the given draw.
pub fn tessellate(
    params: &ModelParams,
    lr: &Volume,
    tile: usize,
    sample: Option<&WeightSample>,
    parallelism: Parallelism,
) -> Result<Tessellation> {
    let (r, c) = (params.arch.r, params.arch.c);
    if lr.channels() != c {
        return Err(Error::shape(
            "super_resolve",
            format!("channel axis: model expects {c}, volume has {}", lr.channels()),
        ));
    }
    let dims = lr.dims();
    if dims.iter().any(|&d| d < model::RECEPTIVE_FIELD) {
        return Err(Error::TooSmall {
            got: dims,
            need: model::RECEPTIVE_FIELD,
        });
    }
    if tile < model::RECEPTIVE_FIELD {
        return Err(Error::Invalid(format!("tile side {tile} is below the receptive field")));
    }
    let padded = reflect_pad(lr, MARGIN)?;
    let core = tile - 2 * MARGIN;
    let boxes: Vec<([usize; 3], [usize; 3])> = tiles(dims[0], core)
        .into_iter()
        .flat_map(|z| tiles(dims[1], core).into_iter().map(move |y| (z, y)))
        .flat_map(|(z, y)| tiles(dims[2], core).into_iter().map(move |x| ([z.0, y.0, x.0], [z.1, y.1, x.1])))
        .collect();
    let preds: Vec<Result<Prediction>> = parallelism.map(boxes.len(), |i| {
        let (corner, size) = boxes[i];
        let x = padded.crop(corner, size.map(|s| s + 2 * MARGIN))?;
        model::predict(params, &x, sample)
    });
    let hr = dims.map(|d| d * r);
    let mut mean = Volume::zeros(c, hr);
    let mut sigma = params.arch.variant.is_hetero().then(|| Volume::zeros(c, hr));
    let mut coverage = vec![0u32; hr.iter().product()];
    for ((corner, size), p) in boxes.iter().zip(preds) {
        let p = p?;
        let at = corner.map(|v| v * r);
        mean.paste(at, &p.mu)?;
        if let (Some(s), Some(ps)) = (sigma.as_mut(), p.sigma.as_ref()) {
            s.paste(at, ps)?;
        }
        for z in 0..size[0] * r {
            for y in 0..size[1] * r {
                let row = ((at[0] + z) * hr[1] + at[1] + y) * hr[2] + at[2];
                coverage[row..row + size[2] * r].iter_mut().for_each(|v| *v += 1);
            }
        }
    }
    Ok(Tessellation { mean, sigma, coverage })
}

/// Posterior-mean HR reconstruction of a whole LR volume; dims are `r×`
/// those of `lr`.
pub fn super_resolve(params: &ModelParams, lr: &Volume, tile: usize, parallelism: Parallelism) -> Result<Volume> {
    Ok(tessellate(params, lr, tile, None, parallelism)?.mean)
}

/// Where a predictive result came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub variant: String,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub model_checksums: Vec<String>,
    /// Components whose variance estimate was clamped at zero.
    pub clamped: usize,
}

/// Per-component predictive mean and diagonal variance on the HR grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult {
    pub mean: Volume,
    pub variance: Volume,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub tile: usize,
    pub parallelism: Parallelism,
    /// Constant intrinsic variance added for mean-only variants.
    pub baseline_sigma2: Option<f64>,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            tile: DEFAULT_TILE,
            parallelism: Parallelism::Serial,
            baseline_sigma2: None,
        }
    }
}

/// Running per-component moments over samples: Welford mean and centred
/// sum of squares of `μᵗ` plus the sum of `σ²ᵗ`.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    intrinsic: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(len: usize) -> Self {
        MomentAccumulator {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
            intrinsic: vec![0.0; len],
        }
    }

    pub fn push(&mut self, mu: &[f64], sigma2: Option<&[f64]>) {
        self.n += 1;
        let k = self.n as f64;
        for i in 0..mu.len() {
            let delta = mu[i] - self.mean[i];
            self.mean[i] += delta / k;
            self.m2[i] += delta * (mu[i] - self.mean[i]);
        }
        if let Some(s) = sigma2 {
            self.intrinsic.iter_mut().zip(s).for_each(|(a, v)| *a += v);
        }
    }

    /// `(mean, variance, clamped)` with variance
    /// `(1/T)Σ(σ²ᵗ + μᵗ²) − μ̂²`, evaluated in centred form.
    pub fn finish(self) -> (Vec<f64>, Vec<f64>, usize) {
        let t = self.n.max(1) as f64;
        let mut clamped = 0;
        let var = self
            .m2
            .iter()
            .zip(&self.intrinsic)
            .map(|(m2, s)| {
                let v = s / t + m2 / t;
                if v < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    v
                }
            })
            .collect();
        (self.mean, var, clamped)
    }
}

fn draw(params: &ModelParams, seed: u64, t: usize) -> Result<Option<WeightSample>> {
    if params.arch.variant.is_variational() {
        Ok(Some(model::sample_weights(params, rng::derive_seed(seed, &[TAG_MC, t as u64]))?))
    } else {
        Ok(None)
    }
}

/// Monte Carlo predictive mean and diagonal variance from `samples` weight
/// draws; draw `t` uses seed `derive_seed(seed, [TAG_MC, t])`.
pub fn mc_predict(params: &ModelParams, lr: &Volume, samples: usize, seed: u64, opts: McOptions) -> Result<PredictiveResult> {
    if samples < 1 {
        return Err(Error::Invalid("at least one Monte Carlo sample is required".into()));
    }
    let c = params.arch.c;
    let hr = lr.dims().map(|d| d * params.arch.r);
    let mut acc = MomentAccumulator::new(c * hr.iter().product::<usize>());
    let constant = opts.baseline_sigma2.map(|s2| vec![s2; acc.mean.len()]);
    for t in 0..samples {
        let sample = draw(params, seed, t)?;
        let tess = tessellate(params, lr, opts.tile, sample.as_ref(), opts.parallelism)?;
        let s2: Option<Vec<f64>> = tess.sigma.as_ref().map(|s| s.data().iter().map(|v| v * v).collect());
        acc.push(tess.mean.data(), s2.as_deref().or(constant.as_deref()));
    }
    let (mean, variance, clamped) = acc.finish();
    Ok(PredictiveResult {
        mean: Volume::new(c, hr, mean, None)?,
        variance: Volume::new(c, hr, variance, None)?,
        provenance: Provenance {
            variant: params.arch.variant.to_string(),
            samples,
            seeds: vec![seed],
            model_checksums: vec![params_checksum(params)],
            clamped,
        },
    })
}

/// Inverse-variance weighted fusion of predictive results. Variances are
/// floored at `SIGMA_FLOOR²` before inversion.
pub fn ensemble_combine(results: &[PredictiveResult]) -> Result<PredictiveResult> {
    let first = results.first().ok_or_else(|| Error::Invalid("nothing to combine".into()))?;
    for r in results {
        r.mean.same_grid(&first.mean, "ensemble_combine")?;
        r.variance.same_grid(&first.mean, "ensemble_combine")?;
    }
    let floor = SIGMA_FLOOR * SIGMA_FLOOR;
    let provenance = Provenance {
        variant: first.provenance.variant.clone(),
        samples: results.iter().map(|r| r.provenance.samples).sum(),
        seeds: results.iter().flat_map(|r| r.provenance.seeds.clone()).collect(),
        model_checksums: results.iter().flat_map(|r| r.provenance.model_checksums.clone()).collect(),
        clamped: results.iter().map(|r| r.provenance.clamped).sum(),
    };
    let len = first.mean.data().len();
    let (mut mean, mut var) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for i in 0..len {
        if results.len() == 1 {
            mean.push(first.mean.data()[i]);
            var.push(first.variance.data()[i].max(floor));
            continue;
        }
        let (mut w_sum, mut wm_sum, mut best) = (0.0, 0.0, f64::INFINITY);
        for r in results {
            let v = r.variance.data()[i].max(floor);
            best = best.min(v);
            w_sum += 1.0 / v;
            wm_sum += r.mean.data()[i] / v;
        }
        mean.push(wm_sum / w_sum);
        // 1/Σw never exceeds the smallest member variance; the min only
        // removes rounding above it.
        var.push((1.0 / w_sum).min(best));
    }
    let c = first.mean.channels();
    Ok(PredictiveResult {
        mean: Volume::new(c, first.mean.dims(), mean, None)?,
        variance: Volume::new(c, first.mean.dims(), var, None)?,
        provenance,
    })
}

/// Scalar summaries of a symmetric diffusion tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarMap {
    /// Mean diffusivity, trace / 3.
    Md,
    /// Fractional anisotropy.
    Fa,
}

impl std::str::FromStr for ScalarMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "md" => Ok(ScalarMap::Md),
            "fa" => Ok(ScalarMap::Fa),
            _ => Err(Error::Invalid(format!("unknown scalar map '{s}' (expected md or fa)"))),
        }
    }
}

/// Mean diffusivity of `[Dxx, Dxy, Dxz, Dyy, Dyz, Dzz]`, written as an
/// offset from `Dxx` so that isotropic tensors give `Dxx` exactly.
pub fn mean_diffusivity(t: &[f64; 6]) -> f64 {
    t[0] + ((t[3] - t[0]) + (t[5] - t[0])) / 3.0
}

/// Fractional anisotropy `sqrt(3/2)·‖λ − λ̄‖/‖λ‖`, evaluated through the
/// Frobenius norms of `D − MD·I` and `D`, which equal the eigenvalue norms
/// for symmetric matrices. Zero for the zero tensor.
pub fn fractional_anisotropy(t: &[f64; 6]) -> f64 {
    let md = mean_diffusivity(t);
    let off = 2.0 * (t[1] * t[1] + t[2] * t[2] + t[4] * t[4]);
    let full = t[0] * t[0] + t[3] * t[3] + t[5] * t[5] + off;
    if full == 0.0 {
        return 0.0;
    }
    let dev = (t[0] - md).powi(2) + (t[3] - md).powi(2) + (t[5] - md).powi(2) + off;
    (1.5 * dev / full).sqrt()
}

/// Applies `map` to every voxel of a 6-channel tensor volume.
pub fn scalar_map(vol: &Volume, map: ScalarMap) -> Result<Volume> {
    if vol.channels() != 6 {
        return Err(Error::shape(
            "scalar_map",
            format!("channel axis: tensor layout needs 6 channels, got {}", vol.channels()),
        ));
    }
    let n = vol.voxels();
    let d = vol.data();
    let out = (0..n)
        .map(|i| {
            let t: [f64; 6] = std::array::from_fn(|ch| d[ch * n + i]);
            match map {
                ScalarMap::Md => mean_diffusivity(&t),
                ScalarMap::Fa => fractional_anisotropy(&t),
            }
        })
        .collect();
    Volume::new(1, vol.dims(), out, None)
}

/// Per-voxel predictive expectation and variance of MD or FA. Each of the
/// `samples` draws uses sampled weights and, for heteroscedastic variants,
/// an additional Gaussian draw `y = μ + σ·z` of every component.
pub fn scalar_map_propagate(
    params: &ModelParams,
    lr: &Volume,
    samples: usize,
    seed: u64,
    map: ScalarMap,
    opts: McOptions,
) -> Result<(Volume, Volume)> {
    if params.arch.c != 6 {
        return Err(Error::shape(
            "scalar_map_propagate",
            format!("channel axis: tensor layout needs 6 channels, got {}", params.arch.c),
        ));
    }
    if !params.arch.variant.is_variational() {
        return Err(Error::NotVariational(params.arch.variant.to_string()));
    }
    if samples < 1 {
        return Err(Error::Invalid("at least one Monte Carlo sample is required".into()));
    }
    let hr = lr.dims().map(|d| d * params.arch.r);
    let mut acc = MomentAccumulator::new(hr.iter().product());
    for t in 0..samples {
        let sample = draw(params, seed, t)?;
        let tess = tessellate(params, lr, opts.tile, sample.as_ref(), opts.parallelism)?;
        let mut y = tess.mean;
        if let Some(sigma) = &tess.sigma {
            let mut g = rng::stream(seed, &[TAG_OUTPUT_NOISE, t as u64]);
            for (v, s) in y.data_mut().iter_mut().zip(sigma.data()) {
                *v += s * rng::normal(&mut g);
            }
        }
        acc.push(scalar_map(&y, map)?.data(), None);
    }
    let (mean, var, _) = acc.finish();
    Ok((Volume::new(1, hr, mean, None)?, Volume::new(1, hr, var, None)?))
}
