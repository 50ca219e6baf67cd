use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::morph;
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::rng::{self, Rng, TAG_PHANTOM};

/// Channel order of the symmetric-tensor layout.
pub const TENSOR_CHANNELS: [&str; 6] = ["Dxx", "Dxy", "Dxz", "Dyy", "Dyz", "Dzz"];

/// Parameters of a synthetic phantom.
///
/// The volume is a sum of a piecewise-constant region map (an ellipsoidal
/// body plus smaller ellipsoidal inclusions inside it), smooth band-limited
/// random fields, and additive noise whose amplitude follows its own smooth
/// field, so that the irreducible error of the LR→HR mapping varies across
/// space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub c: usize,
    pub seed: u64,
    /// Number of cosine components per smooth field.
    pub field_components: usize,
    /// Largest spatial frequency of the smooth fields, in cycles per voxel.
    pub band_limit: f64,
    /// Scale of the smooth fields relative to the region signatures.
    pub field_amplitude: f64,
    /// Whether to draw the large ellipsoidal body.
    pub body: bool,
    /// Number of small inclusions inside the body.
    pub inclusions: usize,
    /// Semi-axis range of the inclusions as a fraction of the smallest dim.
    pub inclusion_radius: [f64; 2],
    /// Largest per-voxel noise standard deviation.
    pub noise_amplitude: f64,
    /// Ratio between the largest and smallest noise standard deviation.
    pub noise_contrast: f64,
    /// Build `c = 6` symmetric positive-definite tensors
    /// (`D = d·I + a·v·vᵀ` per voxel) in [`TENSOR_CHANNELS`] order.
    pub tensor_mode: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            c: 6,
            seed: 0,
            field_components: 8,
            band_limit: 0.08,
            field_amplitude: 0.3,
            body: true,
            inclusions: 6,
            inclusion_radius: [0.08, 0.18],
            noise_amplitude: 0.01,
            noise_contrast: 8.0,
            tensor_mode: true,
        }
    }
}

/// Smallest base diffusivity drawn for any tensor-mode region.
const MIN_DIFFUSIVITY: f64 = 0.5;
const NOISE_CLIP: f64 = 3.0;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("phantom: {m}")));
        if self.dims.iter().any(|&d| d == 0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.c == 0 {
            return bad("c must be at least 1".into());
        }
        if self.tensor_mode && self.c != 6 {
            return bad(format!("tensor mode needs c = 6, got {}", self.c));
        }
        if !(self.band_limit > 0.0 && self.band_limit <= 0.5) {
            return bad(format!("band_limit must lie in (0, 0.5], got {}", self.band_limit));
        }
        let [lo, hi] = self.inclusion_radius;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad(format!("inclusion_radius must satisfy 0 < lo <= hi < 0.5, got {lo}, {hi}"));
        }
        if self.field_amplitude < 0.0 || self.noise_amplitude < 0.0 {
            return bad("amplitudes must be non-negative".into());
        }
        if !(self.noise_contrast >= 1.0) {
            return bad(format!("noise_contrast must be >= 1, got {}", self.noise_contrast));
        }
        if self.inclusions > 0 && !self.body {
            return bad("inclusions are placed inside the body".into());
        }
        if self.tensor_mode {
            // Clipped symmetric noise has Frobenius norm at most 3·clip·amp.
            let worst = 3.0 * NOISE_CLIP * self.noise_amplitude;
            let floor = MIN_DIFFUSIVITY * (-self.field_amplitude).exp();
            if worst >= floor {
                return bad(format!(
                    "noise_amplitude {} can break positive-definiteness (need < {:.4})",
                    self.noise_amplitude,
                    floor / (3.0 * NOISE_CLIP)
                ));
            }
        }
        Ok(())
    }
}

/// Sum of cosines with `|k| ≤ band` cycles/voxel, scaled so `|f| ≤ 1`.
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut Rng, components: usize, band: f64) -> Self {
        let k = components.max(1);
        let waves = (0..k)
            .map(|_| {
                let dir = unit_vector(rng);
                let freq = band * rng.random::<f64>().cbrt();
                let wave = dir.map(|d| 2.0 * PI * freq * d);
                (wave, rng.random::<f64>() * 2.0 * PI, 1.0 / k as f64)
            })
            .collect();
        SmoothField { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, phase, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum()
    }

    /// Upper bound on `|∇f|` in value per voxel.
    fn gradient_bound(&self) -> f64 {
        self.waves
            .iter()
            .map(|(k, _, a)| a * (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt())
            .sum()
    }
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng::normal(rng), rng::normal(rng), rng::normal(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

struct Ellipsoid {
    centre: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.semi[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// Per-region appearance: channel values, or tensor parameters.
enum Signature {
    Channels(Vec<f64>),
    Tensor { d: f64, a: f64, v: [f64; 3] },
}

fn draw_signature(rng: &mut Rng, spec: &PhantomSpec) -> Signature {
    if spec.tensor_mode {
        Signature::Tensor {
            d: MIN_DIFFUSIVITY + 0.6 * rng.random::<f64>(),
            a: 1.5 * rng.random::<f64>(),
            v: unit_vector(rng),
        }
    } else {
        Signature::Channels((0..spec.c).map(|_| 0.5 + rng.random::<f64>()).collect())
    }
}

fn voxel_centre(dims: [usize; 3], i: usize) -> [f64; 3] {
    let x = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let z = i / (dims[1] * dims[2]);
    [z as f64, y as f64, x as f64]
}

/// The piecewise-constant region map and mask of a phantom. Label 0 is
/// background, 1 the body (extended over the dilation ring of the mask),
/// `k + 2` the k-th inclusion.
fn regions(spec: &PhantomSpec, rng: &mut Rng) -> (Vec<usize>, Vec<bool>) {
    let dims = spec.dims;
    let n = dims.iter().product::<usize>();
    let mut shapes = Vec::new();
    if spec.body {
        let centre = dims.map(|d| (d as f64 - 1.0) / 2.0 + (rng.random::<f64>() - 0.5) * 0.05 * d as f64);
        let semi = dims.map(|d| d as f64 * (0.36 + 0.06 * rng.random::<f64>()));
        shapes.push(Ellipsoid { centre, semi });
        let side = dims.iter().copied().min().unwrap() as f64;
        let [lo, hi] = spec.inclusion_radius;
        for _ in 0..spec.inclusions {
            let body = &shapes[0];
            let centre = std::array::from_fn(|a| body.centre[a] + body.semi[a] * 0.6 * (2.0 * rng.random::<f64>() - 1.0));
            let semi = std::array::from_fn(|_| side * (lo + (hi - lo) * rng.random::<f64>()));
            shapes.push(Ellipsoid { centre, semi });
        }
    }
    let mut label = vec![0usize; n];
    for (i, l) in label.iter_mut().enumerate() {
        let p = voxel_centre(dims, i);
        for (k, e) in shapes.iter().enumerate() {
            if e.contains(p) {
                *l = k + 1;
            }
        }
    }
    let mask = if shapes.is_empty() {
        vec![true; n]
    } else {
        let inside: Vec<bool> = label.iter().map(|&l| l > 0).collect();
        morph::dilate(&inside, dims, 1)
    };
    for (l, &m) in label.iter_mut().zip(&mask) {
        if m && *l == 0 && spec.body {
            *l = 1;
        }
    }
    (label, mask)
}

/// Deterministic synthetic volume; see [`PhantomSpec`].
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.iter().product::<usize>();
    let mut rng = rng::stream(spec.seed, &[TAG_PHANTOM, 0]);
    let (label, mask) = regions(spec, &mut rng);
    let nregions = label.iter().copied().max().unwrap_or(0) + 1;
    let mut srng = rng::stream(spec.seed, &[TAG_PHANTOM, 1]);
    let signatures: Vec<Signature> = (0..nregions).map(|_| draw_signature(&mut srng, spec)).collect();
    let nfields = if spec.tensor_mode { 5 } else { spec.c };
    let mut frng = rng::stream(spec.seed, &[TAG_PHANTOM, 2]);
    let fields: Vec<SmoothField> = (0..nfields)
        .map(|_| SmoothField::new(&mut frng, spec.field_components, spec.band_limit))
        .collect();
    let noise_field = SmoothField::new(&mut frng, spec.field_components, spec.band_limit);
    let noise_sd = noise_sd_map(spec, &noise_field);
    let mut nrng = rng::stream(spec.seed, &[TAG_PHANTOM, 3]);

    let c = spec.c;
    let amp = spec.field_amplitude;
    let mut data = vec![0.0; c * n];
    for i in 0..n {
        let p = voxel_centre(dims, i);
        let f: Vec<f64> = fields.iter().map(|g| g.at(p)).collect();
        let l = label[i];
        match &signatures[l] {
            Signature::Channels(sig) => {
                let base = if l == 0 { 0.0 } else { 1.0 };
                for ch in 0..c {
                    data[ch * n + i] = base * sig[ch] + amp * f[ch];
                }
            }
            Signature::Tensor { d, a, v } => {
                if l > 0 {
                    let d = d * (amp * f[0]).exp();
                    let a = a * (amp * f[1]).exp();
                    let w = [v[0] + amp * f[2], v[1] + amp * f[3], v[2] + amp * f[4]];
                    let norm = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt().max(1e-12);
                    let w = w.map(|x| x / norm);
                    let t = [
                        d + a * w[0] * w[0],
                        a * w[0] * w[1],
                        a * w[0] * w[2],
                        d + a * w[1] * w[1],
                        a * w[1] * w[2],
                        d + a * w[2] * w[2],
                    ];
                    for ch in 0..6 {
                        data[ch * n + i] = t[ch];
                    }
                }
            }
        }
        if spec.noise_amplitude > 0.0 {
            for ch in 0..c {
                let z = rng::normal(&mut nrng).clamp(-NOISE_CLIP, NOISE_CLIP);
                data[ch * n + i] += noise_sd[i] * z;
            }
        }
    }
    Volume::new(c, dims, data, Some(mask))
}

/// Standard deviation of the additive noise at every voxel, matching the
/// field used by [`generate_phantom`] (before clipping).
pub fn noise_std_map(spec: &PhantomSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut frng = rng::stream(spec.seed, &[TAG_PHANTOM, 2]);
    let nfields = if spec.tensor_mode { 5 } else { spec.c };
    for _ in 0..nfields {
        SmoothField::new(&mut frng, spec.field_components, spec.band_limit);
    }
    let noise_field = SmoothField::new(&mut frng, spec.field_components, spec.band_limit);
    Ok(noise_sd_map(spec, &noise_field))
}

/// The noise field rescaled over the grid so its extremes map to
/// `amplitude / contrast` and `amplitude`, spaced geometrically in between.
fn noise_sd_map(spec: &PhantomSpec, field: &SmoothField) -> Vec<f64> {
    let n = spec.dims.iter().product::<usize>();
    let f: Vec<f64> = (0..n).map(|i| field.at(voxel_centre(spec.dims, i))).collect();
    let (min, max) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = max - min;
    let lo = 1.0 / spec.noise_contrast;
    f.iter()
        .map(|&v| {
            let u = if span > 0.0 { (v - min) / span } else { 1.0 };
            spec.noise_amplitude * lo.powf(1.0 - u)
        })
        .collect()
}

/// Upper bound on the per-voxel gradient of one smooth field of `spec`
/// (unit amplitude), for spectral-content checks.
pub fn field_gradient_bound(spec: &PhantomSpec) -> f64 {
    let mut frng = rng::stream(spec.seed, &[TAG_PHANTOM, 2]);
    SmoothField::new(&mut frng, spec.field_components, spec.band_limit).gradient_bound()
}

/// Assembles the symmetric 3×3 matrix of voxel `i` from a 6-channel volume.
pub fn tensor_at(vol: &Volume, i: usize) -> [[f64; 3]; 3] {
    let n = vol.voxels();
    let d = vol.data();
    let [xx, xy, xz, yy, yz, zz] = std::array::from_fn(|ch| d[ch * n + i]);
    [[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]]
}

/// Positive-definiteness by leading principal minors.
pub fn is_positive_definite(m: &[[f64; 3]; 3]) -> bool {
    let m1 = m[0][0];
    let m2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let m3 = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    m1 > 0.0 && m2 > 0.0 && m3 > 0.0
}

/// Number of masked voxels whose tensor is not positive-definite.
pub fn audit_positive_definite(vol: &Volume) -> Result<usize> {
    if vol.channels() != 6 {
        return Err(Error::shape("audit", format!("channel axis: need 6, got {}", vol.channels())));
    }
    let all = vec![true; vol.voxels()];
    let mask = vol.mask().unwrap_or(&all);
    Ok((0..vol.voxels())
        .filter(|&i| mask[i] && !is_positive_definite(&tensor_at(vol, i)))
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [20, 18, 16],
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn reproducible_by_seed() {
        let a = generate_phantom(&small(4)).unwrap();
        assert_eq!(a, generate_phantom(&small(4)).unwrap());
        assert_ne!(a, generate_phantom(&small(5)).unwrap());
    }

    #[test]
    fn smooth_field_gradient_is_band_limited() {
        let spec = PhantomSpec {
            dims: [24, 24, 24],
            c: 1,
            tensor_mode: false,
            field_components: 1,
            field_amplitude: 1.0,
            body: false,
            inclusions: 0,
            noise_amplitude: 0.0,
            band_limit: 0.1,
            seed: 9,
            ..PhantomSpec::default()
        };
        let v = generate_phantom(&spec).unwrap();
        let bound = field_gradient_bound(&spec);
        assert!(bound <= 2.0 * PI * 0.1 + 1e-12);
        let [d, h, w] = v.dims();
        let mut worst: f64 = 0.0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w - 1 {
                    worst = worst.max((v.get(0, z, y, x + 1) - v.get(0, z, y, x)).abs());
                }
            }
        }
        assert!(worst <= bound + 1e-12, "{worst} > {bound}");
        assert!(v.mask().unwrap().iter().all(|&m| m));
    }

    #[test]
    fn tensors_positive_definite_inside_mask() {
        let spec = PhantomSpec {
            noise_amplitude: 0.03,
            ..small(2)
        };
        let v = generate_phantom(&spec).unwrap();
        assert_eq!(audit_positive_definite(&v).unwrap(), 0);
        assert!(v.mask().unwrap().iter().filter(|&&m| m).count() > 500);
    }

    #[test]
    fn noise_bound_is_enforced() {
        let spec = PhantomSpec {
            noise_amplitude: 0.2,
            ..small(2)
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Invalid(_))));
        let spec = PhantomSpec {
            c: 3,
            ..small(2)
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn sylvester_criterion() {
        assert!(is_positive_definite(&[[2.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 0.1]]));
        assert!(!is_positive_definite(&[[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]]));
        assert!(!is_positive_definite(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]));
    }

    #[test]
    fn noise_map_spans_contrast() {
        let spec = small(3);
        let m = noise_std_map(&spec).unwrap();
        let max = m.iter().cloned().fold(0.0, f64::max);
        let min = m.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((max - spec.noise_amplitude).abs() <= 1e-15);
        assert!((min - spec.noise_amplitude / spec.noise_contrast).abs() <= 1e-15);
    }
}
