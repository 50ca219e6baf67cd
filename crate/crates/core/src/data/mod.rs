//! Volumes, synthetic phantoms, block-mean downsampling and patch-pair
//! extraction.
//!
//! Grid alignment: LR voxel `(i, j, k)` covers the HR block with corner
//! `(r·i, r·j, r·k)`. A training pair takes an `11³` LR patch with corner
//! `L`; its target is the `(7r)³` HR box with corner `r·(L + 2)`, i.e. the
//! HR content of the central `7³` LR voxels.

pub mod morph;
mod phantom;
mod volume;

pub use phantom::{
    audit_positive_definite, field_gradient_bound, generate_phantom, is_positive_definite, noise_std_map,
    tensor_at, PhantomSpec, TENSOR_CHANNELS,
};
pub use volume::{
    decode_vxl, encode_vxl, load_volume, provenance_path, save_volume, DType, Volume, VXL_MAGIC, VXL_VERSION,
};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MARGIN;
use crate::rng::{self, TAG_PATCHES, TAG_SPLIT};
use crate::tensor::Tensor;

/// Side of an LR training patch.
pub const LR_PATCH: usize = 11;
/// Side of the LR region whose HR content is the target.
pub const CORE: usize = LR_PATCH - 2 * MARGIN;

/// Averages each `r³` block per channel; the mask is kept where more than
/// half of the block is foreground.
pub fn block_mean_downsample(vol: &Volume, r: usize) -> Result<Volume> {
    if r == 0 {
        return Err(Error::Invalid("downsampling factor must be >= 1".into()));
    }
    let dims = vol.dims();
    if dims.iter().any(|d| d % r != 0) {
        return Err(Error::Invalid(format!("dims {dims:?} are not divisible by r = {r}")));
    }
    let lr = dims.map(|d| d / r);
    let n_lr = lr.iter().product::<usize>();
    let scale = 1.0 / (r * r * r) as f64;
    let mut data = Vec::with_capacity(vol.channels() * n_lr);
    for ch in 0..vol.channels() {
        let src = vol.channel(ch);
        for z in 0..lr[0] {
            for y in 0..lr[1] {
                for x in 0..lr[2] {
                    let mut s = 0.0;
                    for a in 0..r {
                        for b in 0..r {
                            let row = vol.index(r * z + a, r * y + b, r * x);
                            s += src[row..row + r].iter().sum::<f64>();
                        }
                    }
                    data.push(s * scale);
                }
            }
        }
    }
    let mask = vol.mask().map(|m| {
        let mut out = Vec::with_capacity(n_lr);
        for z in 0..lr[0] {
            for y in 0..lr[1] {
                for x in 0..lr[2] {
                    let mut count = 0;
                    for a in 0..r {
                        for b in 0..r {
                            let row = vol.index(r * z + a, r * y + b, r * x);
                            count += m[row..row + r].iter().filter(|&&v| v).count();
                        }
                    }
                    out.push(2 * count > r * r * r);
                }
            }
        }
        out
    });
    Volume::new(vol.channels(), lr, data, mask)
}

/// One LR input patch and its aligned HR target.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    /// `[c, 11, 11, 11]`.
    pub lr: Tensor,
    /// `[c, 7r, 7r, 7r]`.
    pub hr: Tensor,
    pub volume_id: usize,
    /// HR corner of the target box.
    pub hr_corner: [usize; 3],
}

/// Where patch centres may fall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentreRegion {
    /// LR mask eroded by the receptive-field radius.
    Interior,
    /// Interior plus the boundary shell (dilation minus erosion).
    WithExterior,
}

/// LR voxels that may serve as patch centres.
pub fn eligible_centres(lr_mask: &[bool], lr_dims: [usize; 3], region: CentreRegion) -> Vec<[usize; 3]> {
    let grown = match region {
        CentreRegion::Interior => morph::erode(lr_mask, lr_dims, MARGIN),
        CentreRegion::WithExterior => morph::dilate(lr_mask, lr_dims, MARGIN),
    };
    let half = LR_PATCH / 2;
    let mut out = Vec::new();
    for z in half..lr_dims[0].saturating_sub(half) {
        for y in half..lr_dims[1].saturating_sub(half) {
            for x in half..lr_dims[2].saturating_sub(half) {
                if grown[(z * lr_dims[1] + y) * lr_dims[2] + x] {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Draws `n` pairs (with replacement) from `hr`, whose LR counterpart is
/// `block_mean_downsample(hr, r)`. Deterministic in `seed`.
pub fn sample_patch_pairs(
    hr: &Volume,
    r: usize,
    n: usize,
    seed: u64,
    include_exterior: bool,
    volume_id: usize,
) -> Result<Vec<PatchPair>> {
    let lr = block_mean_downsample(hr, r)?;
    let lr_dims = lr.dims();
    if lr_dims.iter().any(|&d| d < LR_PATCH) {
        return Err(Error::TooSmall {
            got: lr_dims,
            need: LR_PATCH,
        });
    }
    let all = vec![true; lr.voxels()];
    let mask = lr.mask().unwrap_or(&all);
    let region = if include_exterior {
        CentreRegion::WithExterior
    } else {
        CentreRegion::Interior
    };
    let centres = eligible_centres(mask, lr_dims, region);
    if centres.is_empty() && n > 0 {
        return Err(Error::NotEnoughPatches { requested: n, found: 0 });
    }
    let mut g = rng::stream(seed, &[TAG_PATCHES, volume_id as u64]);
    let half = LR_PATCH / 2;
    (0..n)
        .map(|_| {
            let c = centres[g.random_range(0..centres.len())];
            let corner = c.map(|v| v - half);
            let hr_corner = corner.map(|v| r * (v + MARGIN));
            Ok(PatchPair {
                lr: lr.crop(corner, [LR_PATCH; 3])?,
                hr: hr.crop(hr_corner, [CORE * r; 3])?,
                volume_id,
                hr_corner,
            })
        })
        .collect()
}

/// Deterministic shuffle-split; `valid_fraction` of the items (rounded,
/// at least one) go to validation.
pub fn split_train_valid<T: Clone>(items: &[T], valid_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "validation fraction must lie in (0, 1), got {valid_fraction}"
        )));
    }
    let n = items.len();
    let nv = ((n as f64 * valid_fraction).round() as usize).max(1);
    if n < 2 || nv >= n {
        return Err(Error::Invalid(format!(
            "cannot split {n} items with validation fraction {valid_fraction}: a side would be empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[TAG_SPLIT]));
    let valid = order[..nv].iter().map(|&i| items[i].clone()).collect();
    let train = order[nv..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, valid))
}

/// Trilinear upsampling by `r` with voxel-centre alignment: HR voxel `h`
/// sits at LR coordinate `(h + ½)/r − ½`, clamped to the grid.
pub fn trilinear_upsample(lr: &Volume, r: usize) -> Volume {
    let ld = lr.dims();
    let hd = ld.map(|d| d * r);
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..hd[a])
            .map(|h| {
                let u = ((h as f64 + 0.5) / r as f64 - 0.5).clamp(0.0, (ld[a] - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(ld[a] - 1);
                (i0, i1, u - i0 as f64)
            })
            .collect()
    };
    let (az, ay, ax) = (axis(0), axis(1), axis(2));
    let n = hd.iter().product::<usize>();
    let mut data = Vec::with_capacity(lr.channels() * n);
    for ch in 0..lr.channels() {
        for &(z0, z1, tz) in &az {
            for &(y0, y1, ty) in &ay {
                for &(x0, x1, tx) in &ax {
                    let v = |z, y, x| lr.get(ch, z, y, x);
                    let c00 = v(z0, y0, x0) * (1.0 - tx) + v(z0, y0, x1) * tx;
                    let c01 = v(z0, y1, x0) * (1.0 - tx) + v(z0, y1, x1) * tx;
                    let c10 = v(z1, y0, x0) * (1.0 - tx) + v(z1, y0, x1) * tx;
                    let c11 = v(z1, y1, x0) * (1.0 - tx) + v(z1, y1, x1) * tx;
                    let c0 = c00 * (1.0 - ty) + c01 * ty;
                    let c1 = c10 * (1.0 - ty) + c11 * ty;
                    data.push(c0 * (1.0 - tz) + c1 * tz);
                }
            }
        }
    }
    Volume::new(lr.channels(), hd, data, None).expect("consistent dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, dims: [usize; 3]) -> Volume {
        let n = c * dims.iter().product::<usize>();
        Volume::new(c, dims, (0..n).map(|i| (i as f64 * 0.37).sin()).collect(), None).unwrap()
    }

    #[test]
    fn downsample_identity_and_constant() {
        let v = ramp(2, [4, 6, 8]);
        assert_eq!(block_mean_downsample(&v, 1).unwrap(), v);
        let k = Volume::new(1, [4, 4, 4], vec![2.5; 64], None).unwrap();
        let d = block_mean_downsample(&k, 2).unwrap();
        assert_eq!(d.dims(), [2, 2, 2]);
        assert!(d.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn downsample_hand_block() {
        let v = Volume::new(1, [2, 2, 2], (1..=8).map(f64::from).collect(), None).unwrap();
        assert_eq!(block_mean_downsample(&v, 2).unwrap().data(), &[4.5]);
        assert!(block_mean_downsample(&ramp(1, [4, 4, 5]), 2).is_err());
    }

    #[test]
    fn downsample_mask_majority() {
        let mut m = vec![false; 8];
        m[..5].fill(true);
        let v = Volume::new(1, [2, 2, 2], vec![0.0; 8], Some(m)).unwrap();
        assert_eq!(block_mean_downsample(&v, 2).unwrap().mask().unwrap(), &[true]);
        let mut m = vec![false; 8];
        m[..4].fill(true);
        let v = v.with_mask(Some(m)).unwrap();
        assert_eq!(block_mean_downsample(&v, 2).unwrap().mask().unwrap(), &[false]);
    }

    #[test]
    fn downsample_commutes_with_aligned_crop() {
        let v = ramp(2, [12, 12, 12]);
        let r = 3;
        let crop = Volume::from_tensor(&v.crop([3, 6, 0], [6, 6, 9]).unwrap()).unwrap();
        let a = block_mean_downsample(&crop, r).unwrap();
        let b = block_mean_downsample(&v, r).unwrap().crop([1, 2, 0], [2, 2, 3]).unwrap();
        assert_eq!(a.to_tensor().data(), b.data());
    }

    fn phantom(seed: u64) -> Volume {
        generate_phantom(&PhantomSpec {
            dims: [32, 32, 32],
            seed,
            ..PhantomSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn patch_pairs_are_aligned() {
        let hr = phantom(1);
        let r = 2;
        let pairs = sample_patch_pairs(&hr, r, 12, 5, true, 0).unwrap();
        assert_eq!(pairs.len(), 12);
        for p in &pairs {
            assert_eq!(p.lr.shape(), &[6, 11, 11, 11]);
            assert_eq!(p.hr.shape(), &[6, 14, 14, 14]);
            assert_eq!(p.hr, hr.crop(p.hr_corner, [14; 3]).unwrap());
            let down = block_mean_downsample(&Volume::from_tensor(&p.hr).unwrap(), r).unwrap();
            let centre = Volume::from_tensor(&p.lr).unwrap().crop([2; 3], [7; 3]).unwrap();
            assert_eq!(down.to_tensor().data(), centre.data());
        }
        assert_eq!(pairs, sample_patch_pairs(&hr, r, 12, 5, true, 0).unwrap());
    }

    #[test]
    fn exterior_flag_widens_centres() {
        let lr = block_mean_downsample(&phantom(2), 2).unwrap();
        let inner = eligible_centres(lr.mask().unwrap(), lr.dims(), CentreRegion::Interior);
        let outer = eligible_centres(lr.mask().unwrap(), lr.dims(), CentreRegion::WithExterior);
        assert!(!inner.is_empty());
        assert!(outer.len() > inner.len());
        assert!(inner.iter().all(|c| outer.contains(c)));
    }

    #[test]
    fn empty_mask_has_no_patches() {
        let v = ramp(1, [24, 24, 24]).with_mask(Some(vec![false; 24 * 24 * 24])).unwrap();
        assert!(matches!(
            sample_patch_pairs(&v, 2, 3, 0, false, 0),
            Err(Error::NotEnoughPatches { .. })
        ));
    }

    #[test]
    fn paper_scale_receptive_field_count() {
        assert_eq!(4000 * CORE.pow(3), 1_372_000);
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let items: Vec<u32> = (0..10).collect();
        let (t, v) = split_train_valid(&items, 0.5, 3).unwrap();
        assert_eq!((t.len(), v.len()), (5, 5));
        let mut all: Vec<u32> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!((t.clone(), v.clone()), split_train_valid(&items, 0.5, 3).unwrap());
        assert!(split_train_valid(&items, 0.0, 3).is_err());
        assert!(split_train_valid(&items[..1], 0.5, 3).is_err());
    }

    #[test]
    fn trilinear_reproduces_linear_ramps_inside() {
        let lr = Volume::new(
            1,
            [4, 4, 4],
            (0..64).map(|i| (i / 16) as f64 + 2.0 * ((i / 4) % 4) as f64 - (i % 4) as f64).collect(),
            None,
        )
        .unwrap();
        let hr = trilinear_upsample(&lr, 2);
        assert_eq!(hr.dims(), [8, 8, 8]);
        // interior HR voxel (3,3,3) maps to LR coordinate 1.25 on each axis
        assert!((hr.get(0, 3, 3, 3) - (1.25 + 2.5 - 1.25)).abs() < 1e-12);
        let k = Volume::new(1, [3, 3, 3], vec![1.5; 27], None).unwrap();
        assert!(trilinear_upsample(&k, 3).data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }
}
