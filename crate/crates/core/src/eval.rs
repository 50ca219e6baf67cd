//! Reconstruction metrics over interior/exterior regions and the rank
//! correlation between predicted variance and squared error.

use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{morph, Volume};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Disjoint interior and boundary-shell regions of a foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub interior: Vec<bool>,
    pub exterior: Vec<bool>,
}

/// Interior is `mask` eroded by `margin` voxels (cube element); exterior is
/// the rest of `mask`.
pub fn region_masks(mask: &[bool], dims: [usize; 3], margin: usize) -> Result<RegionMasks> {
    if mask.len() != dims.iter().product::<usize>() {
        return Err(Error::shape("region_masks", "mask size differs from grid"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyRegion("foreground mask is empty".into()));
    }
    let interior = morph::erode(mask, dims, margin);
    if !interior.iter().any(|&m| m) {
        return Err(Error::EmptyRegion(format!("mask vanishes under erosion by {margin}")));
    }
    let exterior = mask.iter().zip(&interior).map(|(&m, &i)| m && !i).collect();
    Ok(RegionMasks { interior, exterior })
}

fn check(pred: &Volume, truth: &Volume, region: &[bool], op: &'static str) -> Result<usize> {
    pred.same_grid(truth, op)?;
    if region.len() != truth.voxels() {
        return Err(Error::shape(op, "region size differs from grid"));
    }
    let n = region.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyRegion(op.to_string()));
    }
    Ok(n)
}

/// Root mean squared error over region voxels and all channels.
pub fn rmse(pred: &Volume, truth: &Volume, region: &[bool]) -> Result<f64> {
    let n = check(pred, truth, region, "rmse")?;
    let nv = truth.voxels();
    let mut s = 0.0;
    for ch in 0..truth.channels() {
        let (p, t) = (pred.channel(ch), truth.channel(ch));
        for i in (0..nv).filter(|&i| region[i]) {
            s += (p[i] - t[i]).powi(2);
        }
    }
    Ok((s / (n * truth.channels()) as f64).sqrt())
}

/// Largest absolute truth value over the region.
pub fn peak(truth: &Volume, region: &[bool]) -> f64 {
    let nv = truth.voxels();
    (0..truth.channels())
        .flat_map(|ch| {
            let t = truth.channel(ch);
            (0..nv).filter(|&i| region[i]).map(move |i| t[i].abs())
        })
        .fold(0.0, f64::max)
}

/// `20·log10(peak / RMSE)`; `+∞` for a perfect reconstruction. `peak`
/// defaults to the truth's max-abs over the region.
pub fn psnr(pred: &Volume, truth: &Volume, region: &[bool], peak_override: Option<f64>) -> Result<f64> {
    let e = rmse(pred, truth, region)?;
    let p = peak_override.unwrap_or_else(|| peak(truth, region));
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (p / e).log10())
}

/// Sums of `f` over the `(2h+1)³` window around every voxel, clipped at the
/// grid border (separable).
fn box_sum(f: &[f64], dims: [usize; 3], h: usize) -> Vec<f64> {
    let mut cur = f.to_vec();
    for axis in 0..3 {
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let len = dims[axis];
        let next: Vec<f64> = (0..cur.len())
            .map(|i| {
                let pos = (i / stride) % len;
                let base = i - pos * stride;
                let lo = pos.saturating_sub(h);
                let hi = (pos + h).min(len - 1);
                (lo..=hi).map(|p| cur[base + p * stride]).sum()
            })
            .collect();
        cur = next;
    }
    cur
}

/// Mean local SSIM over region voxels, averaged over channels.
///
/// Local statistics use a uniform `5³` window restricted to region voxels
/// inside the grid, so values outside the region never enter the score.
/// `C1 = (K1·L)²`, `C2 = (K2·L)²` with `L` the truth's range over the
/// region, per channel.
pub fn mssim(pred: &Volume, truth: &Volume, region: &[bool]) -> Result<f64> {
    check(pred, truth, region, "mssim")?;
    let dims = truth.dims();
    let h = SSIM_WINDOW / 2;
    let m: Vec<f64> = region.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let count = box_sum(&m, dims, h);
    let mut total = 0.0;
    for ch in 0..truth.channels() {
        let (x, y) = (pred.channel(ch), truth.channel(ch));
        let (lo, hi) = (0..y.len())
            .filter(|&i| region[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), i| (a.min(y[i]), b.max(y[i])));
        let range = hi - lo;
        if range <= 0.0 {
            return Err(Error::Undefined(format!("zero dynamic range in channel {ch}")));
        }
        let c1 = (SSIM_K1 * range).powi(2);
        let c2 = (SSIM_K2 * range).powi(2);
        let masked = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            let v: Vec<f64> = (0..m.len()).map(|i| if region[i] { f(i) } else { 0.0 }).collect();
            box_sum(&v, dims, h)
        };
        let sx = masked(&|i| x[i]);
        let sy = masked(&|i| y[i]);
        let sxx = masked(&|i| x[i] * x[i]);
        let syy = masked(&|i| y[i] * y[i]);
        let sxy = masked(&|i| x[i] * y[i]);
        let (mut acc, mut n) = (0.0, 0usize);
        for i in (0..m.len()).filter(|&i| region[i]) {
            let k = count[i];
            let (mx, my) = (sx[i] / k, sy[i] / k);
            let vx = sxx[i] / k - mx * mx;
            let vy = syy[i] / k - my * my;
            let cxy = sxy[i] / k - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
        total += acc / n as f64;
    }
    Ok(total / truth.channels() as f64)
}

/// Ranks with ties given the mean of their positions (1-based).
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("rank correlation of a constant input".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Spearman correlation of two equally long samples.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spearman", format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Undefined("rank correlation needs two values".into()));
    }
    pearson(&mid_ranks(a), &mid_ranks(b))
}

/// Spearman ρ between predicted variance and squared error over region
/// voxels (every channel of the given volumes).
pub fn uncertainty_correlation(pred_var: &Volume, sq_error: &Volume, region: &[bool]) -> Result<f64> {
    check(pred_var, sq_error, region, "uncertainty_correlation")?;
    let nv = region.len();
    let pick = |v: &Volume| -> Vec<f64> {
        (0..v.channels())
            .flat_map(|ch| {
                let c = v.channel(ch);
                (0..nv).filter(|&i| region[i]).map(move |i| c[i])
            })
            .collect()
    };
    spearman(&pick(pred_var), &pick(sq_error))
}

/// Sums channels into a single-channel volume (e.g. total variance or
/// squared error norm per voxel).
pub fn channel_sum(v: &Volume) -> Volume {
    let n = v.voxels();
    let data = (0..n).map(|i| (0..v.channels()).map(|ch| v.data()[ch * n + i]).sum()).collect();
    Volume::new(1, v.dims(), data, None).expect("consistent dims")
}

/// Per-component squared error.
pub fn squared_error(pred: &Volume, truth: &Volume) -> Result<Volume> {
    pred.same_grid(truth, "squared_error")?;
    let data = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).powi(2)).collect();
    Volume::new(truth.channels(), truth.dims(), data, None)
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub region: String,
    pub channels: String,
    /// A number, or the string `"+inf"` for an unbounded PSNR.
    pub value: Value,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

fn number(v: f64) -> Value {
    if v == f64::INFINITY {
        Value::String("+inf".into())
    } else {
        json!(v)
    }
}

fn select(v: &Volume, ch: usize) -> Volume {
    Volume::new(1, v.dims(), v.channel(ch).to_vec(), None).expect("consistent dims")
}

/// RMSE, PSNR and MSSIM for each region, over all channels and optionally
/// per channel; plus the uncertainty correlation (channel-summed variance
/// vs squared-error norm) when a variance volume is supplied.
pub fn evaluate(
    pred: &Volume,
    truth: &Volume,
    regions: &RegionMasks,
    variance: Option<&Volume>,
    per_channel: bool,
) -> Result<Vec<MetricRecord>> {
    pred.same_grid(truth, "evaluate")?;
    let mut out = Vec::new();
    let mut groups: Vec<(String, Option<usize>)> = vec![("all".into(), None)];
    if per_channel {
        groups.extend((0..truth.channels()).map(|ch| (format!("ch{ch}"), Some(ch))));
    }
    let ssim_params = json!({"window": SSIM_WINDOW, "k1": SSIM_K1, "k2": SSIM_K2, "range": "truth"});
    for (name, region) in [("interior", &regions.interior), ("exterior", &regions.exterior)] {
        if !region.iter().any(|&b| b) {
            continue;
        }
        for (group, ch) in &groups {
            let (p, t) = match ch {
                Some(c) => (select(pred, *c), select(truth, *c)),
                None => (pred.clone(), truth.clone()),
            };
            let rec = |metric: &str, value: f64, params: Value| MetricRecord {
                metric: metric.into(),
                region: name.into(),
                channels: group.clone(),
                value: number(value),
                params,
            };
            out.push(rec("rmse", rmse(&p, &t, region)?, Value::Null));
            out.push(rec("psnr", psnr(&p, &t, region, None)?, json!({"peak": peak(&t, region)})));
            out.push(rec("mssim", mssim(&p, &t, region)?, ssim_params.clone()));
        }
        if let Some(var) = variance {
            var.same_grid(truth, "evaluate")?;
            let err = channel_sum(&squared_error(pred, truth)?);
            let rho = uncertainty_correlation(&channel_sum(var), &err, region)?;
            out.push(MetricRecord {
                metric: "spearman_variance_sq_error".into(),
                region: name.into(),
                channels: "sum".into(),
                value: number(rho),
                params: Value::Null,
            });
        }
    }
    Ok(out)
}

/// Records as JSON lines.
pub fn to_jsonl(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn random(c: usize, dims: [usize; 3], seed: u64) -> Volume {
        let mut g = rng::stream(seed, &[]);
        let n = c * dims.iter().product::<usize>();
        Volume::new(c, dims, (0..n).map(|_| rng::normal(&mut g)).collect(), None).unwrap()
    }

    fn random_mask(n: usize, seed: u64) -> Vec<bool> {
        let mut g = rng::stream(seed, &[1]);
        (0..n).map(|_| rng::normal(&mut g) > -0.5).collect()
    }

    #[test]
    fn cube_regions() {
        let n = 24;
        let mask: Vec<bool> = (0..n * n * n)
            .map(|i| [i / (n * n), (i / n) % n, i % n].iter().all(|&p| (2..22).contains(&p)))
            .collect();
        let r = region_masks(&mask, [n; 3], 2).unwrap();
        let inner: Vec<bool> = (0..n * n * n)
            .map(|i| [i / (n * n), (i / n) % n, i % n].iter().all(|&p| (4..20).contains(&p)))
            .collect();
        assert_eq!(r.interior, inner);
        assert_eq!(r.interior.iter().filter(|&&b| b).count(), 16 * 16 * 16);
        let r0 = region_masks(&mask, [n; 3], 0).unwrap();
        assert_eq!(r0.interior, mask);
        assert!(r0.exterior.iter().all(|&b| !b));
        assert!(matches!(region_masks(&mask, [n; 3], 11), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn random_regions_are_disjoint() {
        let mut g = rng::stream(3, &[]);
        let m: Vec<bool> = (0..1000).map(|_| rng::normal(&mut g) > -2.0).collect();
        let r = region_masks(&m, [10; 3], 1).unwrap();
        for i in 0..m.len() {
            assert!(!(r.interior[i] && r.exterior[i]));
            assert_eq!(r.interior[i] || r.exterior[i], m[i]);
        }
    }

    #[test]
    fn perfect_and_offset_predictions() {
        let t = random(2, [6, 6, 6], 1);
        let all = vec![true; 216];
        assert_eq!(rmse(&t, &t, &all).unwrap(), 0.0);
        assert_eq!(psnr(&t, &t, &all, None).unwrap(), f64::INFINITY);
        assert!((mssim(&t, &t, &all).unwrap() - 1.0).abs() < 1e-12);
        let mut p = t.clone();
        p.data_mut().iter_mut().for_each(|v| *v -= 0.3);
        assert!((rmse(&p, &t, &all).unwrap() - 0.3).abs() < 1e-12);
        let pk = peak(&t, &all);
        assert!((psnr(&p, &t, &all, None).unwrap() - 20.0 * (pk / 0.3).log10()).abs() < 1e-9);
        assert!(rmse(&p, &t, &vec![false; 216]).is_err());
    }

    /// Windowed SSIM by direct enumeration.
    fn ssim_oracle(x: &Volume, y: &Volume, region: &[bool]) -> f64 {
        let [d, h, w] = y.dims();
        let mut total = 0.0;
        for ch in 0..y.channels() {
            let vals: Vec<f64> = (0..y.voxels()).filter(|&i| region[i]).map(|i| y.channel(ch)[i]).collect();
            let l = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
            let (mut acc, mut cnt) = (0.0, 0);
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        if !region[y.index(z, yy, xx)] {
                            continue;
                        }
                        let mut px = Vec::new();
                        let mut py = Vec::new();
                        for a in z.saturating_sub(2)..(z + 3).min(d) {
                            for b in yy.saturating_sub(2)..(yy + 3).min(h) {
                                for c in xx.saturating_sub(2)..(xx + 3).min(w) {
                                    if region[y.index(a, b, c)] {
                                        px.push(x.get(ch, a, b, c));
                                        py.push(y.get(ch, a, b, c));
                                    }
                                }
                            }
                        }
                        let n = px.len() as f64;
                        let mx = px.iter().sum::<f64>() / n;
                        let my = py.iter().sum::<f64>() / n;
                        let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                        let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                        let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
                        acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        cnt += 1;
                    }
                }
            }
            total += acc / cnt as f64;
        }
        total / y.channels() as f64
    }

    #[test]
    fn mssim_matches_windowed_oracle() {
        let t = random(2, [8, 8, 8], 5);
        let mut p = random(2, [8, 8, 8], 6);
        p.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a = 0.3 * *a + b);
        let all = vec![true; 512];
        assert!((mssim(&p, &t, &all).unwrap() - ssim_oracle(&p, &t, &all)).abs() < 1e-10);
        let m = random_mask(512, 8);
        assert!((mssim(&p, &t, &m).unwrap() - ssim_oracle(&p, &t, &m)).abs() < 1e-10);
    }

    #[test]
    fn mssim_symmetric_with_shared_range() {
        let t = random(1, [7, 7, 7], 2);
        let p = random(1, [7, 7, 7], 3);
        let all = vec![true; 343];
        // SSIM is symmetric when both orders use the same dynamic range
        let mut p2 = p.clone();
        let (lo, hi) = t.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let (plo, phi) = p.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        p2.data_mut().iter_mut().for_each(|v| *v = lo + (*v - plo) * (hi - lo) / (phi - plo));
        assert!((mssim(&p2, &t, &all).unwrap() - mssim(&t, &p2, &all).unwrap()).abs() < 1e-12);
        let flat = Volume::new(1, [7, 7, 7], vec![1.0; 343], None).unwrap();
        assert!(matches!(mssim(&p, &flat, &all), Err(Error::Undefined(_))));
    }

    #[test]
    fn outside_region_never_matters() {
        let t = random(2, [8, 8, 8], 10);
        let p = random(2, [8, 8, 8], 11);
        let m = random_mask(512, 12);
        let mut p2 = p.clone();
        let mut t2 = t.clone();
        for ch in 0..2 {
            for i in (0..512).filter(|&i| !m[i]) {
                p2.data_mut()[ch * 512 + i] = 1e3;
                t2.data_mut()[ch * 512 + i] = -7.0;
            }
        }
        assert_eq!(rmse(&p, &t, &m).unwrap(), rmse(&p2, &t2, &m).unwrap());
        assert_eq!(psnr(&p, &t, &m, None).unwrap(), psnr(&p2, &t2, &m, None).unwrap());
        assert!((mssim(&p, &t, &m).unwrap() - mssim(&p2, &t2, &m).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn spearman_cases() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| 3.0 - v).collect();
        assert!((spearman(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(spearman(&a, &[1.0; 50]), Err(Error::Undefined(_))));
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_null_is_small() {
        let a = random(1, [22, 22, 22], 20);
        let b = random(1, [22, 22, 22], 21);
        let all = vec![true; a.voxels()];
        assert!(uncertainty_correlation(&a, &b, &all).unwrap().abs() < 0.1);
    }

    #[test]
    fn report_has_one_record_per_metric_and_region() {
        let t = random(2, [10, 10, 10], 1);
        let mask: Vec<bool> = (0..1000).map(|i| [i / 100, (i / 10) % 10, i % 10].iter().all(|&p| (1..9).contains(&p))).collect();
        let regions = region_masks(&mask, [10; 3], 2).unwrap();
        let recs = evaluate(&t, &t, &regions, None, false).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().any(|r| r.metric == "rmse" && r.value == json!(0.0)));
        assert!(to_jsonl(&recs).contains("\"+inf\""));
        let var = random(2, [10, 10, 10], 2);
        let p = random(2, [10, 10, 10], 3);
        let recs = evaluate(&p, &t, &regions, Some(&var), true).unwrap();
        assert_eq!(recs.iter().filter(|r| r.metric.starts_with("spearman")).count(), 2);
        assert_eq!(recs.len(), 2 * (3 * 3 + 1));
    }

    proptest! {
        #[test]
        fn rmse_permutation_invariant(seed in 0u64..1000, shift in 1usize..63) {
            let t = random(1, [4, 4, 4], seed);
            let p = random(1, [4, 4, 4], seed + 1);
            let perm = |v: &Volume| {
                let d: Vec<f64> = (0..64).map(|i| v.data()[(i + shift) % 64]).collect();
                Volume::new(1, [4, 4, 4], d, None).unwrap()
            };
            let all = vec![true; 64];
            let a = rmse(&p, &t, &all).unwrap();
            let b = rmse(&perm(&p), &perm(&t), &all).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
