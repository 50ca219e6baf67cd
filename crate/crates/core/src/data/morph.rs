//! Binary morphology with a cubic `(2m+1)³` structuring element. Voxels
//! beyond the grid count as background.

fn pass(mask: &[bool], dims: [usize; 3], axis: usize, m: usize, erode: bool) -> Vec<bool> {
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let len = dims[axis];
    let mut out = vec![false; mask.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) % len;
        let lo = pos.saturating_sub(m);
        let hi = (pos + m).min(len - 1);
        let base = i - pos * stride;
        *o = if erode {
            pos >= m && pos + m < len && (lo..=hi).all(|p| mask[base + p * stride])
        } else {
            (lo..=hi).any(|p| mask[base + p * stride])
        };
    }
    out
}

fn apply(mask: &[bool], dims: [usize; 3], m: usize, erode: bool) -> Vec<bool> {
    assert_eq!(mask.len(), dims.iter().product::<usize>(), "mask size");
    if m == 0 {
        return mask.to_vec();
    }
    (0..3).fold(mask.to_vec(), |acc, axis| pass(&acc, dims, axis, m, erode))
}

pub fn erode(mask: &[bool], dims: [usize; 3], m: usize) -> Vec<bool> {
    apply(mask, dims, m, true)
}

pub fn dilate(mask: &[bool], dims: [usize; 3], m: usize) -> Vec<bool> {
    apply(mask, dims, m, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize, lo: usize, hi: usize) -> Vec<bool> {
        (0..n * n * n)
            .map(|i| [i / (n * n), (i / n) % n, i % n].iter().all(|&p| p >= lo && p < hi))
            .collect()
    }

    #[test]
    fn cube_erosion_and_dilation() {
        let m = cube(12, 3, 9);
        assert_eq!(erode(&m, [12; 3], 1), cube(12, 4, 8));
        assert_eq!(dilate(&m, [12; 3], 2), cube(12, 1, 11));
        assert_eq!(erode(&m, [12; 3], 0), m);
    }

    #[test]
    fn grid_edge_is_background() {
        let full = vec![true; 5 * 5 * 5];
        assert_eq!(erode(&full, [5; 3], 1), cube(5, 1, 4));
    }

    #[test]
    fn single_voxel_dilates_to_box() {
        let mut m = vec![false; 7 * 7 * 7];
        m[3 * 49 + 3 * 7 + 3] = true;
        assert_eq!(dilate(&m, [7; 3], 1), cube(7, 2, 5));
    }
}
