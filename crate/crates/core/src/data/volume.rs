use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-channel voxel grid, channel-major then row-major (`[c][z][y][x]`),
/// with an optional boolean foreground mask over `(D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    c: usize,
    dims: [usize; 3],
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(c: usize, dims: [usize; 3], data: Vec<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        if c == 0 {
            return Err(Error::Invalid("volume needs at least one channel".into()));
        }
        let n = dims.iter().product::<usize>();
        if data.len() != c * n {
            return Err(Error::shape(
                "volume",
                format!("{c} channels of {dims:?} need {} values, got {}", c * n, data.len()),
            ));
        }
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(Error::shape(
                    "volume",
                    format!("mask has {} voxels, grid {dims:?} has {n}", m.len()),
                ));
            }
        }
        Ok(Volume { c, dims, data, mask })
    }

    pub fn zeros(c: usize, dims: [usize; 3]) -> Self {
        let n = c * dims.iter().product::<usize>();
        Volume {
            c,
            dims,
            data: vec![0.0; n],
            mask: None,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, d, h, w] = t.dims4("volume")?;
        Volume::new(c, [d, h, w], t.data().to_vec(), None)
    }

    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![self.c, d, h, w], self.data.clone()).expect("consistent volume")
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn set_mask(&mut self, mask: Option<Vec<bool>>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.voxels() {
                return Err(Error::shape("volume", "mask size differs from grid"));
            }
        }
        self.mask = mask;
        Ok(())
    }

    pub fn with_mask(mut self, mask: Option<Vec<bool>>) -> Result<Self> {
        self.set_mask(mask)?;
        Ok(self)
    }

    /// Flat spatial index of `(z, y, x)`.
    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, ch: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data[ch * self.voxels() + self.index(z, y, x)]
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Copies the box `corner .. corner + size` into a `[c, sd, sh, sw]` tensor.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Tensor> {
        for a in 0..3 {
            if corner[a] + size[a] > self.dims[a] {
                return Err(Error::shape(
                    "crop",
                    format!("box {corner:?}+{size:?} leaves grid {:?}", self.dims),
                ));
            }
        }
        let [sd, sh, sw] = size;
        let mut out = Vec::with_capacity(self.c * sd * sh * sw);
        for ch in 0..self.c {
            let base = &self.channel(ch);
            for z in 0..sd {
                for y in 0..sh {
                    let start = self.index(corner[0] + z, corner[1] + y, corner[2]);
                    out.extend_from_slice(&base[start..start + sw]);
                }
            }
        }
        Tensor::new(vec![self.c, sd, sh, sw], out)
    }

    /// Writes a `[c, sd, sh, sw]` tensor into the box at `corner`.
    pub fn paste(&mut self, corner: [usize; 3], t: &Tensor) -> Result<()> {
        let [c, sd, sh, sw] = t.dims4("paste")?;
        if c != self.c {
            return Err(Error::shape("paste", format!("channel axis: {c} vs {}", self.c)));
        }
        for a in 0..3 {
            if corner[a] + [sd, sh, sw][a] > self.dims[a] {
                return Err(Error::shape("paste", "box leaves grid"));
            }
        }
        let n = self.voxels();
        let src = t.data();
        for ch in 0..c {
            for z in 0..sd {
                for y in 0..sh {
                    let dst = ch * n + self.index(corner[0] + z, corner[1] + y, corner[2]);
                    let s = ((ch * sd + z) * sh + y) * sw;
                    self.data[dst..dst + sw].copy_from_slice(&src[s..s + sw]);
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                context: context.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn same_grid(&self, other: &Volume, op: &'static str) -> Result<()> {
        if self.c != other.c || self.dims != other.dims {
            return Err(Error::shape(
                op,
                format!(
                    "{} channels of {:?} vs {} channels of {:?}",
                    self.c, self.dims, other.c, other.dims
                ),
            ));
        }
        Ok(())
    }
}

/// Sample precision of the voxel payload in a VXL1 file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

pub const VXL_MAGIC: &[u8; 4] = b"VXL1";
pub const VXL_VERSION: u16 = 1;

/// Serializes a volume. Layout (all integers little-endian):
///
/// ```text
/// "VXL1" | version u16 | c u32 | D u32 | H u32 | W u32 | dtype u8 | mask flag u8
/// [mask: ceil(D·H·W / 8) bytes, bit i of byte k is voxel 8k + i]
/// voxel data: c·D·H·W values (f32 or f64), channel-major, x fastest
/// ```
pub fn encode_vxl(vol: &Volume, dtype: DType) -> Vec<u8> {
    let n = vol.voxels();
    let mut out = Vec::with_capacity(24 + n / 8 + vol.data.len() * 8);
    out.extend_from_slice(VXL_MAGIC);
    out.extend_from_slice(&VXL_VERSION.to_le_bytes());
    for v in [vol.c, vol.dims[0], vol.dims[1], vol.dims[2]] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(dtype as u8);
    out.push(vol.mask.is_some() as u8);
    if let Some(mask) = &vol.mask {
        let mut bytes = vec![0u8; n.div_ceil(8)];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bytes);
    }
    match dtype {
        DType::F32 => vol.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => vol.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated VXL1 file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_vxl(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != VXL_MAGIC {
        return Err(Error::Format("not a VXL1 file".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VXL_VERSION {
        return Err(Error::Format(format!("unsupported VXL1 version {version}")));
    }
    let c = r.u32()?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let dtype = match r.take(1)?[0] {
        1 => DType::F32,
        2 => DType::F64,
        d => return Err(Error::Format(format!("unknown dtype code {d}"))),
    };
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let mask = match r.take(1)?[0] {
        0 => None,
        1 => {
            let bits = r.take(n.div_ceil(8))?;
            Some((0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect())
        }
        f => return Err(Error::Format(format!("bad mask flag {f}"))),
    };
    let total = c
        .checked_mul(n)
        .ok_or_else(|| Error::Format("volume size overflows".into()))?;
    let data = match dtype {
        DType::F32 => r
            .take(total * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => r
            .take(total * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after voxel data".into()));
    }
    Volume::new(c, dims, data, mask)
}

/// Path of the provenance sidecar written next to a volume file.
pub fn provenance_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".prov.json");
    PathBuf::from(s)
}

/// Writes `vol` as float64 VXL1 and, if given, a JSON provenance sidecar.
/// Returns the SHA-256 of the volume file.
pub fn save_volume(path: impl AsRef<Path>, vol: &Volume, provenance: Option<&Value>) -> Result<String> {
    let path = path.as_ref();
    let bytes = encode_vxl(vol, DType::F64);
    fs::write(path, &bytes)?;
    if let Some(p) = provenance {
        let mut f = fs::File::create(provenance_path(path))?;
        serde_json::to_writer_pretty(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    Ok(crate::hash::sha256_hex(&bytes))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_vxl(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let dims = [3, 4, 5];
        let data = (0..2 * 60).map(|i| i as f64 * 0.25 - 3.0).collect();
        let mask = (0..60).map(|i| i % 3 == 0).collect();
        Volume::new(2, dims, data, Some(mask)).unwrap()
    }

    #[test]
    fn vxl_round_trip_f64_and_f32() {
        let v = sample();
        assert_eq!(decode_vxl(&encode_vxl(&v, DType::F64)).unwrap(), v);
        // quarter steps are exact in f32
        assert_eq!(decode_vxl(&encode_vxl(&v, DType::F32)).unwrap(), v);
        let bare = v.clone().with_mask(None).unwrap();
        assert_eq!(decode_vxl(&encode_vxl(&bare, DType::F64)).unwrap(), bare);
    }

    #[test]
    fn vxl_header_bytes() {
        let v = Volume::zeros(1, [1, 1, 9]).with_mask(Some(vec![true; 9])).unwrap();
        let b = encode_vxl(&v, DType::F64);
        assert_eq!(&b[..4], b"VXL1");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[1, 0, 0, 0]);
        assert_eq!(&b[18..22], &[9, 0, 0, 0]);
        assert_eq!(b[22], 2);
        assert_eq!(b[23], 1);
        assert_eq!(&b[24..26], &[0xff, 0x01]);
        assert_eq!(b.len(), 26 + 9 * 8);
    }

    #[test]
    fn vxl_rejects_damage() {
        let b = encode_vxl(&sample(), DType::F64);
        assert!(matches!(decode_vxl(&b[..b.len() - 1]), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_vxl(&bad), Err(Error::Format(_))));
        let mut long = b;
        long.push(0);
        assert!(matches!(decode_vxl(&long), Err(Error::Format(_))));
    }

    #[test]
    fn crop_and_paste_are_inverse() {
        let v = sample();
        let t = v.crop([1, 1, 2], [2, 3, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3, 3]);
        assert_eq!(t.data()[0], v.get(0, 1, 1, 2));
        assert_eq!(*t.data().last().unwrap(), v.get(1, 2, 3, 4));
        let mut w = Volume::zeros(2, [3, 4, 5]);
        w.paste([1, 1, 2], &t).unwrap();
        assert_eq!(w.get(1, 2, 3, 4), v.get(1, 2, 3, 4));
        assert_eq!(w.get(1, 0, 0, 0), 0.0);
        assert!(v.crop([2, 0, 0], [2, 1, 1]).is_err());
    }

    #[test]
    fn save_and_load_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vxl");
        let prov = serde_json::json!({"seed": 3});
        let sum = save_volume(&p, &sample(), Some(&prov)).unwrap();
        assert_eq!(sum.len(), 64);
        assert_eq!(load_volume(&p).unwrap(), sample());
        let side: Value = serde_json::from_slice(&fs::read(provenance_path(&p)).unwrap()).unwrap();
        assert_eq!(side["seed"], 3);
    }
}
