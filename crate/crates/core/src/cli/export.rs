//! 2D slice export for visual inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ExportConfig, ExportFormat};
use crate::data::Volume;
use crate::error::{Error, Result};

/// One slice of one channel as `(rows, cols, values)`.
pub fn slice(vol: &Volume, channel: usize, axis: usize, index: Option<usize>) -> Result<(usize, usize, Vec<f64>)> {
    let [d, h, w] = vol.dims();
    if channel >= vol.channels() {
        return Err(Error::Config(format!("export channel {channel} out of range (volume has {})", vol.channels())));
    }
    let extent = match axis {
        0 => d,
        1 => h,
        2 => w,
        _ => return Err(Error::Config(format!("export axis must be 0, 1 or 2, got {axis}"))),
    };
    let k = index.unwrap_or(extent / 2);
    if k >= extent {
        return Err(Error::Config(format!("slice {k} out of range for axis of length {extent}")));
    }
    let (rows, cols) = match axis {
        0 => (h, w),
        1 => (d, w),
        _ => (d, h),
    };
    let values = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| match axis {
            0 => vol.get(channel, k, i, j),
            1 => vol.get(channel, i, k, j),
            _ => vol.get(channel, i, j, k),
        })
        .collect();
    Ok((rows, cols, values))
}

fn pgm(rows: usize, cols: usize, values: &[f64], note: &str) -> Vec<u8> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n# {note}\n# range {lo:e} {hi:e}\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if v.is_finite() {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn csv(rows: usize, cols: usize, values: &[f64]) -> String {
    let mut s = String::new();
    for i in 0..rows {
        let line: Vec<String> = values[i * cols..(i + 1) * cols].iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    s
}

/// Writes the configured slice of `vol` to `stem` plus the format
/// extension; returns the path written.
pub fn export_slice(vol: &Volume, cfg: &ExportConfig, stem: &Path, note: &str) -> Result<PathBuf> {
    let (rows, cols, values) = slice(vol, cfg.channel, cfg.axis, cfg.index)?;
    let path = match cfg.format {
        ExportFormat::Pgm => stem.with_extension("pgm"),
        ExportFormat::Csv => stem.with_extension("csv"),
    };
    match cfg.format {
        ExportFormat::Pgm => fs::write(&path, pgm(rows, cols, &values, note))?,
        ExportFormat::Csv => fs::write(&path, csv(rows, cols, &values))?,
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_follow_axes() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let v = Volume::new(1, [2, 3, 4], data, None).unwrap();
        let (r, c, s) = slice(&v, 0, 0, Some(1)).unwrap();
        assert_eq!((r, c), (3, 4));
        assert_eq!(s[0], 12.0);
        let (r, c, s) = slice(&v, 0, 2, Some(3)).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(s, vec![3.0, 7.0, 11.0, 15.0, 19.0, 23.0]);
        assert!(slice(&v, 0, 3, None).is_err());
        assert!(slice(&v, 1, 0, None).is_err());
    }

    #[test]
    fn pgm_header_and_scaling() {
        let bytes = pgm(1, 3, &[0.0, 0.5, 1.0], "t");
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("P5\n# t\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}
