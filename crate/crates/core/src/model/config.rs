use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvSpec;

/// Hidden widths of the three-layer subpixel network.
pub const HIDDEN: [usize; 2] = [50, 100];
/// Spatial extents of the three kernels.
pub const KERNELS: [usize; 3] = [3, 1, 3];
/// Side of the LR neighbourhood that determines one r³ output block.
pub const RECEPTIVE_FIELD: usize = 5;
/// Receptive-field radius in LR voxels.
pub const MARGIN: usize = RECEPTIVE_FIELD / 2;

/// How weight noise is shared in the variational variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutKind {
    /// Independent additive noise per weight (Var I).
    PerWeight,
    /// One multiplicative noise draw per output filter (Var II).
    PerFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "hetero")]
    Hetero,
    #[serde(rename = "baseline+vd1")]
    BaselineVd1,
    #[serde(rename = "baseline+vd2")]
    BaselineVd2,
    #[serde(rename = "hetero+vd1")]
    HeteroVd1,
    #[serde(rename = "hetero+vd2")]
    HeteroVd2,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Hetero,
        Variant::BaselineVd1,
        Variant::BaselineVd2,
        Variant::HeteroVd1,
        Variant::HeteroVd2,
    ];

    pub fn is_hetero(self) -> bool {
        matches!(self, Variant::Hetero | Variant::HeteroVd1 | Variant::HeteroVd2)
    }

    pub fn dropout(self) -> Option<DropoutKind> {
        match self {
            Variant::BaselineVd1 | Variant::HeteroVd1 => Some(DropoutKind::PerWeight),
            Variant::BaselineVd2 | Variant::HeteroVd2 => Some(DropoutKind::PerFilter),
            _ => None,
        }
    }

    pub fn is_variational(self) -> bool {
        self.dropout().is_some()
    }

    /// The same likelihood without weight noise.
    pub fn deterministic(self) -> Variant {
        if self.is_hetero() {
            Variant::Hetero
        } else {
            Variant::Baseline
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Hetero => "hetero",
            Variant::BaselineVd1 => "baseline+vd1",
            Variant::BaselineVd2 => "baseline+vd2",
            Variant::HeteroVd1 => "hetero+vd1",
            Variant::HeteroVd2 => "hetero+vd2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown variant {s:?}; expected one of baseline, hetero, baseline+vd1, baseline+vd2, hetero+vd1, hetero+vd2"
                ))
            })
    }
}

/// Upsampling factor, channel count and variant of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub r: usize,
    pub c: usize,
    pub variant: Variant,
}

impl ArchConfig {
    pub fn new(r: usize, c: usize, variant: Variant) -> Result<Self> {
        let cfg = ArchConfig { r, c, variant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Invalid("upsampling factor r must be >= 1".into()));
        }
        if self.c == 0 {
            return Err(Error::Invalid("channel count c must be >= 1".into()));
        }
        Ok(())
    }

    /// `(3,3,3,50) → (1,1,1,100) → (3,3,3,r³c)`.
    pub fn layer_specs(&self) -> [ConvSpec; 3] {
        let widths = [self.c, HIDDEN[0], HIDDEN[1], self.out_channels()];
        std::array::from_fn(|l| ConvSpec {
            kernel: [KERNELS[l]; 3],
            in_channels: widths[l],
            out_channels: widths[l + 1],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.r.pow(3) * self.c
    }

    /// HR output extent for an LR input extent `n` (valid convolutions).
    pub fn output_extent(&self, n: usize) -> Option<usize> {
        n.checked_sub(RECEPTIVE_FIELD - 1).map(|m| m * self.r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("hetero+vd3".parse::<Variant>().is_err());
    }

    #[test]
    fn layer_geometry() {
        let cfg = ArchConfig::new(2, 6, Variant::Baseline).unwrap();
        let [l1, l2, l3] = cfg.layer_specs();
        assert_eq!(l1.weight_shape(), [50, 6, 3, 3, 3]);
        assert_eq!(l2.weight_shape(), [100, 50, 1, 1, 1]);
        assert_eq!(l3.weight_shape(), [48, 100, 3, 3, 3]);
        assert_eq!(cfg.output_extent(5), Some(2));
        assert_eq!(cfg.output_extent(11), Some(14));
        assert_eq!(cfg.output_extent(4), Some(0));
        assert_eq!(cfg.output_extent(3), None);
        assert!(ArchConfig::new(0, 6, Variant::Baseline).is_err());
    }
}
