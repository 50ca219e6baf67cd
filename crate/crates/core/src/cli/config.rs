//! The JSON run configuration. Every section is optional; unknown keys are
//! rejected. Command-line flags take precedence over file values.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::PhantomSpec;
use crate::infer::{ScalarMap, DEFAULT_TILE};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainCmdConfig,
    pub sr: SrConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub out_dir: Option<PathBuf>,
    /// Phantom `k` uses seed `phantom.seed + k`.
    pub count: usize,
    /// Also write the block-mean LR volume for this factor.
    pub r: Option<usize>,
    pub phantom: PhantomSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            out_dir: None,
            count: 1,
            r: None,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCmdConfig {
    /// HR training volumes with foreground masks.
    pub volumes: Vec<PathBuf>,
    /// Checkpoint path (`train`) or output directory (`train-ensemble`).
    pub out: Option<PathBuf>,
    /// JSON-lines training log (`train` only).
    pub log: Option<PathBuf>,
    pub options: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrConfig {
    /// One checkpoint, or several to fuse as an ensemble.
    pub checkpoints: Vec<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Monte Carlo sample count; enables the variance output.
    pub mc: Option<usize>,
    pub seed: u64,
    pub tile: usize,
    /// Defaults to `<output stem>.var.vxl`.
    pub variance_output: Option<PathBuf>,
    /// Also propagate uncertainty to a scalar map of a 6-channel tensor volume.
    pub map: Option<ScalarMap>,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            checkpoints: Vec::new(),
            input: None,
            output: None,
            mc: None,
            seed: 0,
            tile: DEFAULT_TILE,
            variance_output: None,
            map: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Pgm,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    pub dir: PathBuf,
    pub format: ExportFormat,
    /// Slicing axis: 0 = depth, 1 = height, 2 = width.
    pub axis: usize,
    /// Slice index; the middle slice when absent.
    pub index: Option<usize>,
    pub channel: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            dir: PathBuf::from("."),
            format: ExportFormat::Pgm,
            axis: 0,
            index: None,
            channel: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prediction: Option<PathBuf>,
    /// Ground truth; must carry a foreground mask.
    pub truth: Option<PathBuf>,
    pub variance: Option<PathBuf>,
    /// Interior erosion margin in HR voxels; `2r` when absent.
    pub margin: Option<usize>,
    pub r: usize,
    /// JSON-lines report; standard output when absent.
    pub output: Option<PathBuf>,
    pub per_channel: bool,
    pub export: Option<ExportConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prediction: None,
            truth: None,
            variance: None,
            margin: None,
            r: 2,
            output: None,
            per_channel: false,
            export: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
}
