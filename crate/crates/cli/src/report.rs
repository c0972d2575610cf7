//! The `result.json` document written by `separate`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use tilrma_core::engine::{HyperParams, RunEvent, StageMarker};
use tilrma_core::metrics::EvalReport;
use tilrma_core::pipeline::Timings;
use tilrma_core::stft::StftConfig;

pub const RESULT_SCHEMA: &str = "tilrma-result";
pub const RESULT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: PathBuf,
    pub sample_rate: u32,
    pub channels: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub taps: usize,
    /// 1-based, as given on the command line.
    pub ref_channel: usize,
    pub references: Vec<PathBuf>,
    #[serde(flatten)]
    pub report: EvalReport,
    pub mean_sdr_db: f64,
}

/// One run when `--inits` repeats the separation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub seed: u64,
    pub final_cost: f64,
    pub mean_sdr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema: String,
    pub version: u32,
    pub input: InputInfo,
    pub stft: StftConfig,
    /// Frame geometry in samples.
    pub window_samples: usize,
    pub shift_samples: usize,
    pub hyperparams: HyperParams,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    pub cost_trace: Vec<f64>,
    pub stages: Vec<StageMarker>,
    pub events: Vec<RunEvent>,
    pub timings: Timings,
    pub evaluation: Option<Evaluation>,
    /// Present when more than one initialization was run.
    pub inits: Option<Vec<InitSummary>>,
}
