//! Command-line arguments and their validation into run configurations.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tilrma_core::engine::{HyperParams, DEFAULT_GAUSSIAN_ITERS, DEFAULT_ITERATIONS};
use tilrma_core::metrics::DEFAULT_TAPS;
use tilrma_core::pipeline::Preset;
use tilrma_core::source_model::{DofParam, DEFAULT_REFIT_ITERS};
use tilrma_core::stft::StftConfig;
use tilrma_core::synth::MixingKind;

#[derive(Debug, Parser)]
#[command(name = "tilrma", version, about = "Determined source separation with low-rank Student's t source models")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Separate a multichannel WAV into one image per source.
    Separate(SeparateArgs),
    /// Run seeded synthetic scenes and check the run diagnostics.
    Synthetic(SyntheticArgs),
    /// Fuzz the majorization inequalities and surrogate equalities.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Music,
    Speech,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Music => Preset::Music,
            PresetArg::Speech => Preset::Speech,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Degrees of freedom, or `inf` for the Gaussian model.
    #[arg(long, default_value = "inf")]
    pub nu: DofParam,

    /// Domain exponent in [1, 2].
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,

    /// NMF bases per source; overrides the preset.
    #[arg(long)]
    pub bases: Option<usize>,

    #[arg(long, value_enum, default_value = "music")]
    pub preset: PresetArg,

    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iters: usize,

    /// Start with Gaussian ILRMA, then switch to the configured model.
    #[arg(long)]
    pub two_stage: bool,

    /// Gaussian iterations of the two-stage schedule.
    #[arg(long, default_value_t = DEFAULT_GAUSSIAN_ITERS, requires = "two_stage")]
    pub stage1_iters: usize,

    /// NMF sweeps used to refit the factors at the stage switch.
    #[arg(long, default_value_t = DEFAULT_REFIT_ITERS, requires = "two_stage")]
    pub refit_iters: usize,

    #[arg(long, env = "TILRMA_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Update frequency bins in parallel.
    #[arg(long, conflicts_with = "sequential")]
    pub parallel: bool,

    /// Update frequency bins one after another (default).
    #[arg(long)]
    pub sequential: bool,
}

impl ModelArgs {
    pub fn hyperparams(&self) -> Result<HyperParams, String> {
        let rank = self.bases.unwrap_or_else(|| Preset::from(self.preset).bases());
        if self.iters == 0 {
            return Err("--iters must be at least 1".into());
        }
        let mut hp = HyperParams::new(self.nu, self.p, rank, self.iters, self.seed);
        hp.parallel = self.parallel;
        if self.two_stage {
            hp = hp.two_stage(self.stage1_iters, self.refit_iters);
        }
        hp.validate().map_err(|e| e.to_string())?;
        Ok(hp)
    }
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    /// Multichannel input WAV; one source is estimated per channel.
    pub input: PathBuf,

    #[arg(long, default_value = "separated")]
    pub out: PathBuf,

    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value_t = 512.0)]
    pub window_ms: f64,

    #[arg(long, default_value_t = 128.0)]
    pub shift_ms: f64,

    /// Reference source images, one WAV per source; enables SDR evaluation.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub refs: Vec<PathBuf>,

    /// Filter length of the SDR distortion projection.
    #[arg(long, default_value_t = DEFAULT_TAPS)]
    pub taps: usize,

    /// Microphone (1-based) at which outputs are scored.
    #[arg(long, default_value_t = 1)]
    pub ref_channel: usize,

    /// Repeat with seeds seed, seed+1, ...; outputs come from the first run.
    #[arg(long, default_value_t = 1)]
    pub inits: u64,
}

/// A validated `separate` invocation.
#[derive(Debug)]
pub struct SeparateConfig {
    pub input: PathBuf,
    pub out: PathBuf,
    pub hyperparams: HyperParams,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub refs: Vec<PathBuf>,
    pub taps: usize,
    /// Zero-based.
    pub ref_channel: usize,
    pub inits: u64,
}

impl SeparateConfig {
    pub fn stft(&self, sample_rate: f64) -> StftConfig {
        StftConfig { window_length_ms: self.window_ms, shift_ms: self.shift_ms, ..StftConfig::new(sample_rate) }
    }
}

impl SeparateArgs {
    pub fn validate(self) -> Result<SeparateConfig, String> {
        let hyperparams = self.model.hyperparams()?;
        // The rate only matters for rounding; any positive value checks the ratio.
        let probe = StftConfig { window_length_ms: self.window_ms, shift_ms: self.shift_ms, ..StftConfig::new(16_000.0) };
        probe.validate().map_err(|e| e.to_string())?;
        if self.ref_channel == 0 {
            return Err("--ref-channel is 1-based".into());
        }
        if self.taps == 0 {
            return Err("--taps must be at least 1".into());
        }
        if self.inits == 0 {
            return Err("--inits must be at least 1".into());
        }
        Ok(SeparateConfig {
            input: self.input,
            out: self.out,
            hyperparams,
            window_ms: self.window_ms,
            shift_ms: self.shift_ms,
            refs: self.refs,
            taps: self.taps,
            ref_channel: self.ref_channel - 1,
            inits: self.inits,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Check {
    /// Cost never increases beyond round-off.
    Monotonic,
    /// Every IP update leaves w^H U w = 1.
    Ip,
    /// SI-SDR improves over the mixture.
    Separation,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MixingArg {
    Instantaneous,
    Smooth,
}

impl From<MixingArg> for MixingKind {
    fn from(m: MixingArg) -> Self {
        match m {
            MixingArg::Instantaneous => MixingKind::Instantaneous,
            MixingArg::Smooth => MixingKind::SmoothFrequencyVarying,
        }
    }
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// Number of scenes; scene k uses seed + k.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,

    #[arg(long, value_enum, default_value = "monotonic")]
    pub check: Check,

    #[arg(long, default_value_t = 2)]
    pub sources: usize,

    #[arg(long, default_value_t = 129)]
    pub bins: usize,

    #[arg(long, default_value_t = 128)]
    pub frames: usize,

    /// Rank of the generated sources.
    #[arg(long, default_value_t = 2)]
    pub true_rank: usize,

    #[arg(long, value_enum, default_value = "instantaneous")]
    pub mixing: MixingArg,

    #[command(flatten)]
    pub model: ModelArgs,

    /// Also write the per-seed reports to this JSON file.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Random samples per inequality.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,

    /// Random majorizer states.
    #[arg(long, default_value_t = 100)]
    pub states: usize,

    #[arg(long, env = "TILRMA_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separate(args: &[&str]) -> SeparateArgs {
        let argv = ["tilrma", "separate", "in.wav"].iter().chain(args).copied();
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Separate(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = separate(&[]).validate().unwrap();
        assert_eq!((cfg.window_ms, cfg.shift_ms), (512.0, 128.0));
        assert_eq!(cfg.hyperparams.iterations, 200);
        assert_eq!(cfg.hyperparams.rank, 5);
        assert!(cfg.hyperparams.dof.is_infinite());
        assert_eq!(cfg.ref_channel, 0);
        assert_eq!(cfg.taps, DEFAULT_TAPS);
        assert!(!cfg.hyperparams.parallel);
    }

    #[test]
    fn bases_override_the_preset() {
        let cfg = separate(&["--preset", "speech"]).validate().unwrap();
        assert_eq!(cfg.hyperparams.rank, 2);
        let cfg = separate(&["--preset", "speech", "--bases", "7"]).validate().unwrap();
        assert_eq!(cfg.hyperparams.rank, 7);
    }

    #[test]
    fn parallel_and_sequential_conflict() {
        assert!(Cli::try_parse_from(["tilrma", "separate", "in.wav", "--parallel", "--sequential"]).is_err());
        assert!(separate(&["--parallel"]).validate().unwrap().hyperparams.parallel);
    }

    #[test]
    fn two_stage_schedule() {
        let cfg = separate(&["--two-stage", "--nu", "10", "--p", "1", "--stage1-iters", "100"]).validate().unwrap();
        assert_eq!(
            cfg.hyperparams.schedule,
            tilrma_core::engine::Schedule::TwoStage { gaussian_iters: 100, refit_iters: DEFAULT_REFIT_ITERS }
        );
        assert!(separate(&["--two-stage", "--stage1-iters", "200"]).validate().is_err());
    }
}
