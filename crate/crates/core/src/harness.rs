//! Seeded synthetic trials: generate a scene, separate it, and collect
//! the diagnostics the property checks look at.

use serde::{Deserialize, Serialize};

use crate::engine::{self, EventKind, HyperParams, RunOptions};
use crate::error::Result;
use crate::metrics;
use crate::source_model::DofParam;
use crate::stft::synthesize;
use crate::synth::{gen_scene, MixingKind, SyntheticScene};

/// Allowed cost increase per step: `rel |cost| + abs`.
pub const MONOTONE_REL: f64 = 1e-10;
pub const MONOTONE_ABS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub sources: usize,
    pub bins: usize,
    pub frames: usize,
    /// Rank of the generated sources.
    pub true_rank: usize,
    pub mixing: MixingKind,
    /// Engine settings; the seed field is replaced by the trial seed.
    pub hyperparams: HyperParams,
    /// Compute SI-SDR improvement at this microphone.
    pub evaluate_channel: Option<usize>,
    /// Compute the HEAD residual after the last iteration.
    pub head_residual: bool,
}

impl TrialConfig {
    /// Two sources, 129 bins, 128 frames, rank 2, instantaneous mixing.
    pub fn standard(dof: DofParam, p: f64, iterations: usize) -> Self {
        Self {
            sources: 2,
            bins: 129,
            frames: 128,
            true_rank: 2,
            mixing: MixingKind::Instantaneous,
            hyperparams: HyperParams::new(dof, p, 2, iterations, 0),
            evaluate_channel: Some(0),
            head_residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub dof: DofParam,
    pub p: f64,
    pub cost_trace: Vec<f64>,
    /// `(stage, step)` of the first cost increase beyond tolerance.
    pub monotonicity_violation: Option<(usize, usize)>,
    /// Largest `|w^H U w - 1|` over every IP update of the run.
    pub max_ip_residual: f64,
    pub head_residual: Option<f64>,
    pub ridge_recoveries: usize,
    pub ip_fallbacks: usize,
    /// Mean SI-SDR improvement over the mixture, in dB.
    pub sdr_improvement_db: Option<f64>,
    pub sdr_db: Option<Vec<f64>>,
    pub elapsed_seconds: f64,
}

impl TrialReport {
    pub fn monotone(&self) -> bool {
        self.monotonicity_violation.is_none()
    }
}

pub fn scene_for(cfg: &TrialConfig, seed: u64) -> Result<SyntheticScene> {
    gen_scene(cfg.sources, cfg.bins, cfg.frames, cfg.true_rank, cfg.mixing, seed)
}

pub fn run_trial(cfg: &TrialConfig, seed: u64) -> Result<TrialReport> {
    let scene = scene_for(cfg, seed)?;
    let x = &scene.observation;
    let hp = HyperParams { seed, ..cfg.hyperparams.clone() };
    let mut max_ip_residual: f64 = 0.0;
    let mut head = None;
    let last = hp.iterations;
    let result = engine::run_with(x, &hp, RunOptions::default(), &mut |r| {
        max_ip_residual = max_ip_residual.max(r.max_ip_residual);
        if cfg.head_residual && r.iteration == last {
            head = Some(r.state.head_residual(r.dof, r.p));
        }
    })?;
    let count = |f: fn(&EventKind) -> bool| result.events.iter().filter(|e| f(&e.kind)).count();
    let ridge_recoveries = count(|k| matches!(k, EventKind::RidgeRecovery { .. }));
    let ip_fallbacks = count(|k| matches!(k, EventKind::IpFallback { .. }));

    let (mut sdr_improvement_db, mut sdr_db) = (None, None);
    if let Some(ch) = cfg.evaluate_channel {
        let refs = (0..scene.num_sources())
            .map(|n| synthesize(&scene.source_image(n)).map(|mut s| s.swap_remove(ch)))
            .collect::<Result<Vec<_>>>()?;
        let ests = result.images.iter().map(|im| synthesize(im).map(|mut s| s.swap_remove(ch))).collect::<Result<Vec<_>>>()?;
        let mix = synthesize(x)?.swap_remove(ch);
        let report = metrics::evaluate(&refs, &ests, &mix, 1)?;
        sdr_improvement_db = report.mean_improvement_db;
        sdr_db = Some(report.sdr_db);
    }
    Ok(TrialReport {
        seed,
        dof: hp.dof,
        p: hp.p,
        monotonicity_violation: result.first_monotonicity_violation(MONOTONE_REL, MONOTONE_ABS),
        cost_trace: result.cost_trace,
        max_ip_residual,
        head_residual: head,
        ridge_recoveries,
        ip_fallbacks,
        sdr_improvement_db,
        sdr_db,
        elapsed_seconds: result.metadata.elapsed_seconds,
    })
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}
