//! The t-ILRMA iteration loop.
//!
//! One iteration updates every demixing row by iterative projection,
//! refreshes the estimates, runs one NMF sweep per source (bases, scale,
//! activations, scale) and renormalizes. The cost is recorded after
//! normalization.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demix::{self, DemixingStack};
use crate::error::{Error, Result};
use crate::linalg;
use crate::source_model::{self, validate_domain_exponent, DofParam, NmfFactors, ScaleModel};
use crate::spectrogram::ComplexSpectrogram;

pub const DEFAULT_ITERATIONS: usize = 200;
pub const DEFAULT_GAUSSIAN_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    SingleStage,
    /// Gaussian ILRMA for `gaussian_iters`, then the configured model for
    /// the remaining iterations after a `refit_iters` domain refit.
    TwoStage { gaussian_iters: usize, refit_iters: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub dof: DofParam,
    pub p: f64,
    pub rank: usize,
    pub iterations: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            dof: DofParam::Infinite,
            p: 2.0,
            rank: 2,
            iterations: DEFAULT_ITERATIONS,
            schedule: Schedule::SingleStage,
            seed: 0,
            parallel: false,
        }
    }
}

impl HyperParams {
    pub fn new(dof: DofParam, p: f64, rank: usize, iterations: usize, seed: u64) -> Self {
        Self { dof, p, rank, iterations, seed, ..Self::default() }
    }

    pub fn two_stage(mut self, gaussian_iters: usize, refit_iters: usize) -> Self {
        self.schedule = Schedule::TwoStage { gaussian_iters, refit_iters };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.dof.validate()?;
        validate_domain_exponent(self.p)?;
        if self.dof.is_infinite() && self.p != 2.0 {
            return Err(Error::InvalidConfig("the Gaussian model (nu = inf) is defined for p = 2 only".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidConfig("number of bases must be at least 1".into()));
        }
        if let Schedule::TwoStage { gaussian_iters, .. } = self.schedule {
            if gaussian_iters >= self.iterations {
                return Err(Error::InvalidConfig(format!(
                    "Gaussian stage ({gaussian_iters} iterations) must be shorter than the run ({})",
                    self.iterations
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    RidgeRecovery { bin: usize, source: usize, epsilon: f64 },
    /// The solved IP filter failed the descent check and the previous one was kept.
    IpFallback { bin: usize, source: usize },
    StageSwitch { dof: DofParam, p: f64, refit_iters: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub iteration: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Where a stage starts in the cost trace, and the cost of its starting
/// state under that stage's objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub start_index: usize,
    pub dof: DofParam,
    pub p: f64,
    pub entry_cost: f64,
}

/// Everything the engine mutates during a run.
#[derive(Clone, Debug)]
pub struct RunState {
    pub w: DemixingStack,
    pub y: ComplexSpectrogram,
    pub factors: Vec<NmfFactors>,
    pub scales: Vec<ScaleModel>,
    /// Entry 0 is the initial cost, entry k the cost after iteration k.
    pub cost_trace: Vec<f64>,
    pub events: Vec<RunEvent>,
}

impl RunState {
    /// Identity demixing and the given source models.
    pub fn initial(x: &ComplexSpectrogram, factors: Vec<NmfFactors>) -> Result<Self> {
        let (bins, frames, n) = (x.bins(), x.frames(), x.streams());
        if factors.len() != n {
            return Err(Error::ShapeMismatch(format!("{} factor sets for {n} sources", factors.len())));
        }
        if factors.iter().any(|f| f.bins() != bins || f.frames() != frames) {
            return Err(Error::ShapeMismatch("initial factors do not match the observation".into()));
        }
        let w = DemixingStack::identity(bins, n);
        let y = w.separate(x)?;
        let scales = factors.iter().map(source_model::recompute_scale).collect();
        Ok(Self { w, y, factors, scales, cost_trace: Vec::new(), events: Vec::new() })
    }

    pub fn cost(&self, dof: DofParam, p: f64) -> Result<f64> {
        cost(&self.w, &self.y, &self.scales, dof, p)
    }

    /// Worst HEAD residual over all bins, with `U` built from the current
    /// outputs and source models.
    pub fn head_residual(&self, dof: DofParam, p: f64) -> f64 {
        (0..self.w.bins())
            .map(|i| {
                let weights = bin_weights(&self.y, &self.scales, i, dof, p);
                demix::head_residual_from_outputs(self.y.bin_slice(i), &weights)
            })
            .fold(0.0, f64::max)
    }
}

fn bin_weights(y: &ComplexSpectrogram, scales: &[ScaleModel], i: usize, dof: DofParam, p: f64) -> Vec<Vec<f64>> {
    let frames = y.frames();
    (0..y.streams())
        .map(|n| {
            let yn: Vec<_> = (0..frames).map(|j| y.get(i, j, n)).collect();
            let s2: Vec<_> = (0..frames).map(|j| source_model::sigma_squared(scales[n].get(i, j), p)).collect();
            demix::covariance_weights(&yn, &s2, dof)
        })
        .collect()
}

/// Negative log-likelihood with additive constants dropped:
/// `-2J sum_i log|det W_i| + sum_{i,j,n} [data term + (2/p) log sigma^p]`.
pub fn cost(w: &DemixingStack, y: &ComplexSpectrogram, scales: &[ScaleModel], dof: DofParam, p: f64) -> Result<f64> {
    let frames = y.frames() as f64;
    let mut log_det = 0.0;
    for (i, m) in w.matrices().iter().enumerate() {
        log_det += linalg::log_abs_det(m).map_err(|e| e.at_bin(i))?;
    }
    let source_terms: f64 =
        (0..y.streams()).map(|n| source_model::source_cost(&y.stream_power(n), &scales[n], p, dof)).sum();
    Ok(-2.0 * frames * log_det + source_terms)
}

/// Per-iteration view handed to observers.
pub struct IterationReport<'a> {
    pub iteration: usize,
    pub stage: usize,
    pub dof: DofParam,
    pub p: f64,
    pub cost: f64,
    /// Only computed when monitoring is enabled.
    pub cost_before_normalization: Option<f64>,
    /// Largest `|w^H U w - 1|` over the IP updates of this iteration.
    pub max_ip_residual: f64,
    pub state: &'a RunState,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides the seeded random initial factors.
    pub initial_factors: Option<Vec<NmfFactors>>,
    /// Also evaluate the cost before normalization each iteration.
    pub monitor: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub hyperparams: HyperParams,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SeparationResult {
    /// Back-projected image of each source at every microphone.
    pub images: Vec<ComplexSpectrogram>,
    pub w: DemixingStack,
    pub y: ComplexSpectrogram,
    pub factors: Vec<NmfFactors>,
    pub scales: Vec<ScaleModel>,
    pub cost_trace: Vec<f64>,
    pub stages: Vec<StageMarker>,
    pub events: Vec<RunEvent>,
    pub metadata: RunMetadata,
}

impl SeparationResult {
    /// The cost sequence of each stage, starting from its entry cost.
    pub fn stage_traces(&self) -> Vec<Vec<f64>> {
        self.stages
            .iter()
            .enumerate()
            .map(|(s, m)| {
                let end = self.stages.get(s + 1).map_or(self.cost_trace.len(), |next| next.start_index + 1);
                std::iter::once(m.entry_cost).chain(self.cost_trace[m.start_index + 1..end].iter().copied()).collect()
            })
            .collect()
    }

    /// First step (stage, index within stage) violating
    /// `next <= prev + rel |prev| + abs`, if any.
    pub fn first_monotonicity_violation(&self, rel: f64, abs: f64) -> Option<(usize, usize)> {
        self.stage_traces().iter().enumerate().find_map(|(s, trace)| {
            trace.windows(2).position(|w| w[1] > w[0] + rel * w[0].abs() + abs).map(|k| (s, k))
        })
    }
}

struct Engine<'a> {
    x: &'a ComplexSpectrogram,
    state: RunState,
    parallel: bool,
    monitor: bool,
}

impl Engine<'_> {
    fn iterate(&mut self, iteration: usize, dof: DofParam, p: f64) -> Result<(f64, Option<f64>)> {
        let x = self.x;
        let frames = x.frames();
        let n_src = x.streams();
        let state = &mut self.state;
        let scales = &state.scales;

        // Spatial step, independent per bin.
        let bin_step = |(i, (w, y_bin)): (usize, (&mut linalg::ComplexMatrix, &mut [num_complex::Complex64]))| {
            let x_bin = x.bin_slice(i);
            let mut residual: f64 = 0.0;
            let mut events = Vec::new();
            let mut yn = vec![num_complex::Complex64::new(0.0, 0.0); frames];
            let mut s2 = vec![0.0; frames];
            for n in 0..n_src {
                for j in 0..frames {
                    yn[j] = y_bin[j * n_src + n];
                    s2[j] = source_model::sigma_squared(scales[n].get(i, j), p);
                }
                let weights = demix::covariance_weights(&yn, &s2, dof);
                let step = demix::ip_step(w, x_bin, &weights, n, i)?;
                if let Some(epsilon) = step.ridge {
                    events.push(RunEvent { iteration, kind: EventKind::RidgeRecovery { bin: i, source: n, epsilon } });
                }
                if step.fallback {
                    events.push(RunEvent { iteration, kind: EventKind::IpFallback { bin: i, source: n } });
                }
                residual = residual.max(step.residual);
            }
            demix::separate_bin(w, x_bin, y_bin);
            Ok::<_, Error>((residual, events))
        };

        let per_bin: Vec<Result<(f64, Vec<RunEvent>)>> = if self.parallel {
            state.w.matrices_mut().par_iter_mut().zip(state.y.as_mut_slice().par_chunks_mut(frames * n_src)).enumerate().map(bin_step).collect()
        } else {
            state.w.matrices_mut().iter_mut().zip(state.y.bin_chunks_mut()).enumerate().map(bin_step).collect()
        };
        let mut max_ip_residual: f64 = 0.0;
        for r in per_bin {
            let (res, events) = r?;
            max_ip_residual = max_ip_residual.max(res);
            state.events.extend(events);
        }

        // Source-model step, independent per source.
        let y = &state.y;
        let sweep = |(n, (f, s)): (usize, (&mut NmfFactors, &mut ScaleModel))| {
            let power = y.stream_power(n);
            source_model::nmf_sweep(f, &power, s, dof);
        };
        if self.parallel {
            state.factors.par_iter_mut().zip(state.scales.par_iter_mut()).enumerate().for_each(sweep);
        } else {
            state.factors.iter_mut().zip(state.scales.iter_mut()).enumerate().for_each(sweep);
        }

        let before = if self.monitor { Some(state.cost(dof, p)?) } else { None };
        demix::normalize(&mut state.w, &mut state.y, &mut state.scales, &mut state.factors)?;
        let c = state.cost(dof, p)?;
        state.cost_trace.push(c);
        Ok((max_ip_residual, before))
    }

    fn run_stage(
        &mut self,
        stage: usize,
        first_iteration: usize,
        count: usize,
        dof: DofParam,
        p: f64,
        observer: &mut dyn FnMut(&IterationReport<'_>),
    ) -> Result<()> {
        for k in first_iteration..first_iteration + count {
            let (max_ip_residual, before) = self.iterate(k, dof, p).map_err(|e| e.at_iteration(k))?;
            observer(&IterationReport {
                iteration: k,
                stage,
                dof,
                p,
                cost: *self.state.cost_trace.last().expect("cost recorded"),
                cost_before_normalization: before,
                max_ip_residual,
                state: &self.state,
            });
        }
        Ok(())
    }
}

/// Seeded random factors for every source, drawn from one stream in source order.
pub fn initial_factors(x: &ComplexSpectrogram, rank: usize, p: f64, seed: u64) -> Result<Vec<NmfFactors>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..x.streams()).map(|_| NmfFactors::random(x.bins(), x.frames(), rank, p, &mut rng)).collect()
}

/// Separates `x` according to `hp.schedule`.
pub fn run(x: &ComplexSpectrogram, hp: &HyperParams) -> Result<SeparationResult> {
    run_with(x, hp, RunOptions::default(), &mut |_| {})
}

/// Gaussian warm-up followed by the configured model.
pub fn run_two_stage(x: &ComplexSpectrogram, hp: &HyperParams) -> Result<SeparationResult> {
    if !matches!(hp.schedule, Schedule::TwoStage { .. }) {
        return Err(Error::InvalidConfig("run_two_stage needs a two-stage schedule".into()));
    }
    run(x, hp)
}

/// Full-control entry point: optional initial factors, monitoring, and a
/// per-iteration observer.
pub fn run_with(
    x: &ComplexSpectrogram,
    hp: &HyperParams,
    options: RunOptions,
    observer: &mut dyn FnMut(&IterationReport<'_>),
) -> Result<SeparationResult> {
    hp.validate()?;
    if !x.is_finite() {
        return Err(Error::InvalidConfig("observation contains non-finite values".into()));
    }
    if hp.rank > x.bins().min(x.frames()) {
        return Err(Error::InvalidConfig(format!(
            "{} bases exceed min(bins, frames) = {}",
            hp.rank,
            x.bins().min(x.frames())
        )));
    }
    let started = Instant::now();

    let (stage1_dof, stage1_p, stage1_iters) = match hp.schedule {
        Schedule::SingleStage => (hp.dof, hp.p, hp.iterations),
        Schedule::TwoStage { gaussian_iters, .. } => (DofParam::Infinite, 2.0, gaussian_iters),
    };
    let factors = match options.initial_factors {
        Some(f) => {
            if f.iter().any(|fa| fa.p() != stage1_p || fa.rank() != hp.rank) {
                return Err(Error::InvalidConfig("initial factors disagree with the first stage's p or rank".into()));
            }
            f
        }
        None => initial_factors(x, hp.rank, stage1_p, hp.seed)?,
    };
    let mut state = RunState::initial(x, factors)?;
    let c0 = state.cost(stage1_dof, stage1_p)?;
    state.cost_trace.push(c0);
    let mut stages = vec![StageMarker { start_index: 0, dof: stage1_dof, p: stage1_p, entry_cost: c0 }];

    let mut engine = Engine { x, state, parallel: hp.parallel, monitor: options.monitor };
    engine.run_stage(0, 1, stage1_iters, stage1_dof, stage1_p, observer)?;

    if let Schedule::TwoStage { gaussian_iters, refit_iters } = hp.schedule {
        let state = &mut engine.state;
        for (f, s) in state.factors.iter_mut().zip(state.scales.iter_mut()) {
            let (nf, ns) = source_model::convert_domain(f, s, hp.p, hp.dof, refit_iters)?;
            *f = nf;
            *s = ns;
        }
        state.events.push(RunEvent {
            iteration: gaussian_iters,
            kind: EventKind::StageSwitch { dof: hp.dof, p: hp.p, refit_iters },
        });
        let entry_cost = state.cost(hp.dof, hp.p)?;
        stages.push(StageMarker { start_index: gaussian_iters, dof: hp.dof, p: hp.p, entry_cost });
        engine.run_stage(1, gaussian_iters + 1, hp.iterations - gaussian_iters, hp.dof, hp.p, observer)?;
    }

    let state = engine.state;
    let images = demix::back_project_all(&state.w, &state.y)?;
    Ok(SeparationResult {
        images,
        w: state.w,
        y: state.y,
        factors: state.factors,
        scales: state.scales,
        cost_trace: state.cost_trace,
        stages,
        events: state.events,
        metadata: RunMetadata { hyperparams: hp.clone(), elapsed_seconds: started.elapsed().as_secs_f64() },
    })
}
