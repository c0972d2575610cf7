//! Numeric checks of the bounds behind the monotone updates.
//!
//! The production loop substitutes every auxiliary variable at its optimum in
//! closed form. Here the auxiliaries are explicit inputs, so the objective
//! `L`, its first surrogate `L+` (tangent-line bound on the log, auxiliaries
//! `alpha` and `beta`) and the second surrogate `L++` (Jensen bound on
//! `(sum_l t v)^(-2/p)`, auxiliary `gamma`) can be evaluated at any point.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::demix::DemixingStack;
use crate::error::{Error, Result};
use crate::linalg::{self, ComplexMatrix};
use crate::source_model::{DofParam, NmfFactors};
use crate::spectrogram::ComplexSpectrogram;

/// Absolute slack allowed on scalar inequalities.
pub const INEQUALITY_TOL: f64 = 1e-12;
/// Relative tolerance on surrogate touch and dominance.
pub const TOUCH_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl InequalityCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, holds: lhs <= rhs + INEQUALITY_TOL }
    }

    pub fn gap(&self) -> f64 {
        self.rhs - self.lhs
    }
}

fn require_positive(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() || values.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::InvalidConfig(format!("{what} must be non-empty, finite and positive")));
    }
    Ok(())
}

/// `log sum z <= (sum z - lambda)/lambda + log lambda`.
pub fn check_tangent_inequality(z: &[f64], lambda: f64) -> Result<InequalityCheck> {
    require_positive(z, "z")?;
    require_positive(&[lambda], "lambda")?;
    let total: f64 = z.iter().sum();
    Ok(InequalityCheck::new(total.ln(), (total - lambda) / lambda + lambda.ln()))
}

/// `(sum z)^(-2/p) <= sum mu^(2/p+1) z^(-2/p)` for weights `mu` summing to one.
pub fn check_jensen_inequality(z: &[f64], mu: &[f64], p: f64) -> Result<InequalityCheck> {
    require_positive(z, "z")?;
    require_positive(mu, "mu")?;
    if z.len() != mu.len() {
        return Err(Error::ShapeMismatch(format!("{} values but {} weights", z.len(), mu.len())));
    }
    if (mu.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig("weights must sum to one".into()));
    }
    if !(1.0..=2.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("p must be in [1, 2], got {p}")));
    }
    let e = 2.0 / p;
    let total: f64 = z.iter().sum();
    let rhs = z.iter().zip(mu).map(|(&zq, &mq)| mq.powf(e + 1.0) * zq.powf(-e)).sum();
    Ok(InequalityCheck::new(total.powf(-e), rhs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FuzzSummary {
    pub samples: usize,
    /// Random draws where `lhs > rhs + INEQUALITY_TOL`.
    pub violations: usize,
    /// Draws at the equality setting where `|lhs - rhs|` exceeded the tolerance.
    pub equality_failures: usize,
    pub max_excess: f64,
}

impl FuzzSummary {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.equality_failures == 0
    }

    fn record(&mut self, random: InequalityCheck, at_equality: InequalityCheck) {
        self.samples += 1;
        self.violations += usize::from(!random.holds);
        self.max_excess = self.max_excess.max(random.lhs - random.rhs);
        let scale = at_equality.lhs.abs().max(1.0);
        self.equality_failures += usize::from((at_equality.lhs - at_equality.rhs).abs() > INEQUALITY_TOL * scale);
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn random_z<R: Rng>(rng: &mut R) -> Vec<f64> {
    let len = rng.random_range(1..=8);
    (0..len).map(|_| log_uniform(rng, 1e-2, 1e2)).collect()
}

/// Random `(z, lambda)` draws, each paired with the `lambda = sum z` case.
pub fn fuzz_tangent(samples: usize, seed: u64) -> FuzzSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = FuzzSummary { max_excess: f64::NEG_INFINITY, ..Default::default() };
    for _ in 0..samples {
        let z = random_z(&mut rng);
        let lambda = log_uniform(&mut rng, 1e-3, 1e3);
        let random = check_tangent_inequality(&z, lambda).expect("positive draws");
        let equal = check_tangent_inequality(&z, z.iter().sum()).expect("positive draws");
        summary.record(random, equal);
    }
    summary
}

/// Random `(z, mu, p)` draws with `p` cycling through 1, 1.5 and 2, each
/// paired with the `mu = z / sum z` case.
pub fn fuzz_jensen(samples: usize, seed: u64) -> FuzzSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = FuzzSummary { max_excess: f64::NEG_INFINITY, ..Default::default() };
    for k in 0..samples {
        let p = [1.0, 1.5, 2.0][k % 3];
        let z = random_z(&mut rng);
        let raw: Vec<f64> = z.iter().map(|_| log_uniform(&mut rng, 1e-2, 1.0)).collect();
        let mu = normalized(&raw);
        let optimal = normalized(&z);
        let random = check_jensen_inequality(&z, &mu, p).expect("valid draws");
        let equal = check_jensen_inequality(&z, &optimal, p).expect("valid draws");
        summary.record(random, equal);
    }
    summary
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    let mut out: Vec<f64> = v.iter().map(|x| x / total).collect();
    // Put the rounding residue on the largest entry so the sum is 1 to an ulp.
    let residue = 1.0 - out.iter().sum::<f64>();
    let k = (0..out.len()).max_by(|&a, &b| out[a].total_cmp(&out[b])).unwrap_or(0);
    out[k] += residue;
    out
}

/// A point at which the objective and its surrogates are evaluated.
#[derive(Clone, Debug)]
pub struct MajorizerState {
    pub w: DemixingStack,
    pub x: ComplexSpectrogram,
    pub factors: Vec<NmfFactors>,
    /// `W_i x_ij`, cached.
    pub y: ComplexSpectrogram,
}

impl MajorizerState {
    pub fn new(w: DemixingStack, x: ComplexSpectrogram, factors: Vec<NmfFactors>) -> Result<Self> {
        let n = w.sources();
        if x.streams() != n || w.bins() != x.bins() || factors.len() != n {
            return Err(Error::ShapeMismatch("state sizes disagree".into()));
        }
        if factors.iter().any(|f| f.bins() != x.bins() || f.frames() != x.frames()) {
            return Err(Error::ShapeMismatch("factor shapes disagree with the observation".into()));
        }
        let y = w.separate(&x)?;
        Ok(Self { w, x, factors, y })
    }

    /// Random well-posed state: `W_i = I + 0.5 G` with Gaussian `G`, Gaussian
    /// observations and uniform factors.
    pub fn random<R: Rng>(bins: usize, frames: usize, sources: usize, rank: usize, p: f64, rng: &mut R) -> Result<Self> {
        let mut gauss = |s: f64| Complex64::new(s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal));
        let mats = (0..bins)
            .map(|_| {
                let data = (0..sources * sources).map(|_| gauss(0.5)).collect();
                ComplexMatrix::identity(sources).add(&ComplexMatrix::from_row_major(sources, sources, data))
            })
            .collect();
        let x = ComplexSpectrogram::from_fn(bins, frames, sources, |_, _, _| gauss(1.0));
        let factors =
            (0..sources).map(|_| NmfFactors::random(bins, frames, rank, p, rng)).collect::<Result<Vec<_>>>()?;
        Self::new(DemixingStack::from_matrices(mats)?, x, factors)
    }

    fn bins(&self) -> usize {
        self.y.bins()
    }

    fn frames(&self) -> usize {
        self.y.frames()
    }

    fn sources(&self) -> usize {
        self.y.streams()
    }

    fn rank(&self) -> usize {
        self.factors[0].rank()
    }

    fn component(&self, n: usize, i: usize, j: usize, l: usize) -> f64 {
        self.factors[n].t(i, l) * self.factors[n].v(l, j)
    }

    fn sigma_p(&self, n: usize, i: usize, j: usize) -> f64 {
        (0..self.factors[n].rank()).map(|l| self.component(n, i, j, l)).sum()
    }

    fn slot(&self, i: usize, j: usize, n: usize) -> usize {
        (i * self.frames() + j) * self.sources() + n
    }
}

/// Auxiliary variables, laid out bin, frame, source (and basis for `gamma`).
/// `alpha` is empty in the Gaussian limit, where the log term does not occur.
#[derive(Clone, Debug, PartialEq)]
pub struct Auxiliaries {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Auxiliaries {
    /// The settings at which each surrogate touches the one above it:
    /// `alpha = 1 + (2/nu)|y|^2/sigma^2`, `beta = sum_l t v`, `gamma_l = t_l v_l / sum_l t v`.
    pub fn optimal(state: &MajorizerState, dof: DofParam, p: f64) -> Self {
        let (bins, frames, sources, rank) = (state.bins(), state.frames(), state.sources(), state.rank());
        let mut aux = Self { alpha: Vec::new(), beta: Vec::new(), gamma: Vec::new() };
        for i in 0..bins {
            for j in 0..frames {
                for n in 0..sources {
                    let sp = state.sigma_p(n, i, j);
                    if let DofParam::Finite(nu) = dof {
                        let power = state.y.get(i, j, n).norm_sqr();
                        aux.alpha.push(1.0 + 2.0 / nu * power / sp.powf(2.0 / p));
                    }
                    aux.beta.push(sp);
                    aux.gamma.extend((0..rank).map(|l| state.component(n, i, j, l) / sp));
                }
            }
        }
        aux
    }

    /// Multiplies every entry by `exp(u)` with `u` uniform on `[-spread, spread]`,
    /// then renormalizes each `gamma` group.
    pub fn perturbed<R: Rng>(&self, spread: f64, rank: usize, rng: &mut R) -> Self {
        let mut jitter = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * rng.random_range(-spread..=spread).exp()).collect() };
        let alpha = jitter(&self.alpha);
        let beta = jitter(&self.beta);
        let gamma = jitter(&self.gamma).chunks(rank).flat_map(normalized).collect();
        Self { alpha, beta, gamma }
    }
}

/// A value together with the sum of magnitudes of its terms, which serves
/// as the scale for relative comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluated {
    pub value: f64,
    pub magnitude: f64,
}

struct Accumulator {
    value: f64,
    magnitude: f64,
}

impl Accumulator {
    fn new(state: &MajorizerState) -> Result<Self> {
        let mut acc = Accumulator { value: 0.0, magnitude: 0.0 };
        let scale = -2.0 * state.frames() as f64;
        for m in state.w.matrices() {
            acc.add(scale * linalg::log_abs_det(m)?);
        }
        Ok(acc)
    }

    fn add(&mut self, term: f64) {
        self.value += term;
        self.magnitude += term.abs();
    }

    fn finish(self) -> Evaluated {
        Evaluated { value: self.value, magnitude: self.magnitude.max(f64::MIN_POSITIVE) }
    }
}

fn check_dof_p(dof: DofParam, p: f64) -> Result<()> {
    dof.validate()?;
    if !(1.0..=2.0).contains(&p) || (dof.is_infinite() && p != 2.0) {
        return Err(Error::InvalidConfig(format!("unsupported (nu, p) = ({dof}, {p})")));
    }
    Ok(())
}

/// The objective itself.
pub fn objective(state: &MajorizerState, dof: DofParam, p: f64) -> Result<Evaluated> {
    check_dof_p(dof, p)?;
    let mut acc = Accumulator::new(state)?;
    for i in 0..state.bins() {
        for j in 0..state.frames() {
            for n in 0..state.sources() {
                let power = state.y.get(i, j, n).norm_sqr();
                let sp = state.sigma_p(n, i, j);
                let s2 = sp.powf(2.0 / p);
                acc.add(match dof {
                    DofParam::Infinite => power / s2,
                    DofParam::Finite(nu) => (1.0 + nu / 2.0) * (1.0 + 2.0 / nu * power / s2).ln(),
                });
                acc.add(2.0 / p * sp.ln());
            }
        }
    }
    Ok(acc.finish())
}

fn check_aux(state: &MajorizerState, aux: &Auxiliaries, dof: DofParam, with_gamma: bool) -> Result<()> {
    let slots = state.bins() * state.frames() * state.sources();
    let alpha_len = if dof.is_infinite() { 0 } else { slots };
    if aux.alpha.len() != alpha_len || aux.beta.len() != slots || (with_gamma && aux.gamma.len() != slots * state.rank())
    {
        return Err(Error::ShapeMismatch("auxiliary sizes do not match the state".into()));
    }
    Ok(())
}

/// Evaluates `L+` (`inv_sigma_sq = None`) or `L++` (with a Jensen bound
/// supplying `sigma^-2` per slot).
fn surrogate(
    state: &MajorizerState,
    aux: &Auxiliaries,
    dof: DofParam,
    p: f64,
    inv_sigma_sq: impl Fn(usize, usize, usize, usize) -> f64,
) -> Result<Evaluated> {
    let mut acc = Accumulator::new(state)?;
    for i in 0..state.bins() {
        for j in 0..state.frames() {
            for n in 0..state.sources() {
                let k = state.slot(i, j, n);
                let power = state.y.get(i, j, n).norm_sqr();
                let sp = state.sigma_p(n, i, j);
                let inv_s2 = inv_sigma_sq(i, j, n, k);
                acc.add(match dof {
                    DofParam::Infinite => power * inv_s2,
                    DofParam::Finite(nu) => {
                        let a = aux.alpha[k];
                        (1.0 + nu / 2.0) * ((1.0 + 2.0 / nu * power * inv_s2 - a) / a + a.ln())
                    }
                });
                let b = aux.beta[k];
                acc.add(2.0 / p * ((sp - b) / b + b.ln()));
            }
        }
    }
    Ok(acc.finish())
}

/// First surrogate `L+(alpha, beta)`.
pub fn surrogate_plus(state: &MajorizerState, aux: &Auxiliaries, dof: DofParam, p: f64) -> Result<Evaluated> {
    check_dof_p(dof, p)?;
    check_aux(state, aux, dof, false)?;
    surrogate(state, aux, dof, p, |i, j, n, _| state.sigma_p(n, i, j).powf(-2.0 / p))
}

/// Second surrogate `L++(alpha, beta, gamma)`.
pub fn surrogate_plus_plus(state: &MajorizerState, aux: &Auxiliaries, dof: DofParam, p: f64) -> Result<Evaluated> {
    check_dof_p(dof, p)?;
    check_aux(state, aux, dof, true)?;
    let rank = state.rank();
    let e = 2.0 / p;
    surrogate(state, aux, dof, p, |i, j, n, k| {
        (0..rank).map(|l| aux.gamma[k * rank + l].powf(e + 1.0) * state.component(n, i, j, l).powf(-e)).sum()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MajorizerReport {
    pub objective: f64,
    pub plus_at_optimum: f64,
    pub plus_plus_at_optimum: f64,
    /// `|L - L+| / magnitude` at the optimal auxiliaries.
    pub touch_plus: f64,
    /// `|L+ - L++| / magnitude` at the optimal auxiliaries.
    pub touch_plus_plus: f64,
    pub plus_perturbed: f64,
    pub plus_plus_perturbed: f64,
    /// `L <= L+ <= L++` at the perturbed auxiliaries, to [`TOUCH_TOL`] relative.
    pub dominance: bool,
}

impl MajorizerReport {
    pub fn passed(&self) -> bool {
        self.touch_plus <= TOUCH_TOL && self.touch_plus_plus <= TOUCH_TOL && self.dominance
    }
}

/// Evaluates the chain at the optimal auxiliaries and at a random
/// perturbation of them drawn from `rng`.
pub fn check_majorizer_touch<R: Rng>(
    state: &MajorizerState,
    dof: DofParam,
    p: f64,
    rng: &mut R,
) -> Result<MajorizerReport> {
    let l = objective(state, dof, p)?;
    let opt = Auxiliaries::optimal(state, dof, p);
    let lp = surrogate_plus(state, &opt, dof, p)?;
    let lpp = surrogate_plus_plus(state, &opt, dof, p)?;
    let scale = l.magnitude.max(lp.magnitude).max(lpp.magnitude);

    let pert = opt.perturbed(0.5, state.rank(), rng);
    let lp_pert = surrogate_plus(state, &pert, dof, p)?;
    let lpp_pert = surrogate_plus_plus(state, &pert, dof, p)?;
    let pert_scale = scale.max(lp_pert.magnitude).max(lpp_pert.magnitude);
    let slack = TOUCH_TOL * pert_scale;
    Ok(MajorizerReport {
        objective: l.value,
        plus_at_optimum: lp.value,
        plus_plus_at_optimum: lpp.value,
        touch_plus: (l.value - lp.value).abs() / scale,
        touch_plus_plus: (lp.value - lpp.value).abs() / scale,
        plus_perturbed: lp_pert.value,
        plus_plus_perturbed: lpp_pert.value,
        dominance: l.value <= lp_pert.value + slack && lp_pert.value <= lpp_pert.value + slack,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MajorizerSuiteSummary {
    pub states: usize,
    pub failures: usize,
    pub max_touch: f64,
}

impl MajorizerSuiteSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random states with sizes up to 8 and `(nu, p)` drawn from
/// `{1, 2, 10, 100} x [1, 2]` plus the Gaussian limit.
pub fn run_majorizer_suite(states: usize, seed: u64) -> Result<MajorizerSuiteSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = MajorizerSuiteSummary::default();
    for k in 0..states {
        let bins = rng.random_range(1..=8);
        let frames = rng.random_range(1..=8);
        let sources = rng.random_range(1..=8);
        let rank = rng.random_range(1..=bins.min(frames));
        let (dof, p) = match k % 5 {
            4 => (DofParam::Infinite, 2.0),
            c => (DofParam::Finite([1.0, 2.0, 10.0, 100.0][c]), rng.random_range(1.0..=2.0)),
        };
        let state = MajorizerState::random(bins, frames, sources, rank, p, &mut rng)?;
        let report = check_majorizer_touch(&state, dof, p, &mut rng)?;
        summary.states += 1;
        summary.failures += usize::from(!report.passed());
        summary.max_touch = summary.max_touch.max(report.touch_plus).max(report.touch_plus_plus);
    }
    Ok(summary)
}
