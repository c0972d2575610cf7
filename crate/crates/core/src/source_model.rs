//! Low-rank NMF scale model and its majorization-minimization updates under
//! the isotropic complex Student's t likelihood.
//!
//! Each source carries `sigma^p = T V` with `T` (bins × rank) and `V`
//! (rank × frames) nonnegative. The updates below are the closed-form
//! multiplicative steps obtained after substituting the tangent-line and
//! Jensen auxiliary variables at their equality points, so no auxiliary
//! state is stored.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Lower bound applied to bases, activations and the scale model.
pub const FLOOR: f64 = 1e-12;

/// Refit iterations used when switching the model domain between stages.
pub const DEFAULT_REFIT_ITERS: usize = 10;

/// Degree-of-freedom parameter of the Student's t source model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DofParam {
    Finite(f64),
    /// The Gaussian limit, dispatched to exact Gaussian formulas.
    Infinite,
}

impl DofParam {
    pub fn finite(nu: f64) -> Result<Self> {
        if nu.is_finite() && nu > 0.0 {
            Ok(DofParam::Finite(nu))
        } else if nu == f64::INFINITY {
            Ok(DofParam::Infinite)
        } else {
            Err(Error::InvalidConfig(format!("degree of freedom must be positive, got {nu}")))
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, DofParam::Infinite)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            DofParam::Finite(nu) if !(nu.is_finite() && nu > 0.0) => {
                Err(Error::InvalidConfig(format!("degree of freedom must be positive, got {nu}")))
            }
            _ => Ok(()),
        }
    }

    /// Per-slot weight `|y|^2 / (nu/(nu+2) s2 + 2/(nu+2) |y|^2)`, i.e.
    /// `|y|^2 / (alpha sigma^2)` scaled by `(1 + 2/nu)`.
    #[inline]
    fn slot_weight(self, power: f64, sigma_sq: f64) -> f64 {
        match self {
            DofParam::Infinite => power / sigma_sq,
            DofParam::Finite(nu) => power / (nu / (nu + 2.0) * sigma_sq + 2.0 / (nu + 2.0) * power),
        }
    }

    /// Data term of the negative log-likelihood for one slot, constants dropped.
    #[inline]
    pub(crate) fn data_term(self, power: f64, sigma_sq: f64) -> f64 {
        match self {
            DofParam::Infinite => power / sigma_sq,
            DofParam::Finite(nu) => (1.0 + nu / 2.0) * (2.0 / nu * power / sigma_sq).ln_1p(),
        }
    }
}

impl fmt::Display for DofParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DofParam::Finite(nu) => write!(f, "{nu}"),
            DofParam::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for DofParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(DofParam::Infinite);
        }
        let nu: f64 = s.parse().map_err(|_| Error::InvalidConfig(format!("cannot parse degree of freedom {s:?}")))?;
        DofParam::finite(nu)
    }
}

impl Serialize for DofParam {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DofParam::Finite(nu) => serializer.serialize_f64(*nu),
            DofParam::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for DofParam {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(nu) => DofParam::finite(nu).map_err(serde::de::Error::custom),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

pub fn validate_domain_exponent(p: f64) -> Result<()> {
    if (1.0..=2.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("domain exponent p must lie in [1, 2], got {p}")))
    }
}

/// Exponent of the multiplicative update bracket.
#[inline]
pub fn update_exponent(p: f64) -> f64 {
    p / (p + 2.0)
}

/// `x^e` with exact shortcuts for the exponents that show up at p = 1 and p = 2.
#[inline]
pub(crate) fn pow_exp(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        x
    } else if e == 2.0 {
        x * x
    } else if e == 0.5 {
        x.sqrt()
    } else {
        x.powf(e)
    }
}

/// `sigma^2` recovered from the stored `sigma^p`.
#[inline]
pub fn sigma_squared(sigma_p: f64, p: f64) -> f64 {
    pow_exp(sigma_p, 2.0 / p)
}

/// Per-source nonnegative basis and activation matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmfFactors {
    bins: usize,
    frames: usize,
    rank: usize,
    p: f64,
    /// bins × rank, row-major
    basis: Vec<f64>,
    /// rank × frames, row-major
    activation: Vec<f64>,
}

impl NmfFactors {
    pub fn new(bins: usize, frames: usize, rank: usize, p: f64, basis: Vec<f64>, activation: Vec<f64>) -> Result<Self> {
        validate_domain_exponent(p)?;
        if rank == 0 || rank > bins.min(frames) {
            return Err(Error::InvalidConfig(format!("rank {rank} must be in 1..=min({bins}, {frames})")));
        }
        if basis.len() != bins * rank || activation.len() != rank * frames {
            return Err(Error::ShapeMismatch("factor entry counts do not match bins/frames/rank".into()));
        }
        let mut f = Self { bins, frames, rank, p, basis, activation };
        f.apply_floor();
        Ok(f)
    }

    /// Entries i.i.d. uniform on `(FLOOR, 1]`.
    pub fn random<R: Rng>(bins: usize, frames: usize, rank: usize, p: f64, rng: &mut R) -> Result<Self> {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| 1.0 - rng.random::<f64>() * (1.0 - FLOOR)).collect() };
        let basis = draw(bins * rank);
        let activation = draw(rank * frames);
        Self::new(bins, frames, rank, p, basis, activation)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub fn activation(&self) -> &[f64] {
        &self.activation
    }

    #[inline]
    pub fn t(&self, i: usize, l: usize) -> f64 {
        self.basis[i * self.rank + l]
    }

    #[inline]
    pub fn v(&self, l: usize, j: usize) -> f64 {
        self.activation[l * self.frames + j]
    }

    /// Multiplies every basis entry by `factor` (used by normalization).
    pub fn scale_basis(&mut self, factor: f64) {
        for t in &mut self.basis {
            *t = (*t * factor).max(FLOOR);
        }
    }

    fn apply_floor(&mut self) {
        for x in self.basis.iter_mut().chain(self.activation.iter_mut()) {
            *x = x.max(FLOOR);
        }
    }

    pub fn min_entry(&self) -> f64 {
        self.basis.iter().chain(&self.activation).copied().fold(f64::INFINITY, f64::min)
    }
}

/// `sigma^p` for one source, bins × frames, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleModel {
    bins: usize,
    frames: usize,
    sigma_p: Vec<f64>,
}

impl ScaleModel {
    pub fn from_values(bins: usize, frames: usize, sigma_p: Vec<f64>) -> Result<Self> {
        if sigma_p.len() != bins * frames {
            return Err(Error::ShapeMismatch("scale model entry count does not match bins × frames".into()));
        }
        Ok(Self { bins, frames, sigma_p: sigma_p.into_iter().map(|s| s.max(FLOOR)).collect() })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.sigma_p
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sigma_p[i * self.frames + j]
    }

    pub fn scale_by(&mut self, factor: f64) {
        for s in &mut self.sigma_p {
            *s = (*s * factor).max(FLOOR);
        }
    }
}

/// `sigma^p = T V`, floored.
pub fn recompute_scale(factors: &NmfFactors) -> ScaleModel {
    let (bins, frames, rank) = (factors.bins, factors.frames, factors.rank);
    let mut sigma_p = vec![0.0; bins * frames];
    for i in 0..bins {
        let row = &mut sigma_p[i * frames..(i + 1) * frames];
        for l in 0..rank {
            let t = factors.t(i, l);
            let v = &factors.activation[l * frames..(l + 1) * frames];
            for (s, &vv) in row.iter_mut().zip(v) {
                *s += t * vv;
            }
        }
        for s in row.iter_mut() {
            *s = s.max(FLOOR);
        }
    }
    ScaleModel { bins, frames, sigma_p }
}

fn check_shapes(factors: &NmfFactors, power: &[f64], scale: &ScaleModel) {
    assert_eq!(power.len(), factors.bins * factors.frames, "power slice has wrong size");
    assert_eq!((scale.bins, scale.frames), (factors.bins, factors.frames), "scale model has wrong shape");
}

/// Per-slot numerator and denominator weights shared by both updates.
fn slot_weights(factors: &NmfFactors, power: &[f64], scale: &ScaleModel, dof: DofParam) -> (Vec<f64>, Vec<f64>) {
    let p = factors.p;
    let mut num = Vec::with_capacity(power.len());
    let mut den = Vec::with_capacity(power.len());
    for (&pw, &sp) in power.iter().zip(&scale.sigma_p) {
        let inv_sp = 1.0 / sp;
        num.push(dof.slot_weight(pw, sigma_squared(sp, p)) * inv_sp);
        den.push(inv_sp);
    }
    (num, den)
}

/// Multiplicative update of the bases with the activations and scale fixed.
///
/// `power` holds `|y_ij|^2` for this source, bins × frames.
pub fn update_bases(factors: &mut NmfFactors, power: &[f64], scale: &ScaleModel, dof: DofParam) {
    check_shapes(factors, power, scale);
    let (bins, frames, rank) = (factors.bins, factors.frames, factors.rank);
    let exponent = update_exponent(factors.p);
    let (a, b) = slot_weights(factors, power, scale, dof);
    for i in 0..bins {
        let a_row = &a[i * frames..(i + 1) * frames];
        let b_row = &b[i * frames..(i + 1) * frames];
        for l in 0..rank {
            let v = &factors.activation[l * frames..(l + 1) * frames];
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..frames {
                num += a_row[j] * v[j];
                den += b_row[j] * v[j];
            }
            let t = &mut factors.basis[i * rank + l];
            *t = (*t * pow_exp(num / den, exponent)).max(FLOOR);
        }
    }
}

/// Multiplicative update of the activations with the bases and scale fixed.
pub fn update_activations(factors: &mut NmfFactors, power: &[f64], scale: &ScaleModel, dof: DofParam) {
    check_shapes(factors, power, scale);
    let (bins, frames, rank) = (factors.bins, factors.frames, factors.rank);
    let exponent = update_exponent(factors.p);
    let (a, b) = slot_weights(factors, power, scale, dof);
    let mut num = vec![0.0; rank * frames];
    let mut den = vec![0.0; rank * frames];
    for i in 0..bins {
        let a_row = &a[i * frames..(i + 1) * frames];
        let b_row = &b[i * frames..(i + 1) * frames];
        for l in 0..rank {
            let t = factors.t(i, l);
            let (nrow, drow) = (&mut num[l * frames..(l + 1) * frames], &mut den[l * frames..(l + 1) * frames]);
            for j in 0..frames {
                nrow[j] += a_row[j] * t;
                drow[j] += b_row[j] * t;
            }
        }
    }
    for ((v, n), d) in factors.activation.iter_mut().zip(&num).zip(&den) {
        *v = (*v * pow_exp(n / d, exponent)).max(FLOOR);
    }
}

/// One NMF sweep: bases, scale refresh, activations, scale refresh.
pub fn nmf_sweep(factors: &mut NmfFactors, power: &[f64], scale: &mut ScaleModel, dof: DofParam) {
    update_bases(factors, power, scale, dof);
    *scale = recompute_scale(factors);
    update_activations(factors, power, scale, dof);
    *scale = recompute_scale(factors);
}

/// Source-model part of the cost for one source (the demixing log-determinant
/// is added by the engine), constants dropped.
pub fn source_cost(power: &[f64], scale: &ScaleModel, p: f64, dof: DofParam) -> f64 {
    assert_eq!(power.len(), scale.sigma_p.len());
    power
        .iter()
        .zip(&scale.sigma_p)
        .map(|(&pw, &sp)| dof.data_term(pw, sigma_squared(sp, p)) + 2.0 / p * sp.ln())
        .sum()
}

pub fn init_factors(bins: usize, frames: usize, rank: usize, p: f64, seed: u64) -> Result<NmfFactors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NmfFactors::random(bins, frames, rank, p, &mut rng)
}

/// Per-slot `|y|^2` whose model optimum is exactly `target` in the `p` domain.
fn target_power(target: &ScaleModel, p: f64) -> Vec<f64> {
    target.sigma_p.iter().map(|&s| sigma_squared(s, p)).collect()
}

/// Excess of the source cost at `factors` over its minimum at `target`,
/// where the data are chosen so that `target` is the exact optimum.
///
/// Nonnegative, and zero exactly when `T V` reproduces `target`.
pub fn domain_fit_error(target: &ScaleModel, factors: &NmfFactors, dof: DofParam) -> f64 {
    let p = factors.p;
    let power = target_power(target, p);
    source_cost(&power, &recompute_scale(factors), p, dof) - source_cost(&power, target, p, dof)
}

/// Moves a model from `sigma^{p_old}` to `sigma^{new_p}`.
///
/// The converted target is `(sigma^{p_old})^{new_p / p_old}`. Factors start
/// from the elementwise powers `t^r`, `v^r` and are refit towards the target
/// by `refit_iters` MM sweeps whose optimum is the target itself.
pub fn convert_domain(
    factors: &NmfFactors,
    scale: &ScaleModel,
    new_p: f64,
    dof: DofParam,
    refit_iters: usize,
) -> Result<(NmfFactors, ScaleModel)> {
    validate_domain_exponent(new_p)?;
    if new_p == factors.p {
        return Ok((factors.clone(), scale.clone()));
    }
    let ratio = new_p / factors.p;
    let target = ScaleModel::from_values(
        scale.bins,
        scale.frames,
        scale.sigma_p.iter().map(|&s| pow_exp(s, ratio)).collect(),
    )?;
    let mut converted = NmfFactors::new(
        factors.bins,
        factors.frames,
        factors.rank,
        new_p,
        factors.basis.iter().map(|&t| pow_exp(t, ratio)).collect(),
        factors.activation.iter().map(|&v| pow_exp(v, ratio)).collect(),
    )?;
    let power = target_power(&target, new_p);
    let mut model = recompute_scale(&converted);
    for _ in 0..refit_iters {
        nmf_sweep(&mut converted, &power, &mut model, dof);
    }
    Ok((converted, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_power(bins: usize, frames: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..bins * frames).map(|_| rng.random_range(0.0..3.0f64).powi(2)).collect()
    }

    #[test]
    fn recompute_scale_examples() {
        let f = NmfFactors::new(1, 1, 1, 2.0, vec![2.0], vec![3.0]).unwrap();
        assert_eq!(recompute_scale(&f).values(), &[6.0]);

        // A zero basis row gets floored twice over; the product floors too.
        let f = NmfFactors::new(2, 1, 1, 1.0, vec![0.0, 1.0], vec![1e-3]).unwrap();
        let s = recompute_scale(&f);
        assert_eq!(s.get(0, 0), FLOOR);
        assert_eq!(s.get(1, 0), 1e-3);
    }

    #[test]
    fn recompute_scale_matches_naive_product() {
        let f = init_factors(4, 5, 2, 1.5, 42).unwrap();
        let s = recompute_scale(&f);
        for i in 0..4 {
            for j in 0..5 {
                let mut direct = 0.0;
                for l in 0..2 {
                    direct += f.t(i, l) * f.v(l, j);
                }
                assert!((s.get(i, j) - direct).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_in_range() {
        let a = init_factors(6, 7, 3, 2.0, 1).unwrap();
        let b = init_factors(6, 7, 3, 2.0, 1).unwrap();
        let c = init_factors(6, 7, 3, 2.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.basis().iter().chain(a.activation()).all(|&x| x >= FLOOR && x <= 1.0));
    }

    #[test]
    fn factor_validation() {
        assert!(NmfFactors::new(2, 2, 3, 2.0, vec![1.0; 6], vec![1.0; 6]).is_err());
        assert!(NmfFactors::new(2, 2, 1, 2.5, vec![1.0; 2], vec![1.0; 2]).is_err());
        assert!(NmfFactors::new(2, 2, 1, 1.0, vec![1.0; 3], vec![1.0; 2]).is_err());
    }

    #[test]
    fn dof_parsing() {
        assert_eq!("inf".parse::<DofParam>().unwrap(), DofParam::Infinite);
        assert_eq!("10".parse::<DofParam>().unwrap(), DofParam::Finite(10.0));
        assert!("0".parse::<DofParam>().is_err());
        assert!("-3".parse::<DofParam>().is_err());
        let json = serde_json::to_string(&[DofParam::Infinite, DofParam::Finite(2.5)]).unwrap();
        assert_eq!(json, r#"["inf",2.5]"#);
        let back: Vec<DofParam> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![DofParam::Infinite, DofParam::Finite(2.5)]);
    }

    #[test]
    fn update_exponent_values() {
        assert_eq!(update_exponent(1.0), 1.0 / 3.0);
        assert_eq!(update_exponent(2.0), 0.5);
    }

    #[test]
    fn gaussian_fixed_point_leaves_factors_unchanged() {
        let f0 = init_factors(5, 6, 2, 2.0, 3).unwrap();
        let scale = recompute_scale(&f0);
        // |y|^2 = sigma^2 = sigma^p at p = 2.
        let power = scale.values().to_vec();
        let mut f = f0.clone();
        update_bases(&mut f, &power, &scale, DofParam::Infinite);
        for (a, b) in f.basis().iter().zip(f0.basis()) {
            assert!((a - b).abs() <= 1e-14 * b);
        }
        let mut f = f0.clone();
        update_activations(&mut f, &power, &scale, DofParam::Infinite);
        for (a, b) in f.activation().iter().zip(f0.activation()) {
            assert!((a - b).abs() <= 1e-14 * b);
        }
    }

    // Scalar transcription of the t-NMF basis rule for I = J = L = 1.
    fn scalar_update(x: f64, other: f64, power: f64, nu: f64, p: f64) -> f64 {
        let sp = x * other;
        let sigma = sp.powf(1.0 / p);
        let denom_mix = nu / (nu + 2.0) * sigma * sigma + 2.0 / (nu + 2.0) * power;
        let num = power / denom_mix * sp.powf(-1.0) * other;
        let den = sp.powf(-1.0) * other;
        x * (num / den).powf(p / (p + 2.0))
    }

    #[test]
    fn scalar_updates_match_transcription() {
        for &(t, v, power, nu, p) in &[(0.7, 1.3, 2.0, 1.0, 1.0), (2.0, 0.4, 0.1, 5.0, 1.5), (1.0, 1.0, 9.0, 100.0, 2.0)] {
            let mut f = NmfFactors::new(1, 1, 1, p, vec![t], vec![v]).unwrap();
            let s = recompute_scale(&f);
            update_bases(&mut f, &[power], &s, DofParam::Finite(nu));
            let expect_t = scalar_update(t, v, power, nu, p);
            assert!((f.t(0, 0) - expect_t).abs() <= 1e-14 * expect_t);

            let mut f = NmfFactors::new(1, 1, 1, p, vec![t], vec![v]).unwrap();
            update_activations(&mut f, &[power], &s, DofParam::Finite(nu));
            let expect_v = scalar_update(v, t, power, nu, p);
            assert!((f.v(0, 0) - expect_v).abs() <= 1e-14 * expect_v);
        }
    }

    #[test]
    fn updates_do_not_increase_cost() {
        for &(nu, p) in &[(5.0, 1.0), (1.0, 1.0), (2.0, 1.5), (100.0, 2.0)] {
            let dof = DofParam::Finite(nu);
            let power = random_power(8, 10, 17);
            let mut f = init_factors(8, 10, 2, p, 23).unwrap();
            let mut s = recompute_scale(&f);
            let mut last = source_cost(&power, &s, p, dof);
            for _ in 0..30 {
                update_bases(&mut f, &power, &s, dof);
                s = recompute_scale(&f);
                let c = source_cost(&power, &s, p, dof);
                assert!(c <= last + 1e-10 * last.abs(), "bases: {c} > {last}");
                last = c;
                update_activations(&mut f, &power, &s, dof);
                s = recompute_scale(&f);
                let c = source_cost(&power, &s, p, dof);
                assert!(c <= last + 1e-10 * last.abs(), "activations: {c} > {last}");
                last = c;
                assert!(f.min_entry() >= FLOOR);
            }
        }
    }

    // Plain Itakura-Saito NMF, coded directly on r = T V.
    fn isnmf_sweep(t: &mut [f64], v: &mut [f64], power: &[f64], bins: usize, frames: usize, rank: usize) {
        let r = |t: &[f64], v: &[f64]| -> Vec<f64> {
            (0..bins * frames)
                .map(|ij| {
                    let (i, j) = (ij / frames, ij % frames);
                    (0..rank).map(|l| t[i * rank + l] * v[l * frames + j]).sum::<f64>().max(FLOOR)
                })
                .collect()
        };
        let rr = r(t, v);
        for i in 0..bins {
            for l in 0..rank {
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..frames {
                    let x = rr[i * frames + j];
                    num += power[i * frames + j] / (x * x) * v[l * frames + j];
                    den += v[l * frames + j] / x;
                }
                t[i * rank + l] = (t[i * rank + l] * (num / den).sqrt()).max(FLOOR);
            }
        }
        let rr = r(t, v);
        for l in 0..rank {
            for j in 0..frames {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..bins {
                    let x = rr[i * frames + j];
                    num += power[i * frames + j] / (x * x) * t[i * rank + l];
                    den += t[i * rank + l] / x;
                }
                v[l * frames + j] = (v[l * frames + j] * (num / den).sqrt()).max(FLOOR);
            }
        }
    }

    #[test]
    fn gaussian_limit_is_isnmf() {
        let (bins, frames, rank) = (7, 9, 3);
        let power = random_power(bins, frames, 5);
        let mut f = init_factors(bins, frames, rank, 2.0, 8).unwrap();
        let mut s = recompute_scale(&f);
        let mut t = f.basis().to_vec();
        let mut v = f.activation().to_vec();
        for _ in 0..20 {
            nmf_sweep(&mut f, &power, &mut s, DofParam::Infinite);
            isnmf_sweep(&mut t, &mut v, &power, bins, frames, rank);
            for (a, b) in f.basis().iter().zip(&t).chain(f.activation().iter().zip(&v)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn convert_domain_identity() {
        let f = init_factors(4, 4, 2, 2.0, 1).unwrap();
        let s = recompute_scale(&f);
        let (f2, s2) = convert_domain(&f, &s, 2.0, DofParam::Finite(10.0), 10).unwrap();
        assert_eq!((f2, s2), (f, s));
    }

    #[test]
    fn convert_domain_rank_one_is_exact_power() {
        let f = init_factors(5, 6, 1, 2.0, 4).unwrap();
        let s = recompute_scale(&f);
        let (f2, s2) = convert_domain(&f, &s, 1.0, DofParam::Finite(10.0), 10).unwrap();
        assert_eq!(f2.p(), 1.0);
        for i in 0..5 {
            for j in 0..6 {
                let expect = (f.t(i, 0) * f.v(0, j)).powf(0.5);
                assert!((s2.get(i, j) - expect).abs() <= 1e-12 * expect);
            }
        }
    }

    #[test]
    fn convert_domain_refit_does_not_worsen_fit() {
        let f = init_factors(12, 15, 3, 2.0, 9).unwrap();
        let s = recompute_scale(&f);
        let target = ScaleModel::from_values(12, 15, s.values().iter().map(|x| x.sqrt()).collect()).unwrap();
        for dof in [DofParam::Finite(1.0), DofParam::Finite(10.0), DofParam::Infinite] {
            let (unfit, _) = convert_domain(&f, &s, 1.0, dof, 0).unwrap();
            let (fit, _) = convert_domain(&f, &s, 1.0, dof, DEFAULT_REFIT_ITERS).unwrap();
            let before = domain_fit_error(&target, &unfit, dof);
            let after = domain_fit_error(&target, &fit, dof);
            assert!(before >= -1e-9 && after >= -1e-9);
            assert!(after <= before + 1e-12, "{dof}: {after} > {before}");
        }
    }

    #[test]
    fn cost_large_nu_approaches_gaussian() {
        let power = random_power(6, 6, 2);
        let f = init_factors(6, 6, 2, 2.0, 3).unwrap();
        let s = recompute_scale(&f);
        let g = source_cost(&power, &s, 2.0, DofParam::Infinite);
        let t = source_cost(&power, &s, 2.0, DofParam::Finite(1e9));
        assert!((g - t).abs() <= 1e-6 * g.abs());
    }
}
