//! Spatial half of the algorithm: weighted covariances, iterative-projection
//! row updates, scale normalization and back-projection.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ComplexMatrix, ComplexVector};
use crate::source_model::{DofParam, NmfFactors, ScaleModel};
use crate::spectrogram::ComplexSpectrogram;

/// Sources with average power below this cannot be normalized.
pub const MIN_SOURCE_POWER: f64 = 1e-150;

/// Relative ridge added to a singular weighted covariance.
pub const RIDGE_SCALE: f64 = 1e-12;

/// One square demixing matrix per frequency bin; row `n` is `w_{i,n}^H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemixingStack {
    matrices: Vec<ComplexMatrix>,
}

impl DemixingStack {
    pub fn identity(bins: usize, sources: usize) -> Self {
        Self { matrices: vec![ComplexMatrix::identity(sources); bins] }
    }

    pub fn from_matrices(matrices: Vec<ComplexMatrix>) -> Result<Self> {
        let n = matrices.first().map(|m| m.rows()).ok_or_else(|| Error::ShapeMismatch("empty demixing stack".into()))?;
        if matrices.iter().any(|m| m.rows() != n || m.cols() != n) {
            return Err(Error::ShapeMismatch("demixing matrices must all be square and equal-sized".into()));
        }
        Ok(Self { matrices })
    }

    pub fn bins(&self) -> usize {
        self.matrices.len()
    }

    pub fn sources(&self) -> usize {
        self.matrices[0].rows()
    }

    pub fn get(&self, bin: usize) -> &ComplexMatrix {
        &self.matrices[bin]
    }

    pub fn get_mut(&mut self, bin: usize) -> &mut ComplexMatrix {
        &mut self.matrices[bin]
    }

    pub fn matrices(&self) -> &[ComplexMatrix] {
        &self.matrices
    }

    pub fn matrices_mut(&mut self) -> &mut [ComplexMatrix] {
        &mut self.matrices
    }

    /// Largest entrywise difference over all bins.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.matrices.iter().zip(&other.matrices).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    /// `y_ij = W_i x_ij` for every slot.
    pub fn separate(&self, x: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        if x.bins() != self.bins() || x.streams() != self.sources() {
            return Err(Error::ShapeMismatch(format!(
                "observation is {}×{}×{}, demixing stack is {} bins of {}×{}",
                x.bins(),
                x.frames(),
                x.streams(),
                self.bins(),
                self.sources(),
                self.sources()
            )));
        }
        let mut y = x.clone();
        for (i, chunk) in y.bin_chunks_mut().enumerate() {
            separate_bin(&self.matrices[i], x.bin_slice(i), chunk);
        }
        Ok(y)
    }
}

/// Writes `W x` for every frame of one bin; both slices are frames × streams.
pub(crate) fn separate_bin(w: &ComplexMatrix, x_bin: &[Complex64], y_bin: &mut [Complex64]) {
    let n = w.rows();
    for (x, y) in x_bin.chunks_exact(n).zip(y_bin.chunks_exact_mut(n)) {
        for (k, out) in y.iter_mut().enumerate() {
            *out = w.row(k).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

/// `U_{i,n}`, Hermitian positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCovariance(ComplexMatrix);

impl WeightedCovariance {
    pub fn from_matrix(m: ComplexMatrix) -> Self {
        assert!(m.is_square());
        Self(m)
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }
}

/// Per-frame weights `c_j` such that `U = sum_j c_j x_j x_j^H`:
/// `(1/J)(1 + 2/nu) / (sigma^2 + (2/nu)|y|^2)`, or `(1/J) / sigma^2` in the Gaussian limit.
pub fn covariance_weights(y: &[Complex64], sigma_sq: &[f64], dof: DofParam) -> Vec<f64> {
    let frames = y.len();
    assert_eq!(sigma_sq.len(), frames);
    let inv_j = 1.0 / frames as f64;
    y.iter()
        .zip(sigma_sq)
        .map(|(yv, &s2)| match dof {
            DofParam::Infinite => inv_j / s2,
            DofParam::Finite(nu) => inv_j * (1.0 + 2.0 / nu) / (s2 + 2.0 / nu * yv.norm_sqr()),
        })
        .collect()
}

/// `sum_j c_j x_j x_j^H` for the frames of one bin (frames × channels).
pub fn covariance_from_weights(x_bin: &[Complex64], weights: &[f64]) -> WeightedCovariance {
    let frames = weights.len();
    assert!(frames > 0 && x_bin.len().is_multiple_of(frames));
    let channels = x_bin.len() / frames;
    let mut u = ComplexMatrix::zeros(channels, channels);
    for (x, &c) in x_bin.chunks_exact(channels).zip(weights) {
        linalg::accumulate_outer_in_place(&mut u, x, c);
    }
    WeightedCovariance(u)
}

/// Builds `U = (1/J) (1 + 2/nu) sum_j x_ij x_ij^H / (sigma^2 + (2/nu) |y|^2)`,
/// or `(1/J) sum_j x x^H / sigma^2` in the Gaussian limit.
///
/// `x_bin` holds the frames of one bin (frames × channels), `y` the current
/// estimate of source `n` and `sigma_sq` its model `sigma^2`, both per frame.
pub fn weighted_covariance(
    x_bin: &[Complex64],
    y: &[Complex64],
    sigma_sq: &[f64],
    dof: DofParam,
) -> WeightedCovariance {
    covariance_from_weights(x_bin, &covariance_weights(y, sigma_sq, dof))
}

/// `a^H U b` summed over frames, `sum_j c_j (a^H x_j)(x_j^H b)`, without
/// forming `U`. Stays accurate when a few weights dwarf the rest, where
/// the explicit matrix loses the small ones to rounding.
pub fn weighted_form(x_bin: &[Complex64], weights: &[f64], a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let channels = a.len();
    x_bin
        .chunks_exact(channels)
        .zip(weights)
        .map(|(x, &c)| {
            let ax: Complex64 = a.iter().zip(x).map(|(ak, xk)| ak.conj() * xk).sum();
            let xb: Complex64 = x.iter().zip(b).map(|(xk, bk)| xk.conj() * bk).sum();
            c * ax * xb
        })
        .sum()
}

/// `w^H U w` from the data; real and nonnegative.
pub fn weighted_norm_sq(x_bin: &[Complex64], weights: &[f64], w: &[Complex64]) -> f64 {
    let channels = w.len();
    x_bin
        .chunks_exact(channels)
        .zip(weights)
        .map(|(x, &c)| c * w.iter().zip(x).map(|(wk, xk)| wk.conj() * xk).sum::<Complex64>().norm_sqr())
        .sum()
}

/// Iterative-projection update of the `n`-th demixing filter:
/// `w = (W U)^{-1} e_n`, then `w / sqrt(w^H U w)`.
///
/// Returns the filter `w` itself; the matrix row is its conjugate.
pub fn ip_update(w: &ComplexMatrix, u: &WeightedCovariance, n: usize) -> Result<ComplexVector> {
    let wu = w * &u.0;
    let mut v = linalg::solve_column(&wu, n)?;
    let quad = linalg::quadratic_form(&v, &u.0, &v).re;
    if !(quad.is_finite() && quad > 0.0) {
        return Err(Error::SingularMatrix { column: n, pivot: quad.max(0.0) });
    }
    let inv = 1.0 / quad.sqrt();
    for z in &mut v {
        *z *= inv;
    }
    Ok(v)
}

/// Outcome of a guarded IP update.
#[derive(Clone, Debug, PartialEq)]
pub struct IpOutcome {
    pub filter: ComplexVector,
    /// Ridge added to `U` when the plain update was singular.
    pub ridge: Option<f64>,
}

/// [`ip_update`] with ridge recovery: on failure retry with
/// `U + eps I`, `eps = 1e-12 trace(U) / N`.
pub fn ip_update_guarded(w: &ComplexMatrix, u: &WeightedCovariance, n: usize, bin: usize) -> Result<IpOutcome> {
    match ip_update(w, u, n) {
        Ok(filter) => Ok(IpOutcome { filter, ridge: None }),
        Err(_) => {
            let dim = u.0.rows();
            let trace = u.0.trace().re;
            let eps = if trace > 0.0 { RIDGE_SCALE * trace / dim as f64 } else { RIDGE_SCALE };
            let ridged = WeightedCovariance(u.0.add(&ComplexMatrix::identity(dim).scale(Complex64::new(eps, 0.0))));
            log::warn!("singular IP system at bin {bin}, source {n}; retrying with ridge {eps:e}");
            ip_update(w, &ridged, n)
                .map(|filter| IpOutcome { filter, ridge: Some(eps) })
                .map_err(|_| Error::SingularSystem { bin, source_index: n })
        }
    }
}

/// Result of one safeguarded row update.
#[derive(Clone, Debug, PartialEq)]
pub struct IpStep {
    pub filter: ComplexVector,
    pub ridge: Option<f64>,
    /// The solved filter raised the per-bin surrogate (possible only through
    /// rounding), so the previous filter, rescaled, was kept instead.
    pub fallback: bool,
    /// `|w^H U w - 1|` of the returned filter.
    pub residual: f64,
}

/// IP update of row `n` in place, with normalization and a descent check
/// done on data sums.
///
/// In exact arithmetic the solved filter minimizes
/// `w_n^H U_n w_n - log|det W|^2`, so it can never be worse than the old one.
/// When rounding makes it worse, the old filter scaled to its own optimum
/// `w / sqrt(w^H U w)` is tried next, and failing that the old filter is kept.
pub fn ip_step(w: &mut ComplexMatrix, x_bin: &[Complex64], weights: &[f64], n: usize, bin: usize) -> Result<IpStep> {
    let u = covariance_from_weights(x_bin, weights);
    let outcome = ip_update_guarded(w, &u, n, bin)?;
    let old = filter(w, n);
    let old_q = weighted_norm_sq(x_bin, weights, &old);
    let old_value = linalg::log_abs_det(w).ok().map(|ld| old_q - 2.0 * ld);

    // Installs `candidate / sqrt(q(candidate))` and returns the surrogate there.
    let mut try_install = |candidate: &[Complex64]| -> Option<(ComplexVector, f64)> {
        let q = weighted_norm_sq(x_bin, weights, candidate);
        if !(q.is_finite() && q > 0.0) {
            return None;
        }
        let s = 1.0 / q.sqrt();
        let scaled: ComplexVector = candidate.iter().map(|z| z * s).collect();
        set_filter(w, n, &scaled);
        let ld = linalg::log_abs_det(w).ok()?;
        Some((scaled.clone(), weighted_norm_sq(x_bin, weights, &scaled) - 2.0 * ld))
    };
    let no_worse = |value: f64| old_value.is_none_or(|old| value <= old);

    let (chosen, fallback) = match try_install(&outcome.filter) {
        Some((f, value)) if no_worse(value) => (f, false),
        _ => match try_install(&old) {
            Some((f, value)) if no_worse(value) => (f, true),
            _ => {
                if !(old_q.is_finite() && old_q > 0.0) {
                    return Err(Error::SingularSystem { bin, source_index: n });
                }
                set_filter(w, n, &old);
                (old, true)
            }
        },
    };
    let residual = (weighted_norm_sq(x_bin, weights, &chosen) - 1.0).abs();
    Ok(IpStep { filter: chosen, ridge: outcome.ridge, fallback, residual })
}

/// Writes `w^H` into row `n` of `W`.
pub fn set_filter(w: &mut ComplexMatrix, n: usize, filter: &[Complex64]) {
    for (dst, src) in w.row_mut(n).iter_mut().zip(filter) {
        *dst = src.conj();
    }
}

/// The filter `w_n` stored (conjugated) in row `n`.
pub fn filter(w: &ComplexMatrix, n: usize) -> ComplexVector {
    w.row(n).iter().map(|z| z.conj()).collect()
}

/// `max_{k,n} |w_k^H U_n w_n - delta_kn|`, zero at a stationary point.
pub fn head_residual(w: &ComplexMatrix, u_list: &[WeightedCovariance]) -> f64 {
    let n_src = w.rows();
    assert_eq!(u_list.len(), n_src);
    let filters: Vec<_> = (0..n_src).map(|k| filter(w, k)).collect();
    let mut worst: f64 = 0.0;
    for (n, u) in u_list.iter().enumerate() {
        for k in 0..n_src {
            let target = if k == n { 1.0 } else { 0.0 };
            let val = linalg::quadratic_form(&filters[k], &u.0, &filters[n]);
            worst = worst.max((val - Complex64::new(target, 0.0)).norm());
        }
    }
    worst
}

/// [`head_residual`] from the separated outputs `y_bin` (frames × sources)
/// and each source's covariance weights: `w_k^H U_n w_n = sum_j c_nj y_kj conj(y_nj)`.
pub fn head_residual_from_outputs(y_bin: &[Complex64], weights: &[Vec<f64>]) -> f64 {
    let n_src = weights.len();
    let mut worst: f64 = 0.0;
    for (n, c) in weights.iter().enumerate() {
        for k in 0..n_src {
            let val: Complex64 = y_bin.chunks_exact(n_src).zip(c).map(|(y, &cj)| cj * y[k] * y[n].conj()).sum();
            let target = if k == n { 1.0 } else { 0.0 };
            worst = worst.max((val - target).norm());
        }
    }
    worst
}

/// Per-source normalization coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationCoeffs {
    pub eta: Vec<f64>,
}

/// Rescales every source to unit average power.
///
/// `eta_n = sqrt(mean |y_n|^2)`; rows of `W` and `y_n` are divided by `eta_n`,
/// while `sigma^p` and the bases are multiplied by `eta_n^{-p}`.
pub fn normalize(
    w: &mut DemixingStack,
    y: &mut ComplexSpectrogram,
    scales: &mut [ScaleModel],
    factors: &mut [NmfFactors],
) -> Result<NormalizationCoeffs> {
    let n_src = y.streams();
    assert_eq!(w.sources(), n_src);
    assert_eq!(scales.len(), n_src);
    assert_eq!(factors.len(), n_src);
    let eta: Vec<f64> = (0..n_src).map(|n| y.stream_mean_power(n).sqrt()).collect();
    if let Some((n, &e)) = eta.iter().enumerate().find(|(_, &e)| !(e >= MIN_SOURCE_POWER && e.is_finite())) {
        return Err(Error::DegenerateSource { source_index: n, eta: e });
    }
    let inv: Vec<f64> = eta.iter().map(|e| 1.0 / e).collect();
    for m in w.matrices_mut() {
        for (n, &s) in inv.iter().enumerate() {
            for z in m.row_mut(n) {
                *z *= s;
            }
        }
    }
    for slot in y.as_mut_slice().chunks_exact_mut(n_src) {
        for (z, &s) in slot.iter_mut().zip(&inv) {
            *z *= s;
        }
    }
    for n in 0..n_src {
        let p = factors[n].p();
        let f = eta[n].powf(-p);
        scales[n].scale_by(f);
        factors[n].scale_basis(f);
    }
    Ok(NormalizationCoeffs { eta })
}

/// Image of source `n` at every microphone: `W_i^{-1} (e_n ∘ y_ij)`.
pub fn back_project(w: &DemixingStack, y: &ComplexSpectrogram, n: usize) -> Result<ComplexSpectrogram> {
    let mut images = back_project_sources(w, y, &[n])?;
    Ok(images.remove(0))
}

/// Images of every source.
pub fn back_project_all(w: &DemixingStack, y: &ComplexSpectrogram) -> Result<Vec<ComplexSpectrogram>> {
    let all: Vec<usize> = (0..y.streams()).collect();
    back_project_sources(w, y, &all)
}

fn back_project_sources(w: &DemixingStack, y: &ComplexSpectrogram, sources: &[usize]) -> Result<Vec<ComplexSpectrogram>> {
    let (bins, frames, n_src) = (y.bins(), y.frames(), y.streams());
    if w.bins() != bins || w.sources() != n_src {
        return Err(Error::ShapeMismatch("demixing stack does not match estimate".into()));
    }
    let mut images = vec![ComplexSpectrogram::zeros(bins, frames, n_src).with_meta(y.meta().cloned()); sources.len()];
    for i in 0..bins {
        let a = linalg::invert(w.get(i)).map_err(|e| e.at_bin(i))?;
        for j in 0..frames {
            let slot = y.slot(i, j);
            for (img, &n) in images.iter_mut().zip(sources) {
                let yn = slot[n];
                for (m, out) in img.slot_mut(i, j).iter_mut().enumerate() {
                    *out = a[(m, n)] * yn;
                }
            }
        }
    }
    Ok(images)
}
