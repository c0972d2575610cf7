//! Separation quality: scale-invariant SDR, projection SDR with a
//! time-invariant allowed-distortion filter, and permutation alignment.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported dB values are clamped to `[-CAP_DB, CAP_DB]`.
pub const CAP_DB: f64 = 100.0;

/// Allowed-distortion filter length for protocol evaluation.
pub const DEFAULT_TAPS: usize = 512;

fn ratio_db(signal: f64, noise: f64) -> f64 {
    let db = if noise <= 0.0 {
        CAP_DB
    } else if signal <= 0.0 {
        -CAP_DB
    } else {
        10.0 * (signal / noise).log10()
    };
    db.clamp(-CAP_DB, CAP_DB)
}

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.is_empty() || reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    if reference.iter().all(|&x| x == 0.0) {
        return Err(Error::ZeroReference);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let alpha = dot(estimate, reference) / dot(reference, reference);
    let (mut signal, mut noise) = (0.0, 0.0);
    for (&s, &e) in reference.iter().zip(estimate) {
        let t = alpha * s;
        signal += t * t;
        noise += (e - t) * (e - t);
    }
    Ok(ratio_db(signal, noise))
}

/// SDR after projecting the estimate onto the span of the reference delayed
/// by `0..taps` samples. With `taps = 1` this is [`si_sdr`].
pub fn sdr_projection(reference: &[f64], estimate: &[f64], taps: usize) -> Result<f64> {
    check_pair(reference, estimate)?;
    let len = reference.len();
    if taps == 0 || taps > len {
        return Err(Error::InvalidConfig(format!("taps must be in 1..={len}, got {taps}")));
    }
    let s = reference;

    // Gram matrix of the truncated delayed references. The first row is the
    // zero-padded autocorrelation; each step down the diagonal drops one
    // product at the end of the signal.
    let mut gram = vec![0.0; taps * taps];
    for lag in 0..taps {
        gram[lag] = dot(&s[lag..], &s[..len - lag]);
    }
    for d1 in 1..taps {
        for d2 in d1..taps {
            let v = gram[(d1 - 1) * taps + d2 - 1] - s[len - d1] * s[len - d2];
            gram[d1 * taps + d2] = v;
        }
    }
    for d1 in 0..taps {
        for d2 in 0..d1 {
            gram[d1 * taps + d2] = gram[d2 * taps + d1];
        }
    }
    let rhs: Vec<f64> = (0..taps).map(|d| dot(&estimate[d..], &s[..len - d])).collect();
    let coeffs = cholesky_solve(&mut gram, &rhs, taps).ok_or(Error::IllConditionedProjection { taps })?;

    let mut target = vec![0.0; len];
    for (d, &a) in coeffs.iter().enumerate() {
        for (t, v) in target[d..].iter_mut().zip(&s[..len - d]) {
            *t += a * v;
        }
    }
    let signal = dot(&target, &target);
    let noise: f64 = estimate.iter().zip(&target).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok(ratio_db(signal, noise))
}

/// In-place Cholesky solve of a symmetric positive-definite system.
/// Returns `None` when a pivot falls below `1e-12` of the largest diagonal.
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let max_diag = (0..n).map(|k| a[k * n + k]).fold(0.0, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    let tol = 1e-12 * max_diag;
    for k in 0..n {
        let mut d = a[k * n + k];
        for m in 0..k {
            d -= a[k * n + m] * a[k * n + m];
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        a[k * n + k] = d;
        for r in k + 1..n {
            let mut v = a[r * n + k];
            for m in 0..k {
                v -= a[r * n + m] * a[k * n + m];
            }
            a[r * n + k] = v / d;
        }
    }
    let mut x = b.to_vec();
    for r in 0..n {
        for m in 0..r {
            x[r] -= a[r * n + m] * x[m];
        }
        x[r] /= a[r * n + r];
    }
    for r in (0..n).rev() {
        for m in r + 1..n {
            x[r] -= a[m * n + r] * x[m];
        }
        x[r] /= a[r * n + r];
    }
    Some(x)
}

fn sdr(reference: &[f64], estimate: &[f64], taps: usize) -> Result<f64> {
    if taps == 1 {
        si_sdr(reference, estimate)
    } else {
        sdr_projection(reference, estimate, taps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SDR of each reference against its assigned estimate.
    pub sdr_db: Vec<f64>,
    /// `permutation[r]` is the estimate assigned to reference `r`.
    pub permutation: Vec<usize>,
    /// SDR of the unprocessed mixture against each reference.
    pub baseline_sdr_db: Option<Vec<f64>>,
    pub mean_improvement_db: Option<f64>,
}

impl EvalReport {
    pub fn mean_sdr_db(&self) -> f64 {
        self.sdr_db.iter().sum::<f64>() / self.sdr_db.len() as f64
    }
}

/// Exhaustive search over assignments maximizing the total SDR.
pub fn align_permutation(references: &[Vec<f64>], estimates: &[Vec<f64>], taps: usize) -> Result<EvalReport> {
    let n = references.len();
    if n == 0 || n != estimates.len() {
        return Err(Error::ShapeMismatch(format!("{n} references vs {} estimates", estimates.len())));
    }
    if n > 8 {
        return Err(Error::InvalidConfig("permutation search supports at most 8 sources".into()));
    }
    let mut scores = vec![0.0; n * n];
    for (r, reference) in references.iter().enumerate() {
        for (e, estimate) in estimates.iter().enumerate() {
            scores[r * n + e] = sdr(reference, estimate, taps)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(r, &e)| scores[r * n + e]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, perm));
        }
    }
    let (_, permutation) = best.expect("at least one permutation");
    let sdr_db = permutation.iter().enumerate().map(|(r, &e)| scores[r * n + e]).collect();
    Ok(EvalReport { sdr_db, permutation, baseline_sdr_db: None, mean_improvement_db: None })
}

/// [`align_permutation`] plus the improvement over the unprocessed mixture.
pub fn evaluate(references: &[Vec<f64>], estimates: &[Vec<f64>], mixture: &[f64], taps: usize) -> Result<EvalReport> {
    let mut report = align_permutation(references, estimates, taps)?;
    let baseline: Vec<f64> = references.iter().map(|r| sdr(r, mixture, taps)).collect::<Result<_>>()?;
    let improvement =
        report.sdr_db.iter().zip(&baseline).map(|(s, b)| s - b).sum::<f64>() / baseline.len() as f64;
    report.baseline_sdr_db = Some(baseline);
    report.mean_improvement_db = Some(improvement);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_and_scaled_estimates_hit_the_cap() {
        let s = noise(500, 1);
        assert_eq!(si_sdr(&s, &s).unwrap(), CAP_DB);
        let scaled: Vec<f64> = s.iter().map(|x| 2.0 * x).collect();
        assert_eq!(si_sdr(&s, &scaled).unwrap(), CAP_DB);
    }

    #[test]
    fn constructed_ten_db_noise() {
        let s = noise(4000, 2);
        let mut n = noise(4000, 3);
        // Remove the component of n along s so the projection is exactly s.
        let k = dot(&n, &s) / dot(&s, &s);
        for (a, b) in n.iter_mut().zip(&s) {
            *a -= k * b;
        }
        let scale = (dot(&s, &s) / dot(&n, &n) / 10.0).sqrt();
        let est: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + scale * b).collect();
        let db = si_sdr(&s, &est).unwrap();
        assert!((db - 10.0).abs() <= 0.1, "{db}");
    }

    #[test]
    fn errors() {
        assert!(matches!(si_sdr(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::ZeroReference)));
        assert!(si_sdr(&[1.0], &[1.0, 2.0]).is_err());
        assert!(sdr_projection(&[1.0, 2.0], &[1.0, 2.0], 0).is_err());
        let r = [1.0, 0.0, 0.0, 0.0];
        let e = [1.0, 1.0, 1.0, 1.0];
        assert!(sdr_projection(&r, &e, 4).is_ok());
        // The one-sample delay of an impulse at the end is truncated away.
        let r = [0.0, 0.0, 0.0, 1.0];
        assert!(matches!(sdr_projection(&r, &e, 2), Err(Error::IllConditionedProjection { taps: 2 })));
    }

    #[test]
    fn single_tap_projection_is_si_sdr() {
        for seed in 0..20 {
            let s = noise(300, seed);
            let e: Vec<f64> = noise(300, seed + 100).iter().zip(&s).map(|(n, x)| 0.7 * x + 0.3 * n).collect();
            let a = si_sdr(&s, &e).unwrap();
            let b = sdr_projection(&s, &e, 1).unwrap();
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn delay_within_filter_is_absorbed() {
        let s = noise(1000, 4);
        let d = 5;
        let mut delayed = vec![0.0; 1000];
        delayed[d..].copy_from_slice(&s[..1000 - d]);
        assert_eq!(sdr_projection(&s, &delayed, 8).unwrap(), CAP_DB);
        assert!(sdr_projection(&s, &delayed, 3).unwrap() < 10.0);
    }

    #[test]
    fn projection_matches_dense_least_squares() {
        use nalgebra::{DMatrix, DVector};
        let (len, taps) = (400, 6);
        let s = noise(len, 7);
        let e = noise(len, 8);
        let a = DMatrix::from_fn(len, taps, |t, d| if t >= d { s[t - d] } else { 0.0 });
        let b = DVector::from_vec(e.clone());
        let coeffs = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        let target = &a * coeffs;
        let residual = &b - &target;
        let oracle = 10.0 * (target.norm_squared() / residual.norm_squared()).log10();
        let got = sdr_projection(&s, &e, taps).unwrap();
        assert!((got - oracle).abs() <= 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn more_taps_never_hurt() {
        let s = noise(600, 9);
        let e: Vec<f64> = noise(600, 10).iter().zip(&s).map(|(n, x)| x + 0.5 * n).collect();
        let mut last = f64::NEG_INFINITY;
        for taps in [1, 2, 4, 8, 16, 32] {
            let v = sdr_projection(&s, &e, taps).unwrap();
            assert!(v >= last - 1e-9);
            last = v;
        }
    }

    #[test]
    fn permutation_recovers_swapped_order() {
        let refs = vec![noise(300, 1), noise(300, 2)];
        let ests = vec![refs[1].clone(), refs[0].clone()];
        let rep = align_permutation(&refs, &ests, 1).unwrap();
        assert_eq!(rep.permutation, vec![1, 0]);
        assert!(rep.sdr_db.iter().all(|&v| v == CAP_DB));

        let rep = align_permutation(&refs[..1], &ests[1..], 1).unwrap();
        assert_eq!(rep.permutation, vec![0]);
    }

    #[test]
    fn permutation_matches_transcribed_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let refs: Vec<_> = (0..3).map(|k| noise(200, 20 + k)).collect();
        let ests: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let mix: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                (0..200).map(|t| (0..3).map(|r| mix[r] * refs[r][t]).sum::<f64>() + 0.1 * (k as f64)).collect()
            })
            .collect();
        let rep = align_permutation(&refs, &ests, 1).unwrap();
        // Independent search over all six assignments.
        let all = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut best = (f64::NEG_INFINITY, [0; 3]);
        for p in all {
            let total: f64 = (0..3).map(|r| si_sdr(&refs[r], &ests[p[r]]).unwrap()).sum();
            if total > best.0 {
                best = (total, p);
            }
        }
        assert_eq!(rep.permutation, best.1.to_vec());
        let identity: f64 = (0..3).map(|r| si_sdr(&refs[r], &ests[r]).unwrap()).sum();
        assert!(rep.sdr_db.iter().sum::<f64>() >= identity);
    }

    #[test]
    fn improvement_over_mixture() {
        let refs = vec![noise(500, 30), noise(500, 31)];
        let mix: Vec<f64> = refs[0].iter().zip(&refs[1]).map(|(a, b)| a + b).collect();
        let rep = evaluate(&refs, &refs, &mix, 1).unwrap();
        let base = rep.baseline_sdr_db.clone().unwrap();
        let expect = ((CAP_DB - base[0]) + (CAP_DB - base[1])) / 2.0;
        assert!((rep.mean_improvement_db.unwrap() - expect).abs() < 1e-12);
    }
}
