//! Synthetic scenes: low-rank circular Gaussian sources mixed by per-bin
//! matrices, with ground truth kept for evaluation and replay.
//!
//! Scene files are JSON documents:
//!
//! ```text
//! { "format": "tilrma-scene", "version": 1, "seed": u64, "kind": "Instantaneous",
//!   "sources": [ { "seed", "factors": { bins, frames, rank, p, basis, activation },
//!                  "spectrogram": { bins, frames, streams, data: [[re, im], ...], meta } } ],
//!   "mixing": [ { rows, cols, data: [[re, im], ...] } ],   // one per bin
//!   "observation": { ...spectrogram... } }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so loading a
//! saved scene reproduces every tensor bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{invert, ComplexMatrix};
use crate::source_model::NmfFactors;
use crate::spectrogram::{ComplexSpectrogram, StftMeta};
use crate::stft::{frame_count, StftConfig};

pub const SCENE_FORMAT: &str = "tilrma-scene";
pub const SCENE_VERSION: u32 = 1;

/// Upper bound on `‖A‖_F ‖A⁻¹‖_F`, which bounds the 2-norm condition number.
pub const MAX_CONDITION: f64 = 100.0;

/// Sample rate assumed when attaching framing metadata to synthetic scenes.
pub const SYNTH_SAMPLE_RATE: f64 = 16_000.0;

/// One draw of `CN(0, variance)`: independent real and imaginary parts with
/// half the variance each.
pub fn sample_circular<R: Rng>(variance: f64, rng: &mut R) -> Complex64 {
    let sd = (0.5 * variance).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(sd * re, sd * im)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankSource {
    pub seed: u64,
    /// Ground truth `T*`, `V*` in the power domain: the slot variance is `(T*V*)_ij`.
    pub factors: NmfFactors,
    pub spectrogram: ComplexSpectrogram,
}

impl LowRankSource {
    pub fn variance(&self, i: usize, j: usize) -> f64 {
        (0..self.factors.rank()).map(|l| self.factors.t(i, l) * self.factors.v(l, j)).sum()
    }
}

/// Framing that makes a `bins × frames` spectrogram invertible by
/// [`crate::stft::synthesize`], when the bin count allows it.
pub fn synthetic_meta(bins: usize, frames: usize) -> Option<StftMeta> {
    if bins < 2 {
        return None;
    }
    let window = 2 * (bins - 1);
    let config = StftConfig::with_window_samples(window, SYNTH_SAMPLE_RATE);
    let (win, shift) = config.frame_geometry().ok()?;
    let signal_len = (frames.checked_sub(1)?) * shift;
    if win != window || signal_len == 0 || frame_count(signal_len, shift) != frames {
        return None;
    }
    Some(StftMeta { config, window_samples: win, shift_samples: shift, signal_len })
}

/// Draws `T*` (bins × rank) and `V*` (rank × frames) uniform on `(0, 1]`,
/// then each slot from `CN(0, (T*V*)_ij)`.
pub fn gen_low_rank_source(bins: usize, frames: usize, rank: usize, seed: u64) -> Result<LowRankSource> {
    if bins == 0 || frames == 0 || rank == 0 || rank > bins.min(frames) {
        return Err(Error::InvalidConfig(format!("rank {rank} must be in 1..=min({bins}, {frames})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| 1.0 - rng.random::<f64>()).collect() };
    let basis = draw(bins * rank);
    let activation = draw(rank * frames);
    let factors = NmfFactors::new(bins, frames, rank, 2.0, basis, activation)?;
    let mut source = LowRankSource { seed, factors, spectrogram: ComplexSpectrogram::zeros(bins, frames, 1) };
    for i in 0..bins {
        for j in 0..frames {
            let value = sample_circular(source.variance(i, j), &mut rng);
            source.spectrogram.set(i, j, 0, value);
        }
    }
    source.spectrogram = source.spectrogram.with_meta(synthetic_meta(bins, frames));
    Ok(source)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixingKind {
    /// One real matrix shared by every bin.
    Instantaneous,
    /// Complex matrices interpolated linearly across bins between two random endpoints.
    SmoothFrequencyVarying,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub kind: MixingKind,
    pub sources: Vec<LowRankSource>,
    /// `A_i` for every bin; stream `m` of the observation is row `m`.
    pub mixing: Vec<ComplexMatrix>,
    pub observation: ComplexSpectrogram,
}

/// `‖A‖_F ‖A⁻¹‖_F`, or infinity when `A` is singular.
pub fn condition_bound(a: &ComplexMatrix) -> f64 {
    match invert(a) {
        Ok(inv) => a.frobenius_norm() * inv.frobenius_norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Blends `a` toward a scaled identity of equal Frobenius norm until the
/// condition bound is at most [`MAX_CONDITION`].
pub fn clamp_condition(a: &ComplexMatrix) -> ComplexMatrix {
    if condition_bound(a) <= MAX_CONDITION {
        return a.clone();
    }
    let n = a.rows();
    let level = a.frobenius_norm() / (n as f64).sqrt();
    let target = ComplexMatrix::identity(n).scale(Complex64::new(level, 0.0));
    for step in 1..=20 {
        let kappa = step as f64 / 20.0;
        let blended = a.scale(Complex64::new(1.0 - kappa, 0.0)).add(&target.scale(Complex64::new(kappa, 0.0)));
        if condition_bound(&blended) <= MAX_CONDITION {
            return blended;
        }
    }
    target
}

fn random_matrix<R: Rng>(n: usize, complex: bool, rng: &mut R) -> ComplexMatrix {
    let data = (0..n * n)
        .map(|_| {
            let re = rng.random_range(-1.0..1.0);
            let im = if complex { rng.random_range(-1.0..1.0) } else { 0.0 };
            Complex64::new(re, im)
        })
        .collect();
    ComplexMatrix::from_row_major(n, n, data)
}

/// `X_i = A_i s_i` for every slot.
pub fn apply_mixing(mixing: &[ComplexMatrix], sources: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    let (bins, frames, n) = (sources.bins(), sources.frames(), sources.streams());
    if mixing.len() != bins || mixing.iter().any(|a| a.cols() != n || !a.is_square()) {
        return Err(Error::ShapeMismatch(format!("need {bins} square mixing matrices with {n} columns")));
    }
    let mut x = ComplexSpectrogram::zeros(bins, frames, n).with_meta(sources.meta().cloned());
    for (i, a) in mixing.iter().enumerate() {
        for j in 0..frames {
            let mixed = a.mul_vec(sources.slot(i, j));
            x.slot_mut(i, j).copy_from_slice(&mixed);
        }
    }
    Ok(x)
}

/// Mixes the sources. Matrices are drawn from `seed` and clamped to the
/// condition bound.
pub fn gen_mixture(sources: Vec<LowRankSource>, kind: MixingKind, seed: u64) -> Result<SyntheticScene> {
    let n = sources.len();
    if n == 0 {
        return Err(Error::InvalidConfig("a scene needs at least one source".into()));
    }
    let stacked = ComplexSpectrogram::stack(&sources.iter().map(|s| s.spectrogram.clone()).collect::<Vec<_>>())?;
    let bins = stacked.bins();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing: Vec<ComplexMatrix> = match kind {
        MixingKind::Instantaneous => vec![clamp_condition(&random_matrix(n, false, &mut rng)); bins],
        MixingKind::SmoothFrequencyVarying => {
            let a0 = random_matrix(n, true, &mut rng);
            let a1 = random_matrix(n, true, &mut rng);
            (0..bins)
                .map(|i| {
                    let tau = if bins > 1 { i as f64 / (bins - 1) as f64 } else { 0.0 };
                    let a = a0.scale(Complex64::new(1.0 - tau, 0.0)).add(&a1.scale(Complex64::new(tau, 0.0)));
                    clamp_condition(&a)
                })
                .collect()
        }
    };
    let observation = apply_mixing(&mixing, &stacked)?;
    Ok(SyntheticScene { format: SCENE_FORMAT.into(), version: SCENE_VERSION, seed, kind, sources, mixing, observation })
}

/// `sources` low-rank sources of the given shape, mixed. Source `n` uses
/// seed `seed * 1000 + n + 1` and the mixing uses `seed * 1000`.
pub fn gen_scene(
    sources: usize,
    bins: usize,
    frames: usize,
    rank: usize,
    kind: MixingKind,
    seed: u64,
) -> Result<SyntheticScene> {
    let base = seed.wrapping_mul(1000);
    let drawn = (0..sources as u64)
        .map(|n| gen_low_rank_source(bins, frames, rank, base.wrapping_add(n + 1)))
        .collect::<Result<Vec<_>>>()?;
    gen_mixture(drawn, kind, base)
}

impl SyntheticScene {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// Sources stacked as streams of one spectrogram.
    pub fn source_tensor(&self) -> Result<ComplexSpectrogram> {
        ComplexSpectrogram::stack(&self.sources.iter().map(|s| s.spectrogram.clone()).collect::<Vec<_>>())
    }

    /// Ground-truth image of source `n`: `A_i[:, n] s_n` at every microphone.
    pub fn source_image(&self, n: usize) -> ComplexSpectrogram {
        let src = &self.sources[n].spectrogram;
        let m = self.mixing[0].rows();
        ComplexSpectrogram::from_fn(src.bins(), src.frames(), m, |i, j, r| self.mixing[i][(r, n)] * src.get(i, j, 0))
            .with_meta(self.observation.meta().cloned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        serde_json::to_writer(&mut out, self)?;
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let scene: Self = serde_json::from_reader(BufReader::new(file))?;
        if scene.format != SCENE_FORMAT || scene.version != SCENE_VERSION {
            return Err(Error::UnsupportedFormat(format!("scene {} v{}", scene.format, scene.version)));
        }
        Ok(scene)
    }
}
