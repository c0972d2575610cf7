//! Short-time Fourier analysis and least-squares overlap-add synthesis.
//!
//! Signals are padded with half a window of zeros on both sides before
//! framing. Analysis uses a periodic Hamming window; synthesis divides the
//! overlap-added, re-windowed frames by the summed squared window, which is
//! the canonical least-squares dual and reconstructs unmodified spectrograms
//! exactly at every sample.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrogram::{ComplexSpectrogram, StftMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    Hamming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_length_ms: f64,
    pub shift_ms: f64,
    pub sample_rate_hz: f64,
    pub window_kind: WindowKind,
}

impl StftConfig {
    /// 512 ms Hamming window with a 128 ms shift.
    pub fn new(sample_rate_hz: f64) -> Self {
        Self { window_length_ms: 512.0, shift_ms: 128.0, sample_rate_hz, window_kind: WindowKind::Hamming }
    }

    /// A configuration whose window is exactly `window_samples` long at the
    /// given rate, with a quarter-window shift.
    pub fn with_window_samples(window_samples: usize, sample_rate_hz: f64) -> Self {
        let window_length_ms = window_samples as f64 * 1000.0 / sample_rate_hz;
        Self { window_length_ms, shift_ms: window_length_ms / 4.0, sample_rate_hz, window_kind: WindowKind::Hamming }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.window_length_ms) || !positive(self.shift_ms) || !positive(self.sample_rate_hz) {
            return Err(Error::InvalidConfig("STFT window, shift and sample rate must be positive".into()));
        }
        if self.overlap_ratio() < 2 {
            return Err(Error::InvalidConfig(format!(
                "window ({} ms) must be at least twice the shift ({} ms)",
                self.window_length_ms, self.shift_ms
            )));
        }
        Ok(())
    }

    /// Frames per window length; the shift is always window / ratio exactly.
    pub fn overlap_ratio(&self) -> usize {
        (self.window_length_ms / self.shift_ms).round().max(0.0) as usize
    }

    /// `(window_samples, shift_samples)`.
    ///
    /// The window is rounded to whole samples and then up to a multiple of the
    /// overlap ratio (and of 2, so the one-sided spectrum has a Nyquist bin).
    pub fn frame_geometry(&self) -> Result<(usize, usize)> {
        self.validate()?;
        let ratio = self.overlap_ratio();
        let align = if ratio.is_multiple_of(2) { ratio } else { 2 * ratio };
        let raw = (self.window_length_ms * self.sample_rate_hz / 1000.0).round().max(1.0) as usize;
        let window = raw.div_ceil(align) * align;
        Ok((window, window / ratio))
    }

    pub fn num_bins(&self) -> Result<usize> {
        Ok(self.frame_geometry()?.0 / 2 + 1)
    }
}

/// Periodic window of the given kind.
pub fn window(kind: WindowKind, len: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hamming => {
            (0..len).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos()).collect()
        }
    }
}

/// Number of frames produced for a signal of `len` samples.
pub fn frame_count(len: usize, shift: usize) -> usize {
    len.div_ceil(shift) + 1
}

/// Forward STFT of every channel. All channels must share one length.
pub fn analyze(channels: &[Vec<f64>], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let (win, shift) = cfg.frame_geometry()?;
    let num_channels = channels.len();
    if num_channels == 0 {
        return Err(Error::ShapeMismatch("no channels to analyze".into()));
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    if len < win {
        return Err(Error::SignalTooShort { len, window: win });
    }

    let bins = win / 2 + 1;
    let frames = frame_count(len, shift);
    let padded_len = (frames - 1) * shift + win;
    let w = window(cfg.window_kind, win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);

    let per_channel: Vec<Vec<Complex64>> = channels
        .par_iter()
        .map(|signal| {
            let mut padded = vec![0.0; padded_len];
            padded[win / 2..win / 2 + len].copy_from_slice(signal);
            let mut out = vec![Complex64::new(0.0, 0.0); bins * frames];
            let mut buf = vec![Complex64::new(0.0, 0.0); win];
            for j in 0..frames {
                let seg = &padded[j * shift..j * shift + win];
                for ((b, &x), &wt) in buf.iter_mut().zip(seg).zip(&w) {
                    *b = Complex64::new(x * wt, 0.0);
                }
                fft.process(&mut buf);
                for i in 0..bins {
                    out[i * frames + j] = buf[i];
                }
                out[j].im = 0.0;
                out[(bins - 1) * frames + j].im = 0.0;
            }
            out
        })
        .collect();

    let mut spec = ComplexSpectrogram::zeros(bins, frames, num_channels);
    for (m, chan) in per_channel.iter().enumerate() {
        for i in 0..bins {
            for j in 0..frames {
                spec.set(i, j, m, chan[i * frames + j]);
            }
        }
    }
    let meta = StftMeta { config: cfg.clone(), window_samples: win, shift_samples: shift, signal_len: len };
    Ok(spec.with_meta(Some(meta)))
}

/// Inverse STFT by least-squares overlap-add, one output channel per stream.
///
/// The spectrogram must carry the framing metadata written by [`analyze`]
/// (or attached explicitly for synthetic data).
pub fn synthesize(spec: &ComplexSpectrogram) -> Result<Vec<Vec<f64>>> {
    let meta = spec
        .meta()
        .ok_or_else(|| Error::InvalidConfig("spectrogram carries no STFT framing metadata".into()))?;
    let (win, shift, len) = (meta.window_samples, meta.shift_samples, meta.signal_len);
    let (bins, frames) = (spec.bins(), spec.frames());
    if bins != win / 2 + 1 {
        return Err(Error::ShapeMismatch(format!("{bins} bins do not match a {win}-sample window")));
    }
    let padded_len = (frames - 1) * shift + win;
    if padded_len < len + win {
        return Err(Error::ShapeMismatch(format!("{frames} frames cannot cover {len} samples")));
    }
    let w = window(meta.config.window_kind, win);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(win);

    let mut norm = vec![0.0; padded_len];
    for j in 0..frames {
        for (t, &wt) in w.iter().enumerate() {
            norm[j * shift + t] += wt * wt;
        }
    }

    let out = (0..spec.streams())
        .into_par_iter()
        .map(|s| {
            let mut acc = vec![0.0; padded_len];
            let mut buf = vec![Complex64::new(0.0, 0.0); win];
            for j in 0..frames {
                for i in 0..bins {
                    buf[i] = spec.get(i, j, s);
                }
                buf[0].im = 0.0;
                buf[bins - 1].im = 0.0;
                for i in 1..win - bins + 1 {
                    buf[win - i] = buf[i].conj();
                }
                ifft.process(&mut buf);
                for (t, &wt) in w.iter().enumerate() {
                    acc[j * shift + t] += wt * buf[t].re / win as f64;
                }
            }
            acc[win / 2..win / 2 + len].iter().zip(&norm[win / 2..]).map(|(a, n)| a / n).collect()
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_256() -> StftConfig {
        StftConfig::with_window_samples(256, 16000.0)
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_rms(a: &[f64], b: &[f64]) -> f64 {
        let err: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let energy: f64 = b.iter().map(|y| y * y).sum();
        (err / energy).sqrt()
    }

    #[test]
    fn default_geometry_matches_protocol() {
        let (win, shift) = StftConfig::new(16000.0).frame_geometry().unwrap();
        assert_eq!((win, shift), (8192, 2048));
        // 512 ms at 44.1 kHz is 22579.2 samples: rounded, then aligned up to 4.
        let (win, shift) = StftConfig::new(44100.0).frame_geometry().unwrap();
        assert_eq!((win, shift), (22580, 5645));
        assert_eq!(cfg_256().frame_geometry().unwrap(), (256, 64));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = cfg_256();
        cfg.shift_ms = cfg.window_length_ms;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        cfg.shift_ms = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn too_short_signal() {
        let err = analyze(&[vec![0.0; 100]], &cfg_256()).unwrap_err();
        assert!(matches!(err, Error::SignalTooShort { len: 100, window: 256 }));
    }

    #[test]
    fn zero_in_zero_out() {
        let spec = analyze(&[vec![0.0; 1000]], &cfg_256()).unwrap();
        assert_eq!(spec.max_abs(), 0.0);
        assert_eq!(spec.frames(), frame_count(1000, 64));
        let back = synthesize(&spec).unwrap();
        assert!(back[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let k0 = 17;
        let x: Vec<f64> = (0..4096).map(|n| (2.0 * PI * k0 as f64 * n as f64 / 256.0).cos()).collect();
        let spec = analyze(&[x], &cfg_256()).unwrap();
        // Frames whose window lies fully inside the signal.
        for j in 2..spec.frames() - 4 {
            let peak = (0..spec.bins()).max_by(|&a, &b| spec.get(a, j, 0).norm().total_cmp(&spec.get(b, j, 0).norm()));
            assert_eq!(peak, Some(k0), "frame {j}");
        }
    }

    #[test]
    fn dc_and_nyquist_are_real() {
        let spec = analyze(&[noise(2000, 1)], &cfg_256()).unwrap();
        for j in 0..spec.frames() {
            assert_eq!(spec.get(0, j, 0).im, 0.0);
            assert_eq!(spec.get(128, j, 0).im, 0.0);
        }
    }

    #[test]
    fn round_trip_noise() {
        for (len, seed) in [(1024, 1), (3000, 2), (8128, 3)] {
            let chans = vec![noise(len, seed), noise(len, seed + 100)];
            let back = synthesize(&analyze(&chans, &cfg_256()).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&chans) {
                assert_eq!(a.len(), len);
                assert!(rel_rms(a, b) <= 1e-8);
            }
        }
    }

    #[test]
    fn single_frame_stays_inside_its_window() {
        let cfg = cfg_256();
        let len = 2048;
        let spec = analyze(&[noise(len, 4)], &cfg).unwrap();
        let j0 = 10;
        let single = ComplexSpectrogram::from_fn(spec.bins(), spec.frames(), 1, |i, j, _| {
            if j == j0 { spec.get(i, j, 0) } else { Complex64::new(0.0, 0.0) }
        })
        .with_meta(spec.meta().cloned());
        let out = synthesize(&single).unwrap().remove(0);
        // Frame j0 covers padded samples [j0*64, j0*64+256), i.e. signal samples shifted by 128.
        let start = j0 * 64 - 128;
        for (t, &v) in out.iter().enumerate() {
            if t < start || t >= start + 256 {
                assert_eq!(v, 0.0, "sample {t} outside support");
            }
        }
        assert!(out[start..start + 256].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn analysis_is_linear() {
        let (x, y) = (noise(1500, 7), noise(1500, 8));
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let sx = analyze(&[x], &cfg_256()).unwrap();
        let sy = analyze(&[y], &cfg_256()).unwrap();
        let sm = analyze(&[mix], &cfg_256()).unwrap();
        for (k, z) in sm.as_slice().iter().enumerate() {
            let expect = sx.as_slice()[k] * a + sy.as_slice()[k] * b;
            assert!((z - expect).norm() <= 1e-12 * sm.max_abs());
        }
    }

    #[test]
    fn per_frame_parseval() {
        let x = noise(2000, 9);
        let spec = analyze(&[x.clone()], &cfg_256()).unwrap();
        let (win, shift) = (256, 64);
        let w = window(WindowKind::Hamming, win);
        let mut padded = vec![0.0; (spec.frames() - 1) * shift + win];
        padded[win / 2..win / 2 + x.len()].copy_from_slice(&x);
        for j in 0..spec.frames() {
            let time: f64 = (0..win).map(|t| (padded[j * shift + t] * w[t]).powi(2)).sum();
            let bins = spec.bins();
            let mut freq = spec.get(0, j, 0).norm_sqr() + spec.get(bins - 1, j, 0).norm_sqr();
            freq += 2.0 * (1..bins - 1).map(|i| spec.get(i, j, 0).norm_sqr()).sum::<f64>();
            freq /= win as f64;
            if time > 0.0 {
                assert!((time - freq).abs() <= 1e-10 * time, "frame {j}: {time} vs {freq}");
            }
        }
    }

    #[test]
    fn synthesis_requires_metadata() {
        let bare = ComplexSpectrogram::zeros(129, 10, 1);
        assert!(matches!(synthesize(&bare), Err(Error::InvalidConfig(_))));
    }
}
