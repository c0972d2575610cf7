use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::StftConfig;

/// Framing information kept alongside a spectrogram produced by analysis,
/// enough to resynthesize a time signal of the original length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftMeta {
    pub config: StftConfig,
    pub window_samples: usize,
    pub shift_samples: usize,
    pub signal_len: usize,
}

/// Complex tensor of shape bins × frames × streams.
///
/// A stream is a microphone channel for observations and a source for
/// estimates. Storage is bin-major, then frame, then stream, so the
/// per-slot vector `x_ij` over streams is contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexSpectrogram {
    bins: usize,
    frames: usize,
    streams: usize,
    data: Vec<Complex64>,
    meta: Option<StftMeta>,
}

impl ComplexSpectrogram {
    pub fn zeros(bins: usize, frames: usize, streams: usize) -> Self {
        assert!(bins >= 1 && frames >= 1 && streams >= 1, "spectrogram dimensions must be positive");
        Self { bins, frames, streams, data: vec![Complex64::new(0.0, 0.0); bins * frames * streams], meta: None }
    }

    pub fn from_fn(
        bins: usize,
        frames: usize,
        streams: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex64,
    ) -> Self {
        let mut out = Self::zeros(bins, frames, streams);
        for i in 0..bins {
            for j in 0..frames {
                for s in 0..streams {
                    out.data[(i * frames + j) * streams + s] = f(i, j, s);
                }
            }
        }
        out
    }

    /// Stacks single-stream spectrograms of equal shape into one tensor.
    pub fn stack(parts: &[ComplexSpectrogram]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("nothing to stack".into()))?;
        let (bins, frames) = (first.bins, first.frames);
        let streams: usize = parts.iter().map(|p| p.streams).sum();
        if parts.iter().any(|p| p.bins != bins || p.frames != frames) {
            return Err(Error::ShapeMismatch("stacked spectrograms differ in bins/frames".into()));
        }
        let mut out = Self::zeros(bins, frames, streams);
        for i in 0..bins {
            for j in 0..frames {
                let mut s = 0;
                for p in parts {
                    for k in 0..p.streams {
                        out.data[(i * frames + j) * streams + s] = p.get(i, j, k);
                        s += 1;
                    }
                }
            }
        }
        out.meta = first.meta.clone();
        Ok(out)
    }

    pub fn with_meta(mut self, meta: Option<StftMeta>) -> Self {
        self.meta = meta;
        self
    }

    #[inline]
    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn streams(&self) -> usize {
        self.streams
    }

    pub fn meta(&self) -> Option<&StftMeta> {
        self.meta.as_ref()
    }

    #[inline]
    pub fn get(&self, bin: usize, frame: usize, stream: usize) -> Complex64 {
        self.data[(bin * self.frames + frame) * self.streams + stream]
    }

    #[inline]
    pub fn set(&mut self, bin: usize, frame: usize, stream: usize, value: Complex64) {
        self.data[(bin * self.frames + frame) * self.streams + stream] = value;
    }

    /// The vector over streams at one time-frequency slot.
    #[inline]
    pub fn slot(&self, bin: usize, frame: usize) -> &[Complex64] {
        let start = (bin * self.frames + frame) * self.streams;
        &self.data[start..start + self.streams]
    }

    #[inline]
    pub fn slot_mut(&mut self, bin: usize, frame: usize) -> &mut [Complex64] {
        let start = (bin * self.frames + frame) * self.streams;
        &mut self.data[start..start + self.streams]
    }

    /// All frames of one bin, frame-major (`frames × streams`).
    pub fn bin_slice(&self, bin: usize) -> &[Complex64] {
        let len = self.frames * self.streams;
        &self.data[bin * len..(bin + 1) * len]
    }

    /// Mutable per-bin chunks, in bin order.
    pub fn bin_chunks_mut(&mut self) -> std::slice::ChunksExactMut<'_, Complex64> {
        let len = self.frames * self.streams;
        self.data.chunks_exact_mut(len)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// One stream as a single-stream spectrogram.
    pub fn stream(&self, s: usize) -> Self {
        assert!(s < self.streams, "stream {s} out of range");
        let mut out = Self::from_fn(self.bins, self.frames, 1, |i, j, _| self.get(i, j, s));
        out.meta = self.meta.clone();
        out
    }

    /// `|value|²` of one stream, laid out bin-major (`bins × frames`).
    pub fn stream_power(&self, s: usize) -> Vec<f64> {
        (0..self.bins * self.frames).map(|ij| self.data[ij * self.streams + s].norm_sqr()).collect()
    }

    /// Mean `|value|²` of one stream over all slots.
    pub fn stream_mean_power(&self, s: usize) -> f64 {
        self.stream_power(s).iter().sum::<f64>() / (self.bins * self.frames) as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.bins, self.frames, self.streams), (other.bins, other.frames, other.streams));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.bins, self.frames, self.streams) == (other.bins, other.frames, other.streams)
    }
}
