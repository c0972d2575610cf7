//! RIFF/WAVE reading and writing for 1–8 channel PCM and IEEE float files.
//!
//! Integer samples map to `[-1, 1)` by dividing by `2^(bits-1)`. Writing
//! integer formats clips to the representable range and logs how many
//! samples were clipped; float formats are written unchanged.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_CHANNELS: usize = 8;

const TAG_PCM: u16 = 1;
const TAG_FLOAT: u16 = 3;
const TAG_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleFormat {
    Int16,
    Int24,
    Int32,
    Float32,
    Float64,
}

impl SampleFormat {
    pub fn bits(self) -> u16 {
        match self {
            SampleFormat::Int16 => 16,
            SampleFormat::Int24 => 24,
            SampleFormat::Int32 | SampleFormat::Float32 => 32,
            SampleFormat::Float64 => 64,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, SampleFormat::Float32 | SampleFormat::Float64)
    }

    fn bytes(self) -> usize {
        usize::from(self.bits() / 8)
    }

    fn from_tag(tag: u16, bits: u16) -> Result<Self> {
        match (tag, bits) {
            (TAG_PCM, 16) => Ok(SampleFormat::Int16),
            (TAG_PCM, 24) => Ok(SampleFormat::Int24),
            (TAG_PCM, 32) => Ok(SampleFormat::Int32),
            (TAG_FLOAT, 32) => Ok(SampleFormat::Float32),
            (TAG_FLOAT, 64) => Ok(SampleFormat::Float64),
            _ => Err(Error::UnsupportedFormat(format!("format tag {tag} with {bits} bits per sample"))),
        }
    }
}

/// Deinterleaved audio.
#[derive(Clone, Debug, PartialEq)]
pub struct WavData {
    pub sample_rate: u32,
    pub format: SampleFormat,
    /// One buffer per channel, all of equal length.
    pub channels: Vec<Vec<f64>>,
}

impl WavData {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptHeader(msg.into())
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Fmt {
    format: SampleFormat,
    channels: usize,
    sample_rate: u32,
}

fn parse_fmt(body: &[u8]) -> Result<Fmt> {
    if body.len() < 16 {
        return Err(corrupt("fmt chunk shorter than 16 bytes"));
    }
    let mut tag = u16_at(body, 0);
    let channels = usize::from(u16_at(body, 2));
    let sample_rate = u32_at(body, 4);
    let block_align = usize::from(u16_at(body, 12));
    let bits = u16_at(body, 14);
    if tag == TAG_EXTENSIBLE {
        if body.len() < 40 {
            return Err(corrupt("extensible fmt chunk shorter than 40 bytes"));
        }
        tag = u16_at(body, 24);
    }
    let format = SampleFormat::from_tag(tag, bits)?;
    if channels == 0 || channels > MAX_CHANNELS {
        return Err(Error::UnsupportedFormat(format!("{channels} channels (supported: 1..={MAX_CHANNELS})")));
    }
    if sample_rate == 0 {
        return Err(corrupt("sample rate is zero"));
    }
    if block_align != channels * format.bytes() {
        return Err(corrupt(format!("block align {block_align} does not match {channels} x {bits} bits")));
    }
    Ok(Fmt { format, channels, sample_rate })
}

fn decode(bytes: &[u8], format: SampleFormat) -> f64 {
    match format {
        SampleFormat::Int16 => f64::from(i16::from_le_bytes([bytes[0], bytes[1]])) / 32768.0,
        SampleFormat::Int24 => {
            let v = i32::from_le_bytes([0, bytes[0], bytes[1], bytes[2]]) >> 8;
            f64::from(v) / 8_388_608.0
        }
        SampleFormat::Int32 => f64::from(i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])) / 2_147_483_648.0,
        SampleFormat::Float32 => f64::from(f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])),
        SampleFormat::Float64 => f64::from_le_bytes(bytes[..8].try_into().expect("eight bytes")),
    }
}

/// Parses a complete WAVE file image.
pub fn parse_wav(bytes: &[u8]) -> Result<WavData> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(corrupt("missing RIFF/WAVE signature"));
    }
    let mut fmt = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = end.ok_or_else(|| corrupt("fmt chunk runs past end of file"))?;
                fmt = Some(parse_fmt(&bytes[start..end])?);
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| corrupt("data chunk before fmt chunk"))?;
                let end = end.ok_or_else(|| corrupt("data chunk runs past end of file"))?;
                let width = fmt.format.bytes();
                let frame = width * fmt.channels;
                if !size.is_multiple_of(frame) {
                    return Err(corrupt(format!("data size {size} is not a multiple of the {frame}-byte frame")));
                }
                let frames = size / frame;
                let mut channels = vec![Vec::with_capacity(frames); fmt.channels];
                for chunk in bytes[start..end].chunks_exact(frame) {
                    for (c, sample) in chunk.chunks_exact(width).enumerate() {
                        channels[c].push(decode(sample, fmt.format));
                    }
                }
                return Ok(WavData { sample_rate: fmt.sample_rate, format: fmt.format, channels });
            }
            _ => {}
        }
        pos = start.saturating_add(size).saturating_add(size & 1);
    }
    Err(corrupt(if fmt.is_some() { "no data chunk" } else { "no fmt chunk" }))
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_wav(&bytes)
}

/// Encodes samples; returns the bytes and the number of clipped samples.
pub fn encode_wav(channels: &[Vec<f64>], sample_rate: u32, format: SampleFormat) -> Result<(Vec<u8>, usize)> {
    let num_channels = channels.len();
    if num_channels == 0 || num_channels > MAX_CHANNELS {
        return Err(Error::UnsupportedFormat(format!("{num_channels} channels (supported: 1..={MAX_CHANNELS})")));
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return Err(Error::ShapeMismatch("channels differ in length".into()));
    }
    if channels.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("cannot write non-finite samples".into()));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidConfig("sample rate must be positive".into()));
    }

    let width = format.bytes();
    let block_align = num_channels * width;
    let data_len = block_align * len;
    let data_len_u32 = u32::try_from(data_len).map_err(|_| Error::InvalidConfig("audio too long for WAVE".into()))?;
    let float = format.is_float();
    let fmt_len: u32 = if float { 18 } else { 16 };
    let fact_len: u32 = if float { 12 } else { 0 };
    let riff_len = 4 + (8 + fmt_len) + fact_len + 8 + data_len_u32 + (data_len_u32 & 1);

    let mut out = Vec::with_capacity(riff_len as usize + 8);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_len.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&fmt_len.to_le_bytes());
    out.extend_from_slice(&(if float { TAG_FLOAT } else { TAG_PCM }).to_le_bytes());
    out.extend_from_slice(&(num_channels as u16).to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&format.bits().to_le_bytes());
    if float {
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(b"fact");
        out.extend_from_slice(&4u32.to_le_bytes());
        out.extend_from_slice(&(len as u32).to_le_bytes());
    }
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len_u32.to_le_bytes());

    let mut clipped = 0;
    let mut quantize = |v: f64, full_scale: f64| -> i64 {
        let scaled = (v * full_scale).round();
        let (lo, hi) = (-full_scale, full_scale - 1.0);
        if scaled < lo || scaled > hi {
            clipped += usize::from(v.abs() > 1.0);
        }
        scaled.clamp(lo, hi) as i64
    };
    for t in 0..len {
        for c in channels {
            let v = c[t];
            match format {
                SampleFormat::Int16 => out.extend_from_slice(&(quantize(v, 32768.0) as i16).to_le_bytes()),
                SampleFormat::Int24 => out.extend_from_slice(&(quantize(v, 8_388_608.0) as i32).to_le_bytes()[..3]),
                SampleFormat::Int32 => out.extend_from_slice(&(quantize(v, 2_147_483_648.0) as i32).to_le_bytes()),
                SampleFormat::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                SampleFormat::Float64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    if data_len % 2 == 1 {
        out.push(0);
    }
    Ok((out, clipped))
}

/// Writes a WAVE file and returns the number of clipped samples.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32, format: SampleFormat) -> Result<usize> {
    let (bytes, clipped) = encode_wav(channels, sample_rate, format)?;
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} samples outside [-1, 1]", path.display());
    }
    fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(len: usize) -> Vec<f64> {
        (0..len).map(|t| if (t / 4) % 2 == 0 { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn full_scale_square_wave_in_16_bit() {
        let (bytes, clipped) = encode_wav(&[square(16)], 8000, SampleFormat::Int16).unwrap();
        // +1.0 is one step above the largest code and is clamped without being counted as clipped.
        assert_eq!(clipped, 0);
        let back = parse_wav(&bytes).unwrap();
        for &v in &back.channels[0] {
            assert!(v == 32767.0 / 32768.0 || v == -1.0, "{v}");
        }
    }

    #[test]
    fn float64_round_trip_is_bitwise() {
        let a: Vec<f64> = (0..100).map(|t| (t as f64 * 0.37).sin() * 1.7).collect();
        let b: Vec<f64> = (0..100).map(|t| 1e-300 * t as f64).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let clipped = write_wav(&path, &[a.clone(), b.clone()], 44100, SampleFormat::Float64).unwrap();
        assert_eq!(clipped, 0);
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 44100);
        assert_eq!(back.format, SampleFormat::Float64);
        assert_eq!(back.channels, vec![a, b]);
    }

    #[test]
    fn integer_round_trips_within_one_step() {
        let sig: Vec<f64> = (0..64).map(|t| (t as f64 * 0.2).sin() * 0.9).collect();
        for (format, step) in [
            (SampleFormat::Int16, 1.0 / 32768.0),
            (SampleFormat::Int24, 1.0 / 8_388_608.0),
            (SampleFormat::Int32, 1.0 / 2_147_483_648.0),
            (SampleFormat::Float32, 1e-7),
        ] {
            let (bytes, _) = encode_wav(&[sig.clone()], 16000, format).unwrap();
            let back = parse_wav(&bytes).unwrap();
            assert_eq!(back.format, format);
            for (x, y) in sig.iter().zip(&back.channels[0]) {
                assert!((x - y).abs() <= step, "{format:?}");
            }
        }
    }

    #[test]
    fn negative_24_bit_samples_sign_extend() {
        let (bytes, _) = encode_wav(&[vec![-0.5, -1.0 / 8_388_608.0]], 8000, SampleFormat::Int24).unwrap();
        assert_eq!(parse_wav(&bytes).unwrap().channels[0], vec![-0.5, -1.0 / 8_388_608.0]);
    }

    #[test]
    fn clipping_is_counted() {
        let (bytes, clipped) = encode_wav(&[vec![1.5, -2.0, 0.25, 1.0]], 8000, SampleFormat::Int16).unwrap();
        assert_eq!(clipped, 2);
        let back = parse_wav(&bytes).unwrap().channels.remove(0);
        assert_eq!(back, vec![32767.0 / 32768.0, -1.0, 0.25, 32767.0 / 32768.0]);
        let (_, clipped) = encode_wav(&[vec![1.5]], 8000, SampleFormat::Float32).unwrap();
        assert_eq!(clipped, 0);
    }

    #[test]
    fn channel_count_detection() {
        for n in [1, 2, 5, 8] {
            let chans: Vec<Vec<f64>> = (0..n).map(|c| vec![c as f64 / 10.0; 7]).collect();
            let (bytes, _) = encode_wav(&chans, 22050, SampleFormat::Int16).unwrap();
            let back = parse_wav(&bytes).unwrap();
            assert_eq!(back.num_channels(), n);
            assert_eq!(back.len(), 7);
        }
        assert!(encode_wav(&vec![vec![0.0]; 9], 8000, SampleFormat::Int16).is_err());
    }

    #[test]
    fn header_fields_at_fixed_offsets() {
        // Canonical 44-byte PCM header, read field by field.
        let (b, _) = encode_wav(&[vec![0.0; 3], vec![0.0; 3]], 48000, SampleFormat::Int16).unwrap();
        let le16 = |at: usize| u16::from_le_bytes([b[at], b[at + 1]]) as u32;
        let le32 = |at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        assert_eq!(&b[0..4], b"RIFF");
        assert_eq!(le32(4) as usize, b.len() - 8);
        assert_eq!(&b[8..16], b"WAVEfmt ");
        assert_eq!(le32(16), 16);
        assert_eq!(le16(20), 1);
        assert_eq!(le16(22), 2);
        assert_eq!(le32(24), 48000);
        assert_eq!(le32(28), 48000 * 4);
        assert_eq!(le16(32), 4);
        assert_eq!(le16(34), 16);
        assert_eq!(&b[36..40], b"data");
        assert_eq!(le32(40), 12);
        assert_eq!(b.len(), 56);
    }

    #[test]
    fn odd_data_chunks_are_padded_and_skipped() {
        let (b, _) = encode_wav(&[vec![0.1; 3]], 8000, SampleFormat::Int24).unwrap();
        assert_eq!(b.len() % 2, 0);
        // An unknown chunk with odd size before fmt must be skipped with its pad byte.
        let mut with_list = b[..12].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&b[12..]);
        assert_eq!(parse_wav(&with_list).unwrap().channels[0].len(), 3);
    }

    #[test]
    fn extensible_format_is_accepted() {
        let (b, _) = encode_wav(&[vec![0.5, -0.25]], 8000, SampleFormat::Int16).unwrap();
        let mut ext = b[..12].to_vec();
        ext.extend_from_slice(b"fmt ");
        ext.extend_from_slice(&40u32.to_le_bytes());
        ext.extend_from_slice(&TAG_EXTENSIBLE.to_le_bytes());
        ext.extend_from_slice(&b[22..36]);
        ext.extend_from_slice(&22u16.to_le_bytes());
        ext.extend_from_slice(&16u16.to_le_bytes());
        ext.extend_from_slice(&4u32.to_le_bytes());
        ext.extend_from_slice(&TAG_PCM.to_le_bytes());
        ext.extend_from_slice(&[0; 14]);
        ext.extend_from_slice(&b[36..]);
        assert_eq!(parse_wav(&ext).unwrap().channels[0], vec![0.5, -0.25]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(matches!(parse_wav(b"RIFX0000WAVE"), Err(Error::CorruptHeader(_))));
        let (good, _) = encode_wav(&[vec![0.0; 4]], 8000, SampleFormat::Int16).unwrap();
        assert!(matches!(parse_wav(&good[..good.len() - 2]), Err(Error::CorruptHeader(_))));
        assert!(matches!(parse_wav(&good[..36]), Err(Error::CorruptHeader(_))));

        let mut eight_bit = good.clone();
        eight_bit[34] = 8;
        eight_bit[32] = 1;
        assert!(matches!(parse_wav(&eight_bit), Err(Error::UnsupportedFormat(_))));

        let mut alaw = good.clone();
        alaw[20] = 6;
        assert!(matches!(parse_wav(&alaw), Err(Error::UnsupportedFormat(_))));

        let mut bad_align = good;
        bad_align[32] = 3;
        assert!(matches!(parse_wav(&bad_align), Err(Error::CorruptHeader(_))));
        assert!(matches!(read_wav(Path::new("/nonexistent/x.wav")), Err(Error::Io { .. })));
    }
}
