//! WAV decoding, resampling and the `MELS` spectrogram container.
//!
//! The decoder understands RIFF/WAVE files carrying 16-bit integer PCM or
//! 32-bit IEEE float samples with one or two channels (including the
//! `WAVE_FORMAT_EXTENSIBLE` wrapper around those two encodings). Stereo is
//! folded to mono by averaging.
//!
//! The `MELS` format is little-endian: the magic `MELS`, `u32` mel count,
//! `u32` frame count, then `n_mels * n_frames` `f32` values with the mel index
//! as the outer dimension.

use std::io::{Read, Write};

use thiserror::Error;

use crate::preprocess::MelSpectrogram;

pub const MELS_MAGIC: &[u8; 4] = b"MELS";

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_IEEE_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed input: {0}")]
    Format(String),
    #[error("unsupported encoding: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono PCM audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, clamping samples into `[-1, 1]`. NaN samples become 0.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn empty(sample_rate: u32) -> Self {
        Self {
            samples: Vec::new(),
            sample_rate: sample_rate.max(1),
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    block_align: u16,
    bits: u16,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return Err(AudioError::Format("fmt chunk shorter than 16 bytes".into()));
    }
    let mut format = read_u16(body, 0);
    let channels = read_u16(body, 2);
    let sample_rate = read_u32(body, 4);
    let block_align = read_u16(body, 12);
    let bits = read_u16(body, 14);
    if format == FORMAT_EXTENSIBLE {
        // cbSize(2) validBits(2) channelMask(4) then the sub-format GUID whose
        // first two bytes carry the real format tag.
        if body.len() < 40 {
            return Err(AudioError::Format(
                "truncated WAVE_FORMAT_EXTENSIBLE header".into(),
            ));
        }
        format = read_u16(body, 24);
    }
    Ok(FmtChunk {
        format,
        channels,
        sample_rate,
        block_align,
        bits,
    })
}

/// Decodes a RIFF/WAVE byte stream into a mono clip.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::Format("missing RIFF/WAVE header".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let start = pos + 8;
        // Some writers leave the data size at 0 or 0xFFFFFFFF when streaming;
        // accept a data chunk that runs to the end of the buffer.
        let end = match start.checked_add(size) {
            Some(end) if end <= bytes.len() => end,
            _ if id == b"data" => bytes.len(),
            _ => return Err(AudioError::Format("chunk extends past end of file".into())),
        };
        let body = &bytes[start..end];
        match id {
            b"fmt " => fmt = Some(parse_fmt(body)?),
            b"data" => data = Some(body),
            _ => {}
        }
        if data.is_some() && fmt.is_some() {
            break;
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| AudioError::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::Format("no data chunk".into()))?;

    if fmt.channels == 0 || fmt.channels > 2 {
        return Err(AudioError::Unsupported(format!(
            "{} channels",
            fmt.channels
        )));
    }
    if fmt.sample_rate == 0 {
        return Err(AudioError::Format("sample rate of 0".into()));
    }
    let bytes_per_sample = match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) => 2usize,
        (FORMAT_IEEE_FLOAT, 32) => 4usize,
        (FORMAT_PCM, b) | (FORMAT_IEEE_FLOAT, b) => {
            return Err(AudioError::Unsupported(format!(
                "format tag {:#06x} with {b} bits per sample",
                fmt.format
            )))
        }
        (tag, _) => return Err(AudioError::Unsupported(format!("format tag {tag:#06x}"))),
    };
    let channels = usize::from(fmt.channels);
    let frame_bytes = bytes_per_sample * channels;
    if usize::from(fmt.block_align) != frame_bytes {
        return Err(AudioError::Format(format!(
            "block align {} does not match {} channel(s) of {} bytes",
            fmt.block_align, channels, bytes_per_sample
        )));
    }

    let decode_one = |b: &[u8]| -> f32 {
        if bytes_per_sample == 2 {
            f32::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0
        } else {
            f32::from_le_bytes([b[0], b[1], b[2], b[3]])
        }
    };
    let samples = data
        .chunks_exact(frame_bytes)
        .map(|frame| {
            if channels == 1 {
                decode_one(frame)
            } else {
                let l = decode_one(&frame[..bytes_per_sample]);
                let r = decode_one(&frame[bytes_per_sample..]);
                (l + r) * 0.5
            }
        })
        .collect();
    AudioClip::new(samples, fmt.sample_rate)
}

/// Encodes a clip as a mono 16-bit PCM WAV file.
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let data_len = clip.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in clip.samples() {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

/// Linear-interpolation resampler.
///
/// Output length is `round(len * target / source)`. Output sample `i` reads the
/// input at position `i * source / target`, clamped to the last input sample.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(AudioError::InvalidArgument(
            "target rate must be positive".into(),
        ));
    }
    if clip.is_empty() {
        return Err(AudioError::InvalidArgument(
            "cannot resample an empty clip".into(),
        ));
    }
    let source_rate = clip.sample_rate();
    if source_rate == target_rate {
        return Ok(clip.clone());
    }
    let input = clip.samples();
    let out_len =
        (input.len() as f64 * f64::from(target_rate) / f64::from(source_rate)).round() as usize;
    let step = f64::from(source_rate) / f64::from(target_rate);
    let last = input.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let idx = (pos.floor() as usize).min(last);
            let next = (idx + 1).min(last);
            let frac = (pos - idx as f64).clamp(0.0, 1.0) as f32;
            let (a, b) = (input[idx], input[next]);
            a + (b - a) * frac
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

/// Serializes a spectrogram in the `MELS` format. Non-finite values are rejected.
pub fn write_spectrogram<W: Write>(spec: &MelSpectrogram, mut sink: W) -> Result<()> {
    if spec.values().iter().any(|v| !v.is_finite()) {
        return Err(AudioError::InvalidArgument(
            "spectrogram contains non-finite values".into(),
        ));
    }
    let mut buf = Vec::with_capacity(12 + spec.values().len() * 4);
    buf.extend_from_slice(MELS_MAGIC);
    buf.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_frames() as u32).to_le_bytes());
    for v in spec.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn spectrogram_to_bytes(spec: &MelSpectrogram) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_spectrogram(spec, &mut out)?;
    Ok(out)
}

pub fn read_spectrogram<R: Read>(mut source: R) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    spectrogram_from_bytes(&bytes)
}

pub fn spectrogram_from_bytes(bytes: &[u8]) -> Result<MelSpectrogram> {
    if bytes.len() < 12 {
        return Err(AudioError::Format("truncated MELS header".into()));
    }
    if &bytes[0..4] != MELS_MAGIC {
        return Err(AudioError::Format("bad magic, expected MELS".into()));
    }
    let n_mels = read_u32(bytes, 4) as usize;
    let n_frames = read_u32(bytes, 8) as usize;
    let expected = n_mels
        .checked_mul(n_frames)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| AudioError::Format("MELS dimensions overflow".into()))?;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(AudioError::Format(format!(
            "MELS payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    MelSpectrogram::from_values(n_mels, n_frames, values)
        .map_err(|e| AudioError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_header(format: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let block = channels * bits / 8;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&((36 + data.len()) as u32).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * u32::from(block)).to_le_bytes());
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn pcm16_full_scale() {
        let wav = wav_header(1, 1, 48000, 16, &32767i16.to_le_bytes());
        let clip = decode_wav(&wav).unwrap();
        assert!((clip.samples()[0] - 0.99997).abs() < 1e-5);
        assert_eq!(clip.sample_rate(), 48000);
    }

    #[test]
    fn stereo_is_averaged() {
        let mut data = Vec::new();
        data.extend_from_slice(&0.5f32.to_le_bytes());
        data.extend_from_slice(&(-0.5f32).to_le_bytes());
        let clip = decode_wav(&wav_header(3, 2, 44100, 32, &data)).unwrap();
        assert_eq!(clip.samples(), &[0.0]);
    }

    #[test]
    fn float_samples_are_clamped() {
        let data = 1.5f32.to_le_bytes();
        let clip = decode_wav(&wav_header(3, 1, 8000, 32, &data)).unwrap();
        assert_eq!(clip.samples(), &[1.0]);
    }

    #[test]
    fn mu_law_is_unsupported() {
        let wav = wav_header(7, 1, 8000, 8, &[0u8; 4]);
        assert!(matches!(decode_wav(&wav), Err(AudioError::Unsupported(_))));
    }

    #[test]
    fn garbage_is_format_error() {
        assert!(matches!(
            decode_wav(b"RIFX1234WAVE"),
            Err(AudioError::Format(_))
        ));
        assert!(matches!(decode_wav(&[]), Err(AudioError::Format(_))));
        let mut wav = wav_header(1, 1, 48000, 16, &[0, 0]);
        wav.truncate(30);
        assert!(matches!(decode_wav(&wav), Err(AudioError::Format(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut wav = wav_header(1, 1, 16000, 16, &1000i16.to_le_bytes());
        // splice a LIST chunk with odd length (padded) before fmt
        let list = [b'L', b'I', b'S', b'T', 3, 0, 0, 0, 1, 2, 3, 0];
        wav.splice(12..12, list);
        let clip = decode_wav(&wav).unwrap();
        assert_eq!(clip.len(), 1);
    }

    #[test]
    fn resample_identity_and_length() {
        let clip = AudioClip::new(vec![0.1, 0.2, -0.3], 48000).unwrap();
        assert_eq!(resample(&clip, 48000).unwrap(), clip);

        let second = AudioClip::new(vec![0.0; 44100], 44100).unwrap();
        assert_eq!(resample(&second, 48000).unwrap().len(), 48000);
    }

    #[test]
    fn resample_preserves_dc() {
        let clip = AudioClip::new(vec![0.7; 1234], 22050).unwrap();
        let out = resample(&clip, 48000).unwrap();
        assert!(out.samples().iter().all(|&s| s == 0.7));
        assert_eq!(out.sample_rate(), 48000);
    }

    #[test]
    fn resample_rejects_empty() {
        assert!(resample(&AudioClip::empty(8000), 48000).is_err());
    }

    #[test]
    fn zero_spectrogram_roundtrip() {
        let spec = MelSpectrogram::from_values(64, 249, vec![0.0; 64 * 249]).unwrap();
        let bytes = spectrogram_to_bytes(&spec).unwrap();
        assert_eq!(bytes.len(), 12 + 64 * 249 * 4);
        assert_eq!(read_spectrogram(bytes.as_slice()).unwrap(), spec);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let spec = MelSpectrogram::from_values(2, 2, vec![-1.0; 4]).unwrap();
        let mut bytes = spectrogram_to_bytes(&spec).unwrap();
        bytes.pop();
        assert!(matches!(
            spectrogram_from_bytes(&bytes),
            Err(AudioError::Format(_))
        ));
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            spectrogram_from_bytes(&bytes),
            Err(AudioError::Format(_))
        ));
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let spec = MelSpectrogram::from_values(1, 2, vec![0.0, f32::NAN]).unwrap();
        assert!(spectrogram_to_bytes(&spec).is_err());
    }
}
