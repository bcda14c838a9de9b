//! Recording-level preprocessing: length filtering, silence removal,
//! peak-gated chunking, per-chunk normalization and mel conversion.

mod mel;

use std::collections::VecDeque;

use thiserror::Error;

use crate::audio_io::{self, AudioClip, AudioError};

pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelFilterbank};

/// Zero-energy representation in the dB domain.
pub const DB_FLOOR: f32 = -80.0;

pub const MIN_DURATION_SECS: u32 = 2;
pub const CHUNK_SECS: u32 = 2;
pub const TARGET_SAMPLE_RATE: u32 = 48_000;

pub const ENVELOPE_WINDOW_MS: u32 = 50;
pub const PEAK_WINDOW_MS: u32 = 50;
pub const PEAK_NEIGHBORHOOD_MS: u32 = 500;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid mel configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub fft_size: usize,
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: TARGET_SAMPLE_RATE,
            n_mels: 64,
            fft_size: 512,
            hop: 384,
            f_min: 150.0,
            f_max: 7500.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if self.sample_rate == 0 || self.n_mels == 0 || self.fft_size < 2 || self.hop == 0 {
            return Err(PreprocessError::Config(
                "sample rate, mel count, fft size and hop must be positive".into(),
            ));
        }
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(PreprocessError::Config(format!(
                "need 0 < f_min < f_max <= {nyquist}, got [{}, {}]",
                self.f_min, self.f_max
            )));
        }
        if self.hop > self.fft_size {
            return Err(PreprocessError::Config(format!(
                "hop {} exceeds fft size {}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    /// Frames produced for `len` samples without center padding.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }
}

/// Thresholds for the amplitude heuristics.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Fraction of the recording's peak below which the envelope counts as silence.
    pub silence_ratio: f32,
    /// Factor by which a window must exceed its neighborhood median to count as a peak.
    pub peak_ratio: f64,
    pub max_chunks: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            silence_ratio: 0.2,
            peak_ratio: 1.075,
            max_chunks: 30,
        }
    }
}

/// Log-mel spectrogram, row-major with the mel band as the outer index.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    n_frames: usize,
    values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn from_values(n_mels: usize, n_frames: usize, values: Vec<f32>) -> Result<Self> {
        if n_mels.checked_mul(n_frames) != Some(values.len()) {
            return Err(PreprocessError::Shape(format!(
                "{} values cannot fill {n_mels} x {n_frames}",
                values.len()
            )));
        }
        Ok(Self {
            n_mels,
            n_frames,
            values,
        })
    }

    pub fn filled(n_mels: usize, n_frames: usize, value: f32) -> Self {
        Self {
            n_mels,
            n_frames,
            values: vec![value; n_mels * n_frames],
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn set(&mut self, mel: usize, frame: usize, v: f32) {
        self.values[mel * self.n_frames + frame] = v;
    }

    pub fn row(&self, mel: usize) -> &[f32] {
        &self.values[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    pub fn max_value(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Equality on the raw bit patterns of every value.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Fixed-length two-second segment of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Chunk {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let expected = chunk_len(sample_rate);
        if samples.len() != expected {
            return Err(PreprocessError::Shape(format!(
                "chunk needs {expected} samples at {sample_rate} Hz, got {}",
                samples.len()
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

pub fn chunk_len(sample_rate: u32) -> usize {
    CHUNK_SECS as usize * sample_rate as usize
}

fn window_len(sample_rate: u32, ms: u32) -> usize {
    ((u64::from(sample_rate) * u64::from(ms) + 500) / 1000).max(1) as usize
}

/// Accepts clips of at least two seconds (boundary inclusive).
pub fn length_filter(clip: &AudioClip) -> bool {
    clip.len() as u64 >= u64::from(MIN_DURATION_SECS) * u64::from(clip.sample_rate())
}

/// Centered sliding maximum of `|s|` over `window` samples.
///
/// Sample `i` sees `[i - window/2, i - window/2 + window - 1]`, clipped to the signal.
pub fn sliding_max_envelope(samples: &[f32], window: usize) -> Vec<f32> {
    let n = samples.len();
    let window = window.max(1);
    let before = window / 2;
    let after = window - 1 - before;
    let mut out = Vec::with_capacity(n);
    // indices with strictly decreasing |s|
    let mut deque: VecDeque<usize> = VecDeque::new();
    let mut next = 0usize;
    for i in 0..n {
        let hi = (i + after).min(n - 1);
        while next <= hi {
            let v = samples[next].abs();
            while deque.back().is_some_and(|&j| samples[j].abs() <= v) {
                deque.pop_back();
            }
            deque.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(before);
        while deque.front().is_some_and(|&j| j < lo) {
            deque.pop_front();
        }
        out.push(samples[*deque.front().expect("window is never empty")].abs());
    }
    out
}

/// Drops every sample whose 50 ms envelope falls below `ratio` times the
/// clip's peak and concatenates what is left.
pub fn remove_silence(clip: &AudioClip, ratio: f32) -> AudioClip {
    let peak = clip.peak();
    if clip.is_empty() || peak == 0.0 {
        return AudioClip::empty(clip.sample_rate());
    }
    let threshold = ratio * peak;
    let envelope = sliding_max_envelope(
        clip.samples(),
        window_len(clip.sample_rate(), ENVELOPE_WINDOW_MS),
    );
    let kept = clip
        .samples()
        .iter()
        .zip(&envelope)
        .filter(|(_, &e)| e >= threshold)
        .map(|(&s, _)| s)
        .collect();
    AudioClip::new(kept, clip.sample_rate()).expect("sample rate already validated")
}

/// Peak test on 50 ms windows against the median of neighbouring window
/// maxima within ±500 ms.
pub fn has_peak(chunk: &Chunk, ratio: f64) -> bool {
    peak_test(chunk.samples(), chunk.sample_rate(), ratio)
}

fn peak_test(samples: &[f32], sample_rate: u32, ratio: f64) -> bool {
    let wl = window_len(sample_rate, PEAK_WINDOW_MS);
    let radius = (PEAK_NEIGHBORHOOD_MS / PEAK_WINDOW_MS) as usize;
    let maxima: Vec<f32> = samples
        .chunks(wl)
        .map(|w| w.iter().fold(0.0f32, |m, s| m.max(s.abs())))
        .collect();
    let mut neighbours = Vec::with_capacity(2 * radius);
    for (i, &m) in maxima.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        neighbours.clear();
        let lo = i.saturating_sub(radius);
        let hi = (i + radius).min(maxima.len() - 1);
        neighbours.extend((lo..=hi).filter(|&j| j != i).map(|j| maxima[j]));
        if neighbours.is_empty() {
            continue;
        }
        neighbours.sort_by(f32::total_cmp);
        let k = neighbours.len();
        let median = if k % 2 == 1 {
            f64::from(neighbours[k / 2])
        } else {
            (f64::from(neighbours[k / 2 - 1]) + f64::from(neighbours[k / 2])) / 2.0
        };
        if f64::from(m) >= ratio * median {
            return true;
        }
    }
    false
}

/// Result of sequential chunking: peaked chunks (capped) and rejected ones.
#[derive(Debug, Clone, Default)]
pub struct ChunkSplit {
    pub kept: Vec<Chunk>,
    pub rejected: Vec<Chunk>,
}

/// Splits into non-overlapping two-second windows, dropping the trailing
/// remainder. Scanning stops once `max_chunks` peaked chunks were found, so
/// `rejected` only holds windows seen before that point.
pub fn partition_chunks(clip: &AudioClip, cfg: &PreprocessConfig) -> ChunkSplit {
    let len = chunk_len(clip.sample_rate());
    let mut split = ChunkSplit::default();
    for window in clip.samples().chunks_exact(len) {
        if split.kept.len() >= cfg.max_chunks {
            break;
        }
        let chunk = Chunk {
            samples: window.to_vec(),
            sample_rate: clip.sample_rate(),
        };
        if has_peak(&chunk, cfg.peak_ratio) {
            split.kept.push(chunk);
        } else {
            split.rejected.push(chunk);
        }
    }
    split
}

pub fn split_chunks(clip: &AudioClip, cfg: &PreprocessConfig) -> Vec<Chunk> {
    partition_chunks(clip, cfg).kept
}

/// Scales the chunk so that its largest absolute sample is exactly 1.
pub fn normalize(chunk: &Chunk) -> Result<Chunk> {
    let peak = chunk.peak();
    if peak == 0.0 {
        return Err(PreprocessError::DegenerateInput(
            "cannot normalize an all-zero chunk".into(),
        ));
    }
    Ok(Chunk {
        samples: chunk.samples.iter().map(|s| s / peak).collect(),
        sample_rate: chunk.sample_rate,
    })
}

#[derive(Debug, Clone, Default)]
pub struct Preprocessed {
    pub spectrograms: Vec<MelSpectrogram>,
    /// Chunks rejected by the peak test, unnormalized.
    pub noise: Vec<Chunk>,
}

/// Full recording pipeline: length filter, silence removal, resampling to
/// the mel sample rate, chunking, normalization and mel conversion.
pub fn preprocess_recording(
    clip: &AudioClip,
    mel_cfg: &MelConfig,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed> {
    mel_cfg.validate()?;
    if !length_filter(clip) {
        return Ok(Preprocessed::default());
    }
    let voiced = remove_silence(clip, cfg.silence_ratio);
    if voiced.is_empty() {
        return Ok(Preprocessed::default());
    }
    let resampled = audio_io::resample(&voiced, mel_cfg.sample_rate)?;
    let split = partition_chunks(&resampled, cfg);
    let filterbank = MelFilterbank::new(mel_cfg)?;
    let spectrograms = split
        .kept
        .iter()
        .map(|c| normalize(c).and_then(|c| filterbank.compute(&c)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Preprocessed {
        spectrograms,
        noise: split.rejected,
    })
}
