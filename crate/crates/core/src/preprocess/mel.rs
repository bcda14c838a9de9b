//! Slaney-style mel filterbank and log-mel conversion.
//!
//! Periodic Hann window, no center padding, power spectra projected onto
//! area-normalized triangular filters, then dB relative to the spectrogram
//! maximum with a floor at [`DB_FLOOR`].

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlannerScalar};

use super::{Chunk, MelConfig, MelSpectrogram, PreprocessError, Result, DB_FLOOR};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;
const AMIN: f64 = 1e-10;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Hz to mel on the Slaney scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        F_SP * mel
    }
}

/// Precomputed window, FFT plan and filter weights for one [`MelConfig`].
pub struct MelFilterbank {
    cfg: MelConfig,
    window: Vec<f64>,
    /// `n_mels` rows of `fft_size / 2 + 1` weights.
    weights: Vec<Vec<f64>>,
    /// Band edges in Hz, `n_mels + 2` points.
    edges: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.fft_size;
        let n_bins = n_fft / 2 + 1;
        let window = (0..n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos())
            .collect();

        let lo = hz_to_mel(cfg.f_min);
        let hi = hz_to_mel(cfg.f_max);
        let n_points = cfg.n_mels + 2;
        let edges: Vec<f64> = (0..n_points)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_points - 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * f64::from(cfg.sample_rate) / n_fft as f64)
            .collect();

        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let norm = 2.0 / (right - left);
                bin_hz
                    .iter()
                    .map(|&f| {
                        let rising = (f - left) / (center - left);
                        let falling = (right - f) / (right - center);
                        rising.min(falling).max(0.0) * norm
                    })
                    .collect()
            })
            .collect();

        let fft = FftPlannerScalar::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            weights,
            edges,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Center frequency of each band in Hz.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.edges[1..self.edges.len() - 1]
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Linear mel power, `n_mels` rows by frame count, row-major.
    pub fn mel_power(&self, samples: &[f32]) -> Vec<f64> {
        let n_fft = self.cfg.fft_size;
        let n_frames = self.cfg.frame_count(samples.len());
        let n_mels = self.cfg.n_mels;
        let mut power = vec![0.0f64; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut spectrum = vec![0.0f64; n_fft / 2 + 1];
        for t in 0..n_frames {
            let frame = &samples[t * self.cfg.hop..t * self.cfg.hop + n_fft];
            for ((c, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *c = Complex::new(f64::from(s) * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in spectrum.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, row) in self.weights.iter().enumerate() {
                power[m * n_frames + t] = row.iter().zip(&spectrum).map(|(w, p)| w * p).sum();
            }
        }
        power
    }

    pub fn compute(&self, chunk: &Chunk) -> Result<MelSpectrogram> {
        if chunk.sample_rate() != self.cfg.sample_rate {
            return Err(PreprocessError::Config(format!(
                "chunk is at {} Hz, filterbank expects {} Hz",
                chunk.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let n_frames = self.cfg.frame_count(chunk.samples().len());
        if n_frames == 0 {
            return Err(PreprocessError::Shape(
                "chunk shorter than one FFT window".into(),
            ));
        }
        let power = self.mel_power(chunk.samples());
        MelSpectrogram::from_values(self.cfg.n_mels, n_frames, power_to_db(&power))
    }
}

/// dB relative to the largest power, floored at [`DB_FLOOR`].
pub fn power_to_db(power: &[f64]) -> Vec<f32> {
    let reference = power.iter().copied().fold(0.0f64, f64::max).max(AMIN);
    let ref_db = 10.0 * reference.log10();
    power
        .iter()
        .map(|&p| {
            let db = 10.0 * p.max(AMIN).log10() - ref_db;
            (db as f32).max(DB_FLOOR)
        })
        .collect()
}

pub fn mel_spectrogram(chunk: &Chunk, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelFilterbank::new(cfg)?.compute(chunk)
}
