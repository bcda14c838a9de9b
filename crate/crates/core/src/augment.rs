//! Stochastic mel-spectrogram augmentation.
//!
//! Four transforms (frequency roll, time roll, time warp, noise addition) and
//! a scheduler that selects each one independently with probability
//! `p_apply`, caps the selection at `max_augs` by discarding a uniform subset,
//! and applies the survivors in uniformly random order.
//!
//! Randomness comes from ChaCha8 seeded with the run seed; chunk `i` draws
//! from stream `i` of that seed (see [`chunk_rng`]), so results do not depend
//! on how chunks are distributed over worker threads.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::preprocess::{MelSpectrogram, DB_FLOOR};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_apply: f64,
    pub max_augs: usize,
    /// Frequency roll fraction is drawn from `[-freq_roll_range, freq_roll_range]`.
    pub freq_roll_range: f64,
    /// Time roll fraction is drawn from `[-time_roll_range, time_roll_range]`.
    pub time_roll_range: f64,
    pub noise_alpha_min: f64,
    pub noise_alpha_max: f64,
    /// Maximum time-warp displacement in frames.
    pub warp_param: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_apply: 0.5,
            max_augs: 3,
            freq_roll_range: 0.05,
            time_roll_range: 0.25,
            noise_alpha_min: 0.2,
            noise_alpha_max: 0.8,
            warp_param: 12,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_apply) {
            return Err(AugmentError::Parameter(format!(
                "p_apply {} not in [0, 1]",
                self.p_apply
            )));
        }
        if !(self.freq_roll_range >= 0.0 && self.time_roll_range >= 0.0) {
            return Err(AugmentError::Parameter(
                "roll ranges must be non-negative".into(),
            ));
        }
        if !(0.0 <= self.noise_alpha_min && self.noise_alpha_min <= self.noise_alpha_max) {
            return Err(AugmentError::Parameter("noise alpha range is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    FreqRoll,
    TimeRoll,
    TimeWarp,
    Noise,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::FreqRoll,
        AugmentKind::TimeRoll,
        AugmentKind::TimeWarp,
        AugmentKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::FreqRoll => "freq_roll",
            AugmentKind::TimeRoll => "time_roll",
            AugmentKind::TimeWarp => "time_warp",
            AugmentKind::Noise => "noise",
        }
    }
}

/// One augmentation as actually applied, with its drawn parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    FreqRoll {
        fraction: f64,
        bins: i64,
    },
    TimeRoll {
        fraction: f64,
        frames: i64,
    },
    TimeWarp {
        center: usize,
        shift: i64,
    },
    Noise {
        pool_index: usize,
        alpha: f64,
    },
    /// Noise was selected but the pool was empty.
    NoiseSkipped,
}

impl Applied {
    pub fn kind(&self) -> AugmentKind {
        match self {
            Applied::FreqRoll { .. } => AugmentKind::FreqRoll,
            Applied::TimeRoll { .. } => AugmentKind::TimeRoll,
            Applied::TimeWarp { .. } => AugmentKind::TimeWarp,
            Applied::Noise { .. } | Applied::NoiseSkipped => AugmentKind::Noise,
        }
    }
}

impl fmt::Display for Applied {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Applied::FreqRoll { fraction, bins } => {
                write!(f, "freq_roll(u={fraction:.6},bins={bins})")
            }
            Applied::TimeRoll { fraction, frames } => {
                write!(f, "time_roll(u={fraction:.6},frames={frames})")
            }
            Applied::TimeWarp { center, shift } => {
                write!(f, "time_warp(center={center},w={shift})")
            }
            Applied::Noise { pool_index, alpha } => {
                write!(f, "noise(pool={pool_index},alpha={alpha:.6})")
            }
            Applied::NoiseSkipped => write!(f, "noise(skipped:empty_pool)"),
        }
    }
}

/// Rng for chunk `chunk_index` of a run seeded with `seed`.
pub fn chunk_rng(seed: u64, chunk_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk_index);
    rng
}

fn shift_amount(fraction: f64, extent: usize) -> i64 {
    (fraction * extent as f64).round() as i64
}

/// Shifts mel rows by `round(fraction * n_mels)` bins. Positive moves energy
/// toward higher bands; vacated rows hold [`DB_FLOOR`].
pub fn freq_roll(spec: &MelSpectrogram, fraction: f64) -> MelSpectrogram {
    let k = shift_amount(fraction, spec.n_mels());
    roll_rows(spec, k)
}

fn roll_rows(spec: &MelSpectrogram, k: i64) -> MelSpectrogram {
    let (n_mels, n_frames) = spec.shape();
    let mut out = MelSpectrogram::filled(n_mels, n_frames, DB_FLOOR);
    for m in 0..n_mels {
        let src = m as i64 - k;
        if (0..n_mels as i64).contains(&src) {
            let row = spec.row(src as usize);
            out.values_mut()[m * n_frames..(m + 1) * n_frames].copy_from_slice(row);
        }
    }
    out
}

/// Shifts frames by `round(fraction * n_frames)`. Positive moves content
/// later in time; vacated columns hold [`DB_FLOOR`].
pub fn time_roll(spec: &MelSpectrogram, fraction: f64) -> MelSpectrogram {
    let k = shift_amount(fraction, spec.n_frames());
    roll_columns(spec, k)
}

fn roll_columns(spec: &MelSpectrogram, k: i64) -> MelSpectrogram {
    let (n_mels, n_frames) = spec.shape();
    let mut out = MelSpectrogram::filled(n_mels, n_frames, DB_FLOOR);
    let n = n_frames as i64;
    if k.abs() >= n {
        return out;
    }
    let len = (n - k.abs()) as usize;
    let (src, dst) = if k >= 0 {
        (0, k as usize)
    } else {
        ((-k) as usize, 0)
    };
    for m in 0..n_mels {
        let row = &spec.row(m)[src..src + len];
        out.values_mut()[m * n_frames + dst..m * n_frames + dst + len].copy_from_slice(row);
    }
    out
}

/// Piecewise-linear time warp moving column `center` to `center + shift`.
///
/// Output column `t` samples the input at a position that maps
/// `[0, center + shift]` onto `[0, center]` and
/// `[center + shift, n - 1]` onto `[center, n - 1]`, interpolating linearly
/// between neighbouring columns.
pub fn time_warp(spec: &MelSpectrogram, center: usize, shift: i64) -> Result<MelSpectrogram> {
    let n = spec.n_frames();
    if shift == 0 {
        return Ok(spec.clone());
    }
    let target = center as i64 + shift;
    if center == 0 || center + 1 >= n || target <= 0 || target + 1 >= n as i64 {
        return Err(AugmentError::Parameter(format!(
            "warp center {center} with shift {shift} leaves a collapsed segment in {n} frames"
        )));
    }
    let last = (n - 1) as f64;
    let (c, t0) = (center as f64, target as f64);
    let left_scale = c / t0;
    let right_scale = (last - c) / (last - t0);
    let sources: Vec<f64> = (0..n)
        .map(|t| {
            let t = t as f64;
            if t <= t0 {
                t * left_scale
            } else {
                c + (t - t0) * right_scale
            }
        })
        .collect();

    let mut out = MelSpectrogram::filled(spec.n_mels(), n, DB_FLOOR);
    for m in 0..spec.n_mels() {
        let row = spec.row(m);
        for (t, &p) in sources.iter().enumerate() {
            let p = p.clamp(0.0, last);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let frac = (p - i0 as f64) as f32;
            let (a, b) = (row[i0], row[i1]);
            let v = if a == b { a } else { a + (b - a) * frac };
            out.set(m, t, v);
        }
    }
    Ok(out)
}

/// Linear power of a dB cell; the floor encodes zero energy.
fn db_to_power(db: f32) -> f64 {
    if db <= DB_FLOOR {
        0.0
    } else {
        10f64.powf(f64::from(db) / 10.0)
    }
}

/// Mixes `noise` into `spec` in the linear power domain,
/// `P = P_spec + alpha * P_noise`, then re-references to a 0 dB maximum and
/// floors at [`DB_FLOOR`].
pub fn add_noise(
    spec: &MelSpectrogram,
    noise: &MelSpectrogram,
    alpha: f64,
) -> Result<MelSpectrogram> {
    if spec.shape() != noise.shape() {
        return Err(AugmentError::Shape(format!(
            "spectrogram {:?} vs noise {:?}",
            spec.shape(),
            noise.shape()
        )));
    }
    let power: Vec<f64> = spec
        .values()
        .iter()
        .zip(noise.values())
        .map(|(&s, &n)| db_to_power(s) + alpha * db_to_power(n))
        .collect();
    let reference = power.iter().copied().fold(0.0f64, f64::max);
    let (n_mels, n_frames) = spec.shape();
    if reference == 0.0 {
        return Ok(MelSpectrogram::filled(n_mels, n_frames, DB_FLOOR));
    }
    let ref_db = 10.0 * reference.log10();
    let values = power
        .iter()
        .map(|&p| {
            if p == 0.0 {
                DB_FLOOR
            } else {
                ((10.0 * p.log10() - ref_db) as f32).clamp(DB_FLOOR, 0.0)
            }
        })
        .collect();
    Ok(MelSpectrogram::from_values(n_mels, n_frames, values).expect("shape preserved"))
}

/// Which augmentations a chunk draws, before and after the cap.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Independent Bernoulli draws, indexed like [`AugmentKind::ALL`].
    pub drawn: [bool; 4],
    /// Survivors of the cap, in application order.
    pub order: Vec<AugmentKind>,
}

pub fn select_augmentations<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Selection {
    let mut drawn = [false; 4];
    for d in drawn.iter_mut() {
        *d = rng.random_bool(cfg.p_apply);
    }
    let mut order: Vec<AugmentKind> = AugmentKind::ALL
        .iter()
        .zip(drawn)
        .filter_map(|(&k, d)| d.then_some(k))
        .collect();
    // a uniform permutation truncated to the cap is a uniform subset in uniform order
    order.shuffle(rng);
    order.truncate(cfg.max_augs);
    Selection { drawn, order }
}

/// Applies a scheduled selection of augmentations to one spectrogram.
pub fn augment_chunk<R: Rng + ?Sized>(
    spec: &MelSpectrogram,
    noise_pool: &[MelSpectrogram],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(MelSpectrogram, Vec<Applied>)> {
    cfg.validate()?;
    let selection = select_augmentations(cfg, rng);
    let mut current = spec.clone();
    let mut applied = Vec::with_capacity(selection.order.len());
    for kind in selection.order {
        match kind {
            AugmentKind::FreqRoll => {
                let r = cfg.freq_roll_range;
                let fraction = rng.random_range(-r..=r);
                current = freq_roll(&current, fraction);
                applied.push(Applied::FreqRoll {
                    fraction,
                    bins: shift_amount(fraction, current.n_mels()),
                });
            }
            AugmentKind::TimeRoll => {
                let r = cfg.time_roll_range;
                let fraction = rng.random_range(-r..=r);
                current = time_roll(&current, fraction);
                applied.push(Applied::TimeRoll {
                    fraction,
                    frames: shift_amount(fraction, current.n_frames()),
                });
            }
            AugmentKind::TimeWarp => {
                let w = cfg.warp_param;
                let n = current.n_frames();
                if n < 2 * w + 4 {
                    return Err(AugmentError::Parameter(format!(
                        "warp parameter {w} too large for {n} frames"
                    )));
                }
                let center = rng.random_range(w + 1..=n - w - 2);
                let shift = rng.random_range(-(w as i64)..=w as i64);
                current = time_warp(&current, center, shift)?;
                applied.push(Applied::TimeWarp { center, shift });
            }
            AugmentKind::Noise => {
                if noise_pool.is_empty() {
                    applied.push(Applied::NoiseSkipped);
                    continue;
                }
                let pool_index = rng.random_range(0..noise_pool.len());
                let alpha = rng.random_range(cfg.noise_alpha_min..=cfg.noise_alpha_max);
                current = add_noise(&current, &noise_pool[pool_index], alpha)?;
                applied.push(Applied::Noise { pool_index, alpha });
            }
        }
    }
    Ok((current, applied))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n_mels: usize, n_frames: usize) -> MelSpectrogram {
        let values = (0..n_mels * n_frames)
            .map(|i| -((i * 37 % 800) as f32) / 10.0)
            .collect();
        MelSpectrogram::from_values(n_mels, n_frames, values).unwrap()
    }

    #[test]
    fn zero_shifts_are_identities() {
        let s = ramp(64, 249);
        assert!(freq_roll(&s, 0.0).bitwise_eq(&s));
        assert!(time_roll(&s, 0.0).bitwise_eq(&s));
        assert!(time_warp(&s, 100, 0).unwrap().bitwise_eq(&s));
    }

    #[test]
    fn freq_roll_by_three_bins() {
        let s = ramp(64, 249);
        let r = freq_roll(&s, 0.05);
        for m in 0..3 {
            assert!(r.row(m).iter().all(|&v| v == DB_FLOOR));
        }
        for m in 3..64 {
            assert_eq!(r.row(m), s.row(m - 3));
        }
    }

    #[test]
    fn freq_roll_round_trip_differs_only_on_boundary() {
        let s = ramp(64, 10);
        for u in [0.05, -0.05, 0.03, -0.02] {
            let back = freq_roll(&freq_roll(&s, u), -u);
            let k = shift_amount(u, 64).unsigned_abs() as usize;
            let differing = (0..64).filter(|&m| back.row(m) != s.row(m)).count();
            assert!(differing <= 2 * k, "u={u}: {differing} rows differ");
        }
    }

    #[test]
    fn time_roll_by_quarter() {
        let s = ramp(4, 249);
        let r = time_roll(&s, 0.25);
        for m in 0..4 {
            assert!(r.row(m)[..62].iter().all(|&v| v == DB_FLOOR));
            assert_eq!(&r.row(m)[62..], &s.row(m)[..249 - 62]);
        }
        let l = time_roll(&s, -0.25);
        for m in 0..4 {
            assert!(l.row(m)[249 - 62..].iter().all(|&v| v == DB_FLOOR));
            assert_eq!(&l.row(m)[..249 - 62], &s.row(m)[62..]);
        }
    }

    #[test]
    fn warp_constant_columns_unchanged() {
        let values: Vec<f32> = (0..8).flat_map(|m| vec![-(m as f32) * 3.5; 60]).collect();
        let s = MelSpectrogram::from_values(8, 60, values).unwrap();
        for w in [-12, -3, 5, 12] {
            assert!(time_warp(&s, 30, w).unwrap().bitwise_eq(&s));
        }
    }

    #[test]
    fn warp_moves_bright_column() {
        let mut s = MelSpectrogram::filled(4, 249, DB_FLOOR);
        for m in 0..4 {
            s.set(m, 100, 0.0);
        }
        let w = time_warp(&s, 100, 5).unwrap();
        let argmax = (0..249)
            .max_by(|&a, &b| w.get(0, a).total_cmp(&w.get(0, b)))
            .unwrap();
        assert_eq!(argmax, 105);
        assert_eq!(w.get(0, 105), 0.0);
    }

    #[test]
    fn warp_rejects_collapsed_segments() {
        let s = ramp(2, 20);
        assert!(time_warp(&s, 3, -3).is_err());
        assert!(time_warp(&s, 15, 4).is_err());
    }

    #[test]
    fn noise_at_floor_is_neutral() {
        let s = ramp(8, 30);
        let floor = MelSpectrogram::filled(8, 30, DB_FLOOR);
        let out = add_noise(&s, &floor, 0.2).unwrap();
        let s_max = s.max_value();
        for (a, b) in out.values().iter().zip(s.values()) {
            assert!((a - (b - s_max).max(DB_FLOOR)).abs() < 1e-4);
        }
    }

    #[test]
    fn self_noise_cancels_under_rereferencing() {
        let s = ramp(8, 30);
        let out = add_noise(&s, &s, 0.8).unwrap();
        for (a, b) in out.values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(out.max_value(), 0.0);
    }

    #[test]
    fn noise_shape_mismatch() {
        assert!(matches!(
            add_noise(&ramp(8, 30), &ramp(8, 31), 0.5),
            Err(AugmentError::Shape(_))
        ));
    }

    #[test]
    fn nothing_drawn_means_identity() {
        let cfg = AugmentConfig {
            p_apply: 0.0,
            ..AugmentConfig::default()
        };
        let s = ramp(64, 249);
        let (out, applied) = augment_chunk(&s, &[], &cfg, &mut chunk_rng(7, 0)).unwrap();
        assert!(applied.is_empty());
        assert!(out.bitwise_eq(&s));
    }

    #[test]
    fn empty_pool_skip_is_recorded() {
        let cfg = AugmentConfig {
            p_apply: 1.0,
            max_augs: 4,
            ..AugmentConfig::default()
        };
        let s = ramp(64, 249);
        let (_, applied) = augment_chunk(&s, &[], &cfg, &mut chunk_rng(1, 0)).unwrap();
        assert_eq!(applied.len(), 4);
        assert!(applied.contains(&Applied::NoiseSkipped));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = ramp(64, 249);
        let pool = vec![ramp(64, 249)];
        let cfg = AugmentConfig::default();
        let run = |i| augment_chunk(&s, &pool, &cfg, &mut chunk_rng(42, i)).unwrap();
        let (a, la) = run(3);
        let (b, lb) = run(3);
        assert!(a.bitwise_eq(&b));
        assert_eq!(la, lb);
        let mut r0 = chunk_rng(42, 0);
        let mut r1 = chunk_rng(42, 1);
        assert_ne!(r0.random::<u64>(), r1.random::<u64>());
    }
}
