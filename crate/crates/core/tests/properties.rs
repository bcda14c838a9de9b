use birdedge::audio_io::{
    decode_wav, read_spectrogram, resample, spectrogram_to_bytes, write_spectrogram, AudioClip,
};
use birdedge::augment::{augment_chunk, chunk_rng, freq_roll, time_roll, time_warp, AugmentConfig};
use birdedge::energy::{average_power, panel_area, DeploymentProfile};
use birdedge::nnrt::{
    count_flops_for, estimate_ram, estimate_rom, infer_shapes, load_model, save_model, softmax,
    LayerSpec, ModelGraph, QuantParams, Shape,
};
use birdedge::preprocess::{
    chunk_len, has_peak, mel_spectrogram, partition_chunks, Chunk, MelConfig, MelSpectrogram,
    PreprocessConfig, DB_FLOOR,
};
use birdedge::trials::{dominates, Objectives, TrialRecord, TrialSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spectrogram(n_mels: usize, n_frames: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f32> = (0..n_mels * n_frames)
        .map(|_| rng.random_range(-80.0f32..=0.0))
        .collect();
    let top = rng.random_range(0..values.len());
    values[top] = 0.0;
    MelSpectrogram::from_values(n_mels, n_frames, values).unwrap()
}

fn quant(rng: &mut ChaCha8Rng) -> QuantParams {
    QuantParams::new(
        rng.random_range(0.001f32..0.5),
        rng.random_range(-128..=127),
    )
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.random()).collect()
}

fn bias(rng: &mut ChaCha8Rng, n: usize) -> Vec<i32> {
    if rng.random_bool(0.3) {
        Vec::new()
    } else {
        (0..n).map(|_| rng.random_range(-5000..5000)).collect()
    }
}

/// Random chain of feature layers on a `(channels, h, w)` tensor. Residual
/// adds reference tensors by absolute index, so `offset` is the index of the
/// chain's input tensor within the final graph.
fn feature_layers(
    rng: &mut ChaCha8Rng,
    mut c: u32,
    count: usize,
    offset: u32,
) -> (Vec<LayerSpec>, u32) {
    let mut layers = Vec::new();
    while layers.len() < count {
        let here = offset + layers.len() as u32;
        match rng.random_range(0..5) {
            0 => {
                let out = rng.random_range(1..=6);
                let k = if rng.random_bool(0.5) { 3 } else { 1 };
                let stride = rng.random_range(1..=2);
                let wq = quant(rng);
                let w = weights(rng, (out * c * k * k) as usize);
                let b = bias(rng, out as usize);
                layers.push(LayerSpec::conv2d(
                    c,
                    out,
                    k,
                    stride,
                    k / 2,
                    wq,
                    w,
                    b,
                    quant(rng),
                ));
                c = out;
            }
            1 => {
                let wq = quant(rng);
                let w = weights(rng, (c * 9) as usize);
                let b = bias(rng, c as usize);
                layers.push(LayerSpec::depthwise(c, 3, 1, 1, wq, w, b, quant(rng)));
            }
            2 => {
                let out = rng.random_range(1..=6);
                let wq = quant(rng);
                let w = weights(rng, (out * c) as usize);
                let b = bias(rng, out as usize);
                layers.push(LayerSpec::pointwise(c, out, wq, w, b, quant(rng)));
                c = out;
            }
            3 => layers.push(LayerSpec::relu6(c, quant(rng))),
            _ => {
                // a relu6 keeps the shape, so its input can be added to its output
                layers.push(LayerSpec::relu6(c, quant(rng)));
                layers.push(LayerSpec::residual_add(c, here, quant(rng)));
            }
        }
    }
    (layers, c)
}

fn random_model(seed: u64, h: usize, w: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=5);
    let (mut layers, c) = feature_layers(&mut rng, 1, depth, 0);
    layers.push(LayerSpec::global_avg_pool(c, quant(&mut rng)));
    let classes = rng.random_range(1..=5);
    let wq = quant(&mut rng);
    let wts = weights(&mut rng, (classes * c) as usize);
    let b = bias(&mut rng, classes as usize);
    layers.push(LayerSpec::linear(c, classes, wq, wts, b, quant(&mut rng)));
    ModelGraph::new(Shape::new(1, h, w), quant(&mut rng), classes, layers).unwrap()
}

fn trial_set(seed: u64, n: usize, spread: u64) -> TrialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trials = (0..n)
        .map(|i| {
            let acc = if i == 0 {
                0.5
            } else {
                f64::from(rng.random_range(0..=20u32)) / 20.0
            };
            TrialRecord::new(
                i as u32,
                acc,
                rng.random_range(1..=spread),
                rng.random_range(1..=spread),
                rng.random_range(1..=spread),
            )
        })
        .collect();
    TrialSet::new(trials).unwrap()
}

fn test_profile(duty: f64) -> DeploymentProfile {
    let mut p = DeploymentProfile::cortex_m7();
    p.duty = duty;
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mels_round_trip_is_bitwise(n_mels in 1usize..20, n_frames in 1usize..40, seed: u64) {
        let s = spectrogram(n_mels, n_frames, seed);
        let bytes = spectrogram_to_bytes(&s).unwrap();
        let back = read_spectrogram(&bytes[..]).unwrap();
        prop_assert!(back.bitwise_eq(&s));
        let mut again = Vec::new();
        write_spectrogram(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn enm1_round_trip(seed: u64, h in 4usize..12, w in 4usize..12) {
        let m = random_model(seed, h, w);
        let bytes = save_model(&m);
        let back = load_model(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(save_model(&back), bytes);
    }

    #[test]
    fn flops_are_additive_over_concatenation(seed: u64, h in 6usize..16, w in 6usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Shape::new(1, h, w);
        let n_a = rng.random_range(1..=4);
        let (a, c) = feature_layers(&mut rng, 1, n_a, 0);
        let mid = *infer_shapes(input, &a).unwrap().last().unwrap();
        let n_b = rng.random_range(1..=4);
        let (b, _) = feature_layers(&mut rng, c, n_b, a.len() as u32);
        let b_alone: Vec<LayerSpec> = b
            .iter()
            .cloned()
            .map(|mut l| {
                l.skip_from = l.skip_from.saturating_sub(a.len() as u32);
                l
            })
            .collect();
        let joined: Vec<LayerSpec> = a.iter().chain(&b).cloned().collect();
        prop_assert_eq!(
            count_flops_for(input, &joined).unwrap(),
            count_flops_for(input, &a).unwrap() + count_flops_for(mid, &b_alone).unwrap()
        );
    }

    #[test]
    fn ram_ignores_weight_values(seed: u64, other: u64) {
        let m = random_model(seed, 10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(other);
        let layers: Vec<LayerSpec> = m
            .layers()
            .iter()
            .cloned()
            .map(|mut l| {
                for w in l.weights.iter_mut() {
                    *w = rng.random();
                }
                l
            })
            .collect();
        let m2 = ModelGraph::new(m.input_shape(), m.input_quant(), m.class_count(), layers).unwrap();
        prop_assert_eq!(estimate_ram(&m2), estimate_ram(&m));
    }

    #[test]
    fn rom_ignores_input_shape(seed: u64, h in 6usize..20, w in 6usize..20) {
        let m = random_model(seed, 6, 6);
        let resized = ModelGraph::new(Shape::new(1, h, w), m.input_quant(), m.class_count(), m.layers().to_vec()).unwrap();
        prop_assert_eq!(estimate_rom(&resized), estimate_rom(&m));
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-60.0f32..60.0, 1..64)) {
        let p = softmax(&logits);
        let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6, "sum {}", sum);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn augmentation_contract(n_mels in 4usize..64, n_frames in 30usize..80, seed: u64, run_seed: u64, chunk in 0u64..1000) {
        let s = spectrogram(n_mels, n_frames, seed);
        let pool = vec![spectrogram(n_mels, n_frames, seed ^ 1), spectrogram(n_mels, n_frames, seed ^ 2)];
        let cfg = AugmentConfig { seed: run_seed, ..AugmentConfig::default() };
        let (out, applied) = augment_chunk(&s, &pool, &cfg, &mut chunk_rng(run_seed, chunk)).unwrap();
        prop_assert_eq!(out.shape(), s.shape());
        prop_assert!(out.values().iter().all(|&v| (DB_FLOOR..=0.0).contains(&v)));
        prop_assert!(applied.len() <= 3);
        let mut kinds: Vec<_> = applied.iter().map(|a| a.kind()).collect();
        kinds.sort_by_key(|k| k.name());
        kinds.dedup();
        prop_assert_eq!(kinds.len(), applied.len());

        let (again, applied_again) = augment_chunk(&s, &pool, &cfg, &mut chunk_rng(run_seed, chunk)).unwrap();
        prop_assert!(again.bitwise_eq(&out));
        prop_assert_eq!(applied_again, applied);
    }

    #[test]
    fn zero_parameters_are_identities(n_mels in 4usize..64, n_frames in 30usize..80, seed: u64, center in 13usize..17) {
        let s = spectrogram(n_mels, n_frames, seed);
        prop_assert!(freq_roll(&s, 0.0).bitwise_eq(&s));
        prop_assert!(time_roll(&s, 0.0).bitwise_eq(&s));
        prop_assert!(time_warp(&s, center, 0).unwrap().bitwise_eq(&s));
    }

    #[test]
    fn resample_keeps_dc_and_length(
        level in -1.0f32..=1.0,
        len in 1usize..3000,
        from in prop::sample::select(vec![8_000u32, 16_000, 22_050, 44_100, 48_000]),
        to in prop::sample::select(vec![8_000u32, 16_000, 22_050, 44_100, 48_000]),
    ) {
        let clip = AudioClip::new(vec![level; len], from).unwrap();
        let out = resample(&clip, to).unwrap();
        let expected = (len as f64 * f64::from(to) / f64::from(from)).round() as usize;
        prop_assert_eq!(out.len(), expected);
        prop_assert!(out.samples().iter().all(|&s| s == level));
        // duration within one output sample period
        prop_assert!((out.duration_secs() - clip.duration_secs()).abs() <= 1.0 / f64::from(to));
    }

    #[test]
    fn decode_never_panics_on_header_valid_streams(
        format in prop::sample::select(vec![1u16, 3, 0xFFFE, 2]),
        channels in 0u16..4,
        rate in 0u32..100_000,
        block_align in 0u16..10,
        bits in prop::sample::select(vec![8u16, 16, 24, 32]),
        data_size: u32,
        extra in prop::collection::vec(any::<u8>(), 0..64),
        payload in prop::collection::vec(any::<u8>(), 0..256),
    ) {
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&(16 + extra.len() as u32).to_le_bytes());
        b.extend_from_slice(&format.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate.wrapping_mul(u32::from(block_align))).to_le_bytes());
        b.extend_from_slice(&block_align.to_le_bytes());
        b.extend_from_slice(&bits.to_le_bytes());
        b.extend_from_slice(&extra);
        if extra.len() % 2 == 1 {
            b.push(0);
        }
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_size.to_le_bytes());
        b.extend_from_slice(&payload);
        let _ = decode_wav(&b);
    }

    #[test]
    fn decode_never_panics_on_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode_wav(&bytes);
    }

    #[test]
    fn has_peak_is_scale_invariant(
        samples in prop::collection::vec(0.001f32..0.5, 2000),
        spike_at in 0usize..2000,
        spike in 0.0f32..0.5,
        k in -8i32..=8,
    ) {
        let mut samples = samples;
        samples[spike_at] += spike;
        let chunk = Chunk::new(samples.clone(), 1000).unwrap();
        let scale = 2f32.powi(k);
        let scaled = Chunk::new(samples.iter().map(|s| s * scale).collect(), 1000).unwrap();
        prop_assert_eq!(has_peak(&scaled, 1.075), has_peak(&chunk, 1.075));
    }

    #[test]
    fn chunks_are_capped_and_disjoint(seconds in 2usize..90, seed: u64, spikes in 0usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rate = 1000;
        let mut samples: Vec<f32> = (0..seconds * rate).map(|_| rng.random_range(0.01f32..0.02)).collect();
        for _ in 0..spikes {
            let at = rng.random_range(0..samples.len());
            samples[at] = 0.9;
        }
        let clip = AudioClip::new(samples, rate as u32).unwrap();
        let split = partition_chunks(&clip, &PreprocessConfig::default());
        prop_assert!(split.kept.len() <= 30);
        let len = chunk_len(rate as u32);
        // every kept chunk is a window at a grid offset, in strictly increasing order
        let mut next = 0usize;
        for c in &split.kept {
            prop_assert_eq!(c.samples().len(), len);
            let k = (next..clip.len() / len).find(|&k| c.samples() == &clip.samples()[k * len..(k + 1) * len]);
            prop_assert!(k.is_some());
            next = k.unwrap() + 1;
        }
    }

    #[test]
    fn trial_scores_survive_scaling(seed: u64, n in 1usize..40, c in 1u64..1000, k in 0i32..6) {
        let set = trial_set(seed, n, 10_000);
        let factor = 2f64.powi(-k);
        let scaled = TrialSet::new(
            set.trials()
                .iter()
                .map(|t| TrialRecord::new(t.id, t.acc * factor, t.ram * c, t.rom * c, t.flops * c))
                .collect(),
        )
        .unwrap();
        let a = set.scores().unwrap();
        let b = scaled.scores().unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.acc, y.acc);
            prop_assert_eq!(x.mem, y.mem);
        }
        prop_assert_eq!(set.select_best().unwrap(), scaled.select_best().unwrap());
    }

    #[test]
    fn pareto_front_is_sound_and_complete(seed: u64, n in 1usize..60, spread in 2u64..50, with_acc: bool) {
        let set = trial_set(seed, n, spread);
        let obj = Objectives { accuracy: with_acc };
        let front = set.pareto_front(obj);
        prop_assert!(!front.is_empty());
        for &a in &front {
            for &b in &front {
                prop_assert!(!dominates(set.get(a).unwrap(), set.get(b).unwrap(), obj));
            }
        }
        for t in set.trials() {
            if !front.contains(&t.id) {
                prop_assert!(front.iter().any(|&f| dominates(set.get(f).unwrap(), t, obj)));
            }
        }
    }

    #[test]
    fn best_trial_is_not_beaten_everywhere(seed: u64, n in 1usize..60) {
        let set = trial_set(seed, n, 1000);
        let best = set.get(set.select_best().unwrap()).unwrap().clone();
        let best_rank = set.rank(best.id).unwrap();
        for t in set.trials() {
            let strictly_all = t.acc > best.acc && t.ram < best.ram && t.rom < best.rom && t.flops < best.flops;
            prop_assert!(!(strictly_all && set.rank(t.id).unwrap() > best_rank));
        }
    }

    #[test]
    fn score_ranges(seed: u64, n in 1usize..60) {
        let set = trial_set(seed, n, 100_000);
        for s in set.scores().unwrap() {
            prop_assert!((0.0..=1.0).contains(&s.acc));
            prop_assert!((0.0..1.0).contains(&s.mem));
        }
    }

    #[test]
    fn panel_area_inverts_the_charge(p in 1e-4f64..100.0, s in 1.0f64..1000.0, eta_s in 0.01f64..1.0, eta_b in 0.01f64..1.0) {
        let a = panel_area(p, s, eta_s, eta_b).unwrap();
        prop_assert!((a * (eta_s * eta_b * s) - p).abs() <= 4.0 * f64::EPSILON * p);
    }

    #[test]
    fn average_power_grows_with_duty(d1 in 0.0f64..=1.0, d2 in 0.0f64..=1.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(average_power(&test_profile(lo)).unwrap() <= average_power(&test_profile(hi)).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunk_spectrogram_shape_and_db_range(seed: u64, hz in 200.0f64..7000.0, noise in 0.0f32..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MelConfig::default();
        let samples: Vec<f32> = (0..chunk_len(cfg.sample_rate))
            .map(|i| {
                let t = i as f64 / f64::from(cfg.sample_rate);
                0.5 * (std::f64::consts::TAU * hz * t).sin() as f32 + noise * rng.random_range(-1.0f32..1.0)
            })
            .collect();
        let chunk = Chunk::new(samples, cfg.sample_rate).unwrap();
        let s = mel_spectrogram(&chunk, &cfg).unwrap();
        prop_assert_eq!(s.shape(), (64, 249));
        prop_assert_eq!(s.max_value(), 0.0);
        prop_assert!(s.min_value() >= DB_FLOOR);
    }
}
