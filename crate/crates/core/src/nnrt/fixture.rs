//! Seeded stand-in models with the layout of a mobile inverted-residual
//! network: a stem convolution, 17 expand/depthwise/project blocks with skip
//! connections where shapes allow, global pooling and a linear classifier.
//!
//! Convolution weights are random. Each class owns a seeded synthetic call
//! template; calibration runs the dequantized float graph over jittered
//! copies of the templates to normalize layers, fit the classifier and cover
//! the observed range of every tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::exec::float_layer;
use super::{
    infer_shapes, LayerKind, LayerSpec, ModelError, ModelGraph, QuantParams, Result, Shape,
};
use crate::preprocess::{MelSpectrogram, DB_FLOOR};

pub const FIXTURE_INPUT_SHAPE: Shape = Shape::new(1, 64, 249);

const STEM_CHANNELS: usize = 8;
const CALIBRATION_PER_CLASS: usize = 2;
const MIN_CALIBRATION_INPUTS: usize = 16;
/// Cell-level jitter of held-out and calibration inputs around their template.
const INPUT_JITTER_DB: f32 = 3.0;
/// Logit scale of the fitted classifier, per squared unit of feature distance.
const HEAD_GAIN: f32 = 4.0;
/// Mean pre-activation before a ReLU6, in units of the layer's spread.
const ACTIVE_SHIFT: f32 = 1.5;
const PRE_ACT_SPREAD: f32 = 1.2;

struct Stage {
    expand: usize,
    channels: usize,
    blocks: usize,
    stride: u32,
}

// 1 + 2 + 3 + 4 + 3 + 3 + 1 = 17 blocks
const STAGES: [Stage; 7] = [
    Stage {
        expand: 1,
        channels: 8,
        blocks: 1,
        stride: 2,
    },
    Stage {
        expand: 3,
        channels: 12,
        blocks: 2,
        stride: 2,
    },
    Stage {
        expand: 3,
        channels: 16,
        blocks: 3,
        stride: 1,
    },
    Stage {
        expand: 3,
        channels: 24,
        blocks: 4,
        stride: 2,
    },
    Stage {
        expand: 3,
        channels: 32,
        blocks: 3,
        stride: 1,
    },
    Stage {
        expand: 3,
        channels: 40,
        blocks: 3,
        stride: 2,
    },
    Stage {
        expand: 3,
        channels: 48,
        blocks: 1,
        stride: 1,
    },
];

pub(crate) const FIXTURE_BLOCKS: usize = 17;

const PLACEHOLDER: QuantParams = QuantParams::new(1.0, 0);

fn uniform(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let a = std * 3f32.sqrt();
    (0..n).map(|_| rng.random_range(-a..=a)).collect()
}

/// Symmetric per-tensor quantization of float weights.
fn quantize_weights(w: &[f32]) -> (QuantParams, Vec<i8>) {
    let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return (QuantParams::new(1.0, 0), vec![0; w.len()]);
    }
    let scale = max / 127.0;
    let q = w
        .iter()
        .map(|v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (QuantParams::new(scale, 0), q)
}

/// Layers plus the float parameters still to be normalized and quantized.
struct Blueprint {
    layers: Vec<LayerSpec>,
    float_weights: Vec<Vec<f32>>,
    float_bias: Vec<Vec<f32>>,
}

impl Blueprint {
    fn push(&mut self, layer: LayerSpec, w: Vec<f32>, bias: Vec<f32>) -> u32 {
        self.layers.push(layer);
        self.float_weights.push(w);
        self.float_bias.push(bias);
        self.layers.len() as u32
    }

    fn plain(&mut self, layer: LayerSpec) -> u32 {
        self.push(layer, vec![], vec![])
    }
}

fn build_blueprint(class_count: u32, rng: &mut ChaCha8Rng) -> Blueprint {
    let mut bp = Blueprint {
        layers: Vec::new(),
        float_weights: Vec::new(),
        float_bias: Vec::new(),
    };
    let c0 = STEM_CHANNELS;

    bp.push(
        LayerSpec::conv2d(
            1,
            c0 as u32,
            3,
            2,
            1,
            PLACEHOLDER,
            vec![],
            vec![],
            PLACEHOLDER,
        ),
        uniform(rng, c0 * 9, (2.0f32 / 9.0).sqrt()),
        vec![0.0; c0],
    );
    let mut tensor = bp.plain(LayerSpec::relu6(c0 as u32, PLACEHOLDER));

    let mut c_in = c0;
    for stage in &STAGES {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let block_input = tensor;
            let hidden = c_in * stage.expand;
            if stage.expand > 1 {
                bp.push(
                    LayerSpec::pointwise(
                        c_in as u32,
                        hidden as u32,
                        PLACEHOLDER,
                        vec![],
                        vec![],
                        PLACEHOLDER,
                    ),
                    uniform(rng, hidden * c_in, (2.0 / c_in as f32).sqrt()),
                    uniform(rng, hidden, 0.1),
                );
                bp.plain(LayerSpec::relu6(hidden as u32, PLACEHOLDER));
            }
            bp.push(
                LayerSpec::depthwise(
                    hidden as u32,
                    3,
                    stride,
                    1,
                    PLACEHOLDER,
                    vec![],
                    vec![],
                    PLACEHOLDER,
                ),
                uniform(rng, hidden * 9, (2.0f32 / 9.0).sqrt()),
                uniform(rng, hidden, 0.1),
            );
            bp.plain(LayerSpec::relu6(hidden as u32, PLACEHOLDER));
            let c_out = stage.channels;
            tensor = bp.push(
                LayerSpec::pointwise(
                    hidden as u32,
                    c_out as u32,
                    PLACEHOLDER,
                    vec![],
                    vec![],
                    PLACEHOLDER,
                ),
                uniform(rng, c_out * hidden, (1.0 / hidden as f32).sqrt()),
                uniform(rng, c_out, 0.05),
            );
            if stride == 1 && c_in == c_out {
                tensor = bp.plain(LayerSpec::residual_add(
                    c_out as u32,
                    block_input,
                    PLACEHOLDER,
                ));
            }
            c_in = c_out;
        }
    }

    bp.plain(LayerSpec::global_avg_pool(c_in as u32, PLACEHOLDER));
    let n = class_count as usize;
    bp.push(
        LayerSpec::linear(
            c_in as u32,
            class_count,
            PLACEHOLDER,
            vec![],
            vec![],
            PLACEHOLDER,
        ),
        uniform(rng, n * c_in, 1.0),
        uniform(rng, n, 0.05),
    );
    bp
}

/// Quantizes float weights and bias into `layer` for the given input scale.
fn set_params(layer: &mut LayerSpec, w: &[f32], bias: &[f32], in_scale: f32) {
    let (wq, q) = quantize_weights(w);
    layer.weight_quant = wq;
    layer.weights = q;
    let bias_scale = in_scale * wq.scale;
    layer.bias = bias
        .iter()
        .map(|b| (b / bias_scale).round() as i32)
        .collect();
}

/// Mean and standard deviation of each output channel over all calibration
/// inputs and positions (or over inputs only, for a vector output).
fn channel_stats(outputs: &[Vec<f32>], channels: usize) -> Vec<(f32, f32)> {
    let plane = outputs[0].len() / channels;
    (0..channels)
        .map(|c| {
            let vals = outputs.iter().flat_map(|o| &o[c * plane..(c + 1) * plane]);
            let n = (outputs.len() * plane) as f64;
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for &v in vals {
                s += f64::from(v);
                s2 += f64::from(v) * f64::from(v);
            }
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            (mean as f32, var.sqrt() as f32)
        })
        .collect()
}

/// Nearest-class-mean classifier over standardized pooled features.
///
/// With `z = (f - mean) / sd` and class centroid `m_c` in z-space, the logit
/// is `gain * (<m_c, z> - |m_c|^2 / 2)`, which ranks classes exactly as the
/// Euclidean distance from `z` to each centroid.
fn fit_head(features: &[Vec<f32>], labels: &[usize], classes: usize) -> (Vec<f32>, Vec<f32>) {
    let n_in = features[0].len();
    let stats = channel_stats(features, n_in);
    let mut centroids = vec![vec![0.0f32; n_in]; classes];
    let mut counts = vec![0usize; classes];
    for (f, &c) in features.iter().zip(labels) {
        counts[c] += 1;
        for (j, m) in centroids[c].iter_mut().enumerate() {
            *m += (f[j] - stats[j].0) / stats[j].1.max(1e-6);
        }
    }
    let gain = HEAD_GAIN / n_in as f32;
    let mut w = Vec::with_capacity(classes * n_in);
    let mut b = Vec::with_capacity(classes);
    for (m, &count) in centroids.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= count.max(1) as f32);
        let mut bias = -0.5 * m.iter().map(|v| v * v).sum::<f32>();
        for (j, &mj) in m.iter().enumerate() {
            let sd = stats[j].1.max(1e-6);
            w.push(gain * mj / sd);
            bias -= mj * stats[j].0 / sd;
        }
        b.push(gain * bias);
    }
    (w, b)
}

/// Structurally faithful int8 model for `class_count` classes.
///
/// Convolution weights are random. Over a calibration set of fixture inputs
/// each convolution is rescaled so its pre-activations share one spread and
/// sit mostly in the linear part of ReLU6, the way folded batch normalization
/// leaves a trained network, and the classifier is fitted to the class
/// templates (see [`fixture_input`]). A convolution feeding a ReLU6 is
/// quantized over the activation's output range.
pub fn generate_fixture_model(class_count: u32, seed: u64) -> Result<ModelGraph> {
    if class_count < 2 {
        return Err(ModelError::Graph(format!(
            "fixture needs at least 2 classes, got {class_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Blueprint {
        mut layers,
        float_weights,
        float_bias,
    } = build_blueprint(class_count, &mut rng);
    for (i, layer) in layers.iter_mut().enumerate() {
        if layer.kind.has_weights() {
            set_params(layer, &float_weights[i], &float_bias[i], 1.0);
        }
    }
    let input = FIXTURE_INPUT_SHAPE;
    let shapes = infer_shapes(input, &layers)?;
    let input_quant = QuantParams::from_range(DB_FLOOR, 0.0);

    let classes = class_count as usize;
    let n_calib = (CALIBRATION_PER_CLASS * classes).max(MIN_CALIBRATION_INPUTS);
    let mut labels = Vec::with_capacity(n_calib);
    let mut calib: Vec<Vec<Vec<f32>>> = (0..n_calib)
        .map(|k| {
            let class = k % classes;
            labels.push(class);
            let s = perturbed_template(seed, class, CALIBRATION_STREAM, k as u64);
            vec![s.values().to_vec()]
        })
        .collect();
    let run =
        |layer: &LayerSpec, in_scale: f32, calib: &[Vec<Vec<f32>>], i: usize| -> Vec<Vec<f32>> {
            calib
                .iter()
                .map(|t| float_layer(layer, shapes[i], shapes[i + 1], in_scale, t, i))
                .collect()
        };

    for i in 0..layers.len() {
        let in_scale = if i == 0 {
            input_quant.scale
        } else {
            layers[i - 1].output_quant.scale
        };
        let activated = layers
            .get(i + 1)
            .is_some_and(|l| l.kind == LayerKind::Relu6);
        match layers[i].kind {
            LayerKind::Linear => {
                let features: Vec<Vec<f32>> = calib.iter().map(|t| t[i].clone()).collect();
                let (w, b) = fit_head(&features, &labels, classes);
                set_params(&mut layers[i], &w, &b, in_scale);
            }
            kind if kind.has_weights() => {
                let mut w = float_weights[i].clone();
                let mut b = float_bias[i].clone();
                set_params(&mut layers[i], &w, &b, in_scale);
                let out_c = shapes[i + 1].c;
                let stats = channel_stats(&run(&layers[i], in_scale, &calib, i), out_c);
                let rms = (stats.iter().map(|s| s.1 * s.1).sum::<f32>() / out_c as f32).sqrt();
                let g = PRE_ACT_SPREAD / rms.max(1e-6);
                let shift = if activated { ACTIVE_SHIFT } else { 0.0 };
                let per_out = w.len() / out_c;
                for (c, &(mean, _)) in stats.iter().enumerate() {
                    w[c * per_out..(c + 1) * per_out]
                        .iter_mut()
                        .for_each(|v| *v *= g);
                    b[c] = (b[c] - mean) * g + shift;
                }
                set_params(&mut layers[i], &w, &b, in_scale);
            }
            _ => {}
        }
        let outputs = run(&layers[i], in_scale, &calib, i);
        let fused = layers[i].kind.has_weights() && activated;
        if i > 0 && layers[i].kind == LayerKind::Relu6 && layers[i - 1].kind.has_weights() {
            // the producing convolution already covers this range exactly
            layers[i].output_quant = layers[i - 1].output_quant;
        } else {
            let (mut lo, mut hi) = (0.0f32, 0.0f32);
            for v in outputs.iter().flatten() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            if fused || layers[i].kind == LayerKind::Relu6 {
                (lo, hi) = (0.0, hi.min(6.0));
            }
            layers[i].output_quant = QuantParams::from_range(lo, hi);
        }
        for (t, o) in calib.iter_mut().zip(outputs) {
            t.push(o);
        }
    }

    let graph = ModelGraph::new(input, input_quant, class_count, layers)?;
    debug_assert_eq!(
        graph
            .layers()
            .iter()
            .filter(|l| l.kind == LayerKind::DepthwiseConv2d)
            .count(),
        FIXTURE_BLOCKS
    );
    Ok(graph)
}

const CALIBRATION_STREAM: u64 = 1;
const HELD_OUT_STREAM: u64 = 2;

fn template_seed(model_seed: u64, class: usize) -> u64 {
    model_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(class as u64)
}

/// Class template with independent uniform jitter on every cell,
/// re-referenced to a 0 dB maximum. Inputs are not shifted in time: the
/// strided random convolutions are far from shift invariant, so a shifted
/// copy no longer resembles its class.
fn perturbed_template(model_seed: u64, class: usize, stream: u64, index: u64) -> MelSpectrogram {
    let (h, w) = (FIXTURE_INPUT_SHAPE.h, FIXTURE_INPUT_SHAPE.w);
    let template = synthetic_spectrogram(h, w, template_seed(model_seed, class));
    let mut rng = ChaCha8Rng::seed_from_u64(model_seed ^ index.rotate_left(17));
    rng.set_stream(stream);
    let mut values: Vec<f32> = template
        .values()
        .iter()
        .map(|v| v + rng.random_range(-INPUT_JITTER_DB..=INPUT_JITTER_DB))
        .collect();
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for v in values.iter_mut() {
        *v = (*v - max).clamp(DB_FLOOR, 0.0);
    }
    MelSpectrogram::from_values(h, w, values).expect("shape by construction")
}

/// Held-out input `index` for a fixture model built with `model_seed`: a
/// perturbed copy of the template of class `index % class_count`. Returns the
/// class alongside the spectrogram.
pub fn fixture_input(model_seed: u64, class_count: u32, index: u64) -> (usize, MelSpectrogram) {
    let class = (index % u64::from(class_count.max(1))) as usize;
    (
        class,
        perturbed_template(model_seed, class, HELD_OUT_STREAM, index),
    )
}

/// Seeded spectrogram-like field in `[-80, 0]` dB: a noisy background with a
/// few harmonic chirps, referenced so the loudest cell is 0 dB.
pub fn synthetic_spectrogram(n_mels: usize, n_frames: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.random_range(-70.0f32..-45.0);
    let mut values: Vec<f32> = (0..n_mels * n_frames)
        .map(|_| background + rng.random_range(-8.0f32..8.0))
        .collect();
    let calls = rng.random_range(1..=4);
    for _ in 0..calls {
        let start = rng.random_range(0..n_frames) as f32;
        let len = rng.random_range(10.0f32..80.0);
        let band = rng.random_range(4.0f32..(n_mels as f32 - 4.0));
        let slope = rng.random_range(-0.2f32..0.2);
        let width = rng.random_range(1.0f32..3.5);
        let level = rng.random_range(25.0f32..50.0);
        for t in 0..n_frames {
            let dt = t as f32 - start;
            if !(0.0..len).contains(&dt) {
                continue;
            }
            let center = band + slope * dt;
            for m in 0..n_mels {
                let d = (m as f32 - center) / width;
                let boost = level * (-0.5 * d * d).exp();
                let cell = &mut values[m * n_frames + t];
                *cell = cell.max(background + boost);
            }
        }
    }
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for v in values.iter_mut() {
        *v = (*v - max).clamp(DB_FLOOR, 0.0);
    }
    MelSpectrogram::from_values(n_mels, n_frames, values).expect("shape by construction")
}
