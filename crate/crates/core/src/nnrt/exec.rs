//! Int8 inference and its dequantized f32 counterpart.
//!
//! Both paths share the convolution and matrix kernels below; they differ
//! only in what flows through them (i32 offsets from the zero point versus
//! dequantized reals) and in whether activations are requantized between
//! layers. The final linear layer's logits are dequantized straight from the
//! i32 accumulator.

use std::ops::{Add, Mul};

use super::{LayerKind, LayerSpec, ModelError, ModelGraph, QuantParams, Result, Shape};
use crate::preprocess::MelSpectrogram;

trait Accum: Copy + Default + PartialEq + Add<Output = Self> + Mul<Output = Self> {}
impl Accum for i32 {}
impl Accum for f32 {}

/// Convolution accumulators for every output element, bias included.
fn conv_core<T: Accum>(
    layer: &LayerSpec,
    ins: Shape,
    outs: Shape,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let groups = if layer.kind == LayerKind::DepthwiseConv2d {
        ins.c
    } else {
        1
    };
    let cin_g = ins.c / groups;
    let cout_g = outs.c / groups;
    let (kh, kw) = (layer.kernel.0 as usize, layer.kernel.1 as usize);
    let (sh, sw) = (layer.stride.0 as usize, layer.stride.1 as usize);
    let (ph, pw) = (layer.padding.0 as usize, layer.padding.1 as usize);
    let (ih, iw, oh, ow) = (ins.h, ins.w, outs.h, outs.w);
    let zero = T::default();

    let mut out = vec![zero; outs.numel()];
    for oc in 0..outs.c {
        let g = oc / cout_g;
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for icl in 0..cin_g {
            let ic = g * cin_g + icl;
            let xin = &x[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w[((oc * cin_g + icl) * kh + ky) * kw + kx];
                    if wv == zero {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy * sh + ky;
                        if iy < ph || iy - ph >= ih {
                            continue;
                        }
                        let row = &xin[(iy - ph) * iw..(iy - ph + 1) * iw];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = ox * sw + kx;
                            if ix < pw || ix - pw >= iw {
                                continue;
                            }
                            *o = *o + wv * row[ix - pw];
                        }
                    }
                }
            }
        }
    }
    out
}

fn linear_core<T: Accum>(layer: &LayerSpec, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let n_in = layer.in_channels as usize;
    (0..layer.out_channels as usize)
        .map(|o| {
            let init = bias.map_or(T::default(), |b| b[o]);
            w[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .fold(init, |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect()
}

fn requantize(acc: &[i32], multiplier: f32, out: QuantParams) -> Vec<i8> {
    acc.iter()
        .map(|&a| {
            ((a as f32 * multiplier).round() as i64 + i64::from(out.zero_point)).clamp(-128, 127)
                as i8
        })
        .collect()
}

fn offsets(q: &[i8], zero_point: i32) -> Vec<i32> {
    q.iter().map(|&v| i32::from(v) - zero_point).collect()
}

/// Runs the int8 graph on a real-valued input, returning dequantized logits.
pub(crate) fn run_int8(model: &ModelGraph, input: &[f32]) -> Vec<f32> {
    let shapes = model.tensor_shapes();
    let iq = model.input_quant();
    let mut tensors: Vec<Vec<i8>> = Vec::with_capacity(shapes.len());
    tensors.push(input.iter().map(|&x| iq.quantize(x)).collect());
    let last = model.layers().len() - 1;

    for (i, layer) in model.layers().iter().enumerate() {
        let in_q = model.tensor_quant(i);
        let out_q = layer.output_quant;
        let x = &tensors[i];
        let next = match layer.kind {
            LayerKind::Conv2d
            | LayerKind::DepthwiseConv2d
            | LayerKind::PointwiseConv2d
            | LayerKind::Linear => {
                let xo = offsets(x, in_q.zero_point);
                let wo = offsets(&layer.weights, layer.weight_quant.zero_point);
                let bias = (!layer.bias.is_empty()).then_some(layer.bias.as_slice());
                let acc = if layer.kind == LayerKind::Linear {
                    linear_core(layer, &xo, &wo, bias)
                } else {
                    conv_core(layer, shapes[i], shapes[i + 1], &xo, &wo, bias)
                };
                let acc_scale = in_q.scale * layer.weight_quant.scale;
                if i == last {
                    return acc.iter().map(|&a| a as f32 * acc_scale).collect();
                }
                requantize(&acc, acc_scale / out_q.scale, out_q)
            }
            LayerKind::Relu6 => x
                .iter()
                .map(|&q| out_q.quantize(in_q.dequantize(q).clamp(0.0, 6.0)))
                .collect(),
            LayerKind::ResidualAdd => {
                let j = layer.skip_from as usize;
                let skip_q = model.tensor_quant(j);
                x.iter()
                    .zip(&tensors[j])
                    .map(|(&a, &b)| out_q.quantize(in_q.dequantize(a) + skip_q.dequantize(b)))
                    .collect()
            }
            LayerKind::GlobalAvgPool => {
                let s = shapes[i];
                let hw = s.h * s.w;
                x.chunks_exact(hw)
                    .map(|plane| {
                        let sum: i32 = plane.iter().map(|&q| i32::from(q) - in_q.zero_point).sum();
                        out_q.quantize(in_q.scale * sum as f32 / hw as f32)
                    })
                    .collect()
            }
        };
        tensors.push(next);
    }
    unreachable!("graph validation guarantees a final linear layer")
}

/// One float layer step over all previously computed tensors.
///
/// `input_scale` is the quantized graph's scale for tensor `i`; it fixes the
/// real value of the integer bias.
pub(crate) fn float_layer(
    layer: &LayerSpec,
    ins: Shape,
    outs: Shape,
    input_scale: f32,
    tensors: &[Vec<f32>],
    i: usize,
) -> Vec<f32> {
    let x = &tensors[i];
    match layer.kind {
        LayerKind::Conv2d
        | LayerKind::DepthwiseConv2d
        | LayerKind::PointwiseConv2d
        | LayerKind::Linear => {
            let wq = layer.weight_quant;
            let w: Vec<f32> = layer.weights.iter().map(|&q| wq.dequantize(q)).collect();
            let bias_scale = input_scale * wq.scale;
            let b: Vec<f32> = layer.bias.iter().map(|&v| v as f32 * bias_scale).collect();
            let bias = (!b.is_empty()).then_some(b.as_slice());
            if layer.kind == LayerKind::Linear {
                linear_core(layer, x, &w, bias)
            } else {
                conv_core(layer, ins, outs, x, &w, bias)
            }
        }
        LayerKind::Relu6 => x.iter().map(|v| v.clamp(0.0, 6.0)).collect(),
        LayerKind::ResidualAdd => x
            .iter()
            .zip(&tensors[layer.skip_from as usize])
            .map(|(a, b)| a + b)
            .collect(),
        LayerKind::GlobalAvgPool => {
            let hw = ins.h * ins.w;
            x.chunks_exact(hw)
                .map(|p| p.iter().sum::<f32>() / hw as f32)
                .collect()
        }
    }
}

pub(crate) fn run_float(model: &ModelGraph, input: &[f32]) -> Vec<f32> {
    let shapes = model.tensor_shapes();
    let mut tensors: Vec<Vec<f32>> = Vec::with_capacity(shapes.len());
    tensors.push(input.to_vec());
    for (i, layer) in model.layers().iter().enumerate() {
        let next = float_layer(
            layer,
            shapes[i],
            shapes[i + 1],
            model.tensor_quant(i).scale,
            &tensors,
            i,
        );
        tensors.push(next);
    }
    tensors.pop().expect("at least one layer")
}

/// Numerically stable softmax, accumulated in f64.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| f64::from(l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

fn check_input(model: &ModelGraph, spec: &MelSpectrogram) -> Result<()> {
    let s = model.input_shape();
    if (s.h, s.w) != spec.shape() {
        return Err(ModelError::Shape(format!(
            "model expects 1x{}x{}, spectrogram is {}x{}",
            s.h,
            s.w,
            spec.n_mels(),
            spec.n_frames()
        )));
    }
    Ok(())
}

pub fn infer_logits(model: &ModelGraph, spec: &MelSpectrogram) -> Result<Vec<f32>> {
    check_input(model, spec)?;
    Ok(run_int8(model, spec.values()))
}

/// Class probabilities from the int8 path.
pub fn infer(model: &ModelGraph, spec: &MelSpectrogram) -> Result<Vec<f32>> {
    Ok(softmax(&infer_logits(model, spec)?))
}

pub fn float_reference_logits(model: &ModelGraph, spec: &MelSpectrogram) -> Result<Vec<f32>> {
    check_input(model, spec)?;
    Ok(run_float(model, spec.values()))
}

/// Class probabilities with all weights dequantized and activations kept in f32.
pub fn float_reference_infer(model: &ModelGraph, spec: &MelSpectrogram) -> Result<Vec<f32>> {
    Ok(softmax(&float_reference_logits(model, spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: QuantParams = QuantParams::new(1.0, 0);

    fn spec(h: usize, w: usize, values: Vec<f32>) -> MelSpectrogram {
        MelSpectrogram::from_values(h, w, values).unwrap()
    }

    #[test]
    fn hand_computed_linear() {
        // logits = W x with W = [[1, 2, 3], [-1, 0, 2]], x = [1, -2, 3]
        let layers = vec![LayerSpec::linear(
            3,
            2,
            UNIT,
            vec![1, 2, 3, -1, 0, 2],
            vec![],
            UNIT,
        )];
        let m = ModelGraph::new(Shape::new(1, 1, 3), UNIT, 2, layers).unwrap();
        let x = spec(1, 3, vec![1.0, -2.0, 3.0]);
        assert_eq!(float_reference_logits(&m, &x).unwrap(), vec![6.0, 5.0]);
        assert_eq!(infer_logits(&m, &x).unwrap(), vec![6.0, 5.0]);
    }

    #[test]
    fn zero_weights_give_uniform() {
        let layers = vec![
            LayerSpec::conv2d(1, 3, 3, 2, 1, UNIT, vec![0; 27], vec![], UNIT),
            LayerSpec::global_avg_pool(3, UNIT),
            LayerSpec::linear(3, 5, UNIT, vec![0; 15], vec![], UNIT),
        ];
        let m = ModelGraph::new(Shape::new(1, 6, 7), QuantParams::new(0.5, 3), 5, layers).unwrap();
        let x = spec(
            6,
            7,
            (0..42).map(|i| (i as f32 * 0.37).sin() * 40.0).collect(),
        );
        for p in infer(&m, &x)
            .unwrap()
            .into_iter()
            .chain(float_reference_infer(&m, &x).unwrap())
        {
            assert!((p - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn identity_pointwise_within_one_step() {
        // 1 -> 1 pointwise with unit real weight; tap the activation through a
        // linear head that also acts as identity
        let in_q = QuantParams::new(0.1, -5);
        let wq = QuantParams::new(1.0 / 127.0, 0);
        let act_q = QuantParams::new(0.1, -5);
        let layers = vec![
            LayerSpec::pointwise(1, 1, wq, vec![127], vec![], act_q),
            LayerSpec::linear(4, 4, wq, identity_weights(4), vec![], act_q),
        ];
        let m = ModelGraph::new(Shape::new(1, 2, 2), in_q, 4, layers).unwrap();
        let xs = vec![1.23, -4.56, 7.0, 0.05];
        let x = spec(2, 2, xs.clone());
        let int = infer_logits(&m, &x).unwrap();
        let float = float_reference_logits(&m, &x).unwrap();
        for ((a, b), x) in int.iter().zip(&float).zip(&xs) {
            assert!((a - b).abs() <= 0.1 + 1e-6, "{a} vs {b}");
            assert!((b - x).abs() < 1e-5);
        }
    }

    fn identity_weights(n: usize) -> Vec<i8> {
        (0..n * n)
            .map(|i| if i / n == i % n { 127 } else { 0 })
            .collect()
    }

    #[test]
    fn conv_matches_direct_definition() {
        // 2-channel input, 3 outputs, 3x3 kernel, stride 2, padding 1
        let wq = QuantParams::new(1.0, 0);
        let weights: Vec<i8> = (0..54).map(|i| ((i * 7) % 11) as i8 - 5).collect();
        let layer = LayerSpec::conv2d(2, 3, 3, 2, 1, wq, weights.clone(), vec![1, 2, 3], UNIT);
        let ins = Shape::new(2, 5, 4);
        let outs = Shape::new(3, 3, 2);
        let x: Vec<f32> = (0..40).map(|i| (i % 9) as f32 - 4.0).collect();
        let got = float_layer(&layer, ins, outs, 1.0, std::slice::from_ref(&x), 0);
        for oc in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut acc = (oc + 1) as f32;
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as i64 - 1;
                                let ix = (ox * 2 + kx) as i64 - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                let wv = weights[((oc * 2 + ic) * 3 + ky) * 3 + kx] as f32;
                                acc += wv * x[ic * 20 + iy as usize * 4 + ix as usize];
                            }
                        }
                    }
                    assert_eq!(got[oc * 6 + oy * 2 + ox], acc);
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 3.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_input_shape() {
        let layers = vec![LayerSpec::linear(3, 2, UNIT, vec![0; 6], vec![], UNIT)];
        let m = ModelGraph::new(Shape::new(1, 1, 3), UNIT, 2, layers).unwrap();
        assert!(matches!(
            infer(&m, &spec(1, 4, vec![0.0; 4])),
            Err(ModelError::Shape(_))
        ));
    }
}
