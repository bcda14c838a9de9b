//! FLOPs, peak activation memory and parameter storage of a graph.
//!
//! FLOPs count one multiply-accumulate as two operations. Element-wise
//! layers (ReLU6, residual add) and global pooling count one operation per
//! output element. Bias additions are not counted.

use super::format::{HEADER_BYTES, LAYER_FIXED_BYTES};
use super::{infer_shapes, LayerKind, LayerSpec, ModelGraph, Result, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceReport {
    pub flops: u64,
    /// Peak bytes of simultaneously live int8 activations.
    pub ram_bytes: u64,
    /// Weights, biases, quantization parameters and graph metadata.
    pub rom_bytes: u64,
}

pub fn layer_flops(layer: &LayerSpec, input: Shape, output: Shape) -> u64 {
    let (kh, kw) = (u64::from(layer.kernel.0), u64::from(layer.kernel.1));
    let out_px = (output.h * output.w) as u64;
    match layer.kind {
        LayerKind::Conv2d | LayerKind::PointwiseConv2d => {
            2 * kh * kw * input.c as u64 * output.c as u64 * out_px
        }
        LayerKind::DepthwiseConv2d => 2 * kh * kw * output.c as u64 * out_px,
        LayerKind::Linear => 2 * u64::from(layer.in_channels) * u64::from(layer.out_channels),
        LayerKind::Relu6 | LayerKind::ResidualAdd | LayerKind::GlobalAvgPool => {
            output.numel() as u64
        }
    }
}

/// FLOPs of an arbitrary layer chain starting from `input`.
pub fn count_flops_for(input: Shape, layers: &[LayerSpec]) -> Result<u64> {
    let shapes = infer_shapes(input, layers)?;
    Ok(layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_flops(l, shapes[i], shapes[i + 1]))
        .sum())
}

pub fn count_flops(model: &ModelGraph) -> u64 {
    let shapes = model.tensor_shapes();
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| layer_flops(l, shapes[i], shapes[i + 1]))
        .sum()
}

/// Peak over execution steps of input + output + earlier tensors still
/// awaited by a residual add, one byte per element.
pub fn estimate_ram(model: &ModelGraph) -> u64 {
    let shapes = model.tensor_shapes();
    let layers = model.layers();
    // last_use[j] = index of the last layer that reads tensor j as a skip operand
    let mut last_skip_use: Vec<Option<usize>> = vec![None; shapes.len()];
    for (k, l) in layers.iter().enumerate() {
        if l.kind == LayerKind::ResidualAdd {
            let j = l.skip_from as usize;
            last_skip_use[j] = Some(last_skip_use[j].map_or(k, |u| u.max(k)));
        }
    }
    (0..layers.len())
        .map(|i| {
            let held: usize = (0..i)
                .filter(|&j| last_skip_use[j].is_some_and(|k| k >= i))
                .map(|j| shapes[j].numel())
                .sum();
            (shapes[i].numel() + shapes[i + 1].numel() + held) as u64
        })
        .max()
        .unwrap_or(0)
}

pub(crate) fn encoded_len(model: &ModelGraph) -> usize {
    HEADER_BYTES
        + model.metadata().len()
        + model
            .layers()
            .iter()
            .map(|l| LAYER_FIXED_BYTES + l.weights.len() + 4 * l.bias.len())
            .sum::<usize>()
}

/// Size of the serialized model: every constant the deployed binary carries.
pub fn estimate_rom(model: &ModelGraph) -> u64 {
    encoded_len(model) as u64
}

pub fn resource_report(model: &ModelGraph) -> ResourceReport {
    ResourceReport {
        flops: count_flops(model),
        ram_bytes: estimate_ram(model),
        rom_bytes: estimate_rom(model),
    }
}
