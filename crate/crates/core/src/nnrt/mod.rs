//! Int8 runtime for small inverted-residual CNNs operating on mel-spectrograms.
//!
//! A graph is a flat list of layers executed in order. Tensor `0` is the
//! quantized model input and layer `i` turns tensor `i` into tensor `i + 1`;
//! a residual add additionally reads the earlier tensor named by its
//! `skip_from` index.
//!
//! Weights are symmetric per-tensor int8, activations affine per-tensor int8,
//! accumulation in i32, and requantization multiplies by an f32 scale before
//! rounding and clamping.

mod exec;
mod fixture;
mod format;
mod resources;

use thiserror::Error;

pub use exec::{float_reference_infer, float_reference_logits, infer, infer_logits, softmax};
pub use fixture::{
    fixture_input, generate_fixture_model, synthetic_spectrogram, FIXTURE_INPUT_SHAPE,
};
pub use format::{load_model, save_model, ENM1_MAGIC, ENM1_VERSION};
pub use resources::{
    count_flops, count_flops_for, estimate_ram, estimate_rom, layer_flops, resource_report,
    ResourceReport,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayerKind {
    Conv2d = 0,
    DepthwiseConv2d = 1,
    PointwiseConv2d = 2,
    Relu6 = 3,
    ResidualAdd = 4,
    GlobalAvgPool = 5,
    Linear = 6,
}

impl LayerKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => LayerKind::Conv2d,
            1 => LayerKind::DepthwiseConv2d,
            2 => LayerKind::PointwiseConv2d,
            3 => LayerKind::Relu6,
            4 => LayerKind::ResidualAdd,
            5 => LayerKind::GlobalAvgPool,
            6 => LayerKind::Linear,
            _ => return None,
        })
    }

    pub fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d
                | LayerKind::DepthwiseConv2d
                | LayerKind::PointwiseConv2d
                | LayerKind::Linear
        )
    }
}

/// Affine quantization: `real = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub const fn new(scale: f32, zero_point: i32) -> Self {
        Self { scale, zero_point }
    }

    pub fn quantize(&self, x: f32) -> i8 {
        ((x / self.scale).round() as i64 + i64::from(self.zero_point)).clamp(-128, 127) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (i32::from(q) - self.zero_point) as f32
    }

    /// Affine parameters covering `[lo, hi]`, widened to include 0.
    pub fn from_range(lo: f32, hi: f32) -> Self {
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let span = hi - lo;
        if span <= 0.0 || !span.is_finite() {
            return Self::new(1.0 / 255.0, -128);
        }
        let scale = span / 255.0;
        let zero_point = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
        Self { scale, zero_point }
    }
}

/// Channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: u32,
    pub out_channels: u32,
    pub kernel: (u32, u32),
    pub stride: (u32, u32),
    pub padding: (u32, u32),
    /// Residual add only: index of the tensor added to this layer's input.
    pub skip_from: u32,
    pub weight_quant: QuantParams,
    /// `[out][in / groups][kh][kw]` for convolutions, `[out][in]` for linear.
    pub weights: Vec<i8>,
    /// Per output channel, at scale `input_scale * weight_scale`. May be empty.
    pub bias: Vec<i32>,
    pub output_quant: QuantParams,
}

const UNIT_QUANT: QuantParams = QuantParams::new(1.0, 0);

impl LayerSpec {
    fn bare(kind: LayerKind, channels: u32, output_quant: QuantParams) -> Self {
        Self {
            kind,
            in_channels: channels,
            out_channels: channels,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            skip_from: 0,
            weight_quant: UNIT_QUANT,
            weights: Vec::new(),
            bias: Vec::new(),
            output_quant,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        in_channels: u32,
        out_channels: u32,
        kernel: u32,
        stride: u32,
        padding: u32,
        weight_quant: QuantParams,
        weights: Vec<i8>,
        bias: Vec<i32>,
        output_quant: QuantParams,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            skip_from: 0,
            weight_quant,
            weights,
            bias,
            output_quant,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn depthwise(
        channels: u32,
        kernel: u32,
        stride: u32,
        padding: u32,
        weight_quant: QuantParams,
        weights: Vec<i8>,
        bias: Vec<i32>,
        output_quant: QuantParams,
    ) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv2d,
            ..Self::conv2d(
                channels,
                channels,
                kernel,
                stride,
                padding,
                weight_quant,
                weights,
                bias,
                output_quant,
            )
        }
    }

    pub fn pointwise(
        in_channels: u32,
        out_channels: u32,
        weight_quant: QuantParams,
        weights: Vec<i8>,
        bias: Vec<i32>,
        output_quant: QuantParams,
    ) -> Self {
        Self {
            kind: LayerKind::PointwiseConv2d,
            ..Self::conv2d(
                in_channels,
                out_channels,
                1,
                1,
                0,
                weight_quant,
                weights,
                bias,
                output_quant,
            )
        }
    }

    pub fn linear(
        in_features: u32,
        out_features: u32,
        weight_quant: QuantParams,
        weights: Vec<i8>,
        bias: Vec<i32>,
        output_quant: QuantParams,
    ) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_channels: in_features,
            out_channels: out_features,
            weight_quant,
            weights,
            bias,
            ..Self::bare(LayerKind::Linear, 0, output_quant)
        }
    }

    pub fn relu6(channels: u32, output_quant: QuantParams) -> Self {
        Self::bare(LayerKind::Relu6, channels, output_quant)
    }

    pub fn residual_add(channels: u32, skip_from: u32, output_quant: QuantParams) -> Self {
        Self {
            skip_from,
            ..Self::bare(LayerKind::ResidualAdd, channels, output_quant)
        }
    }

    pub fn global_avg_pool(channels: u32, output_quant: QuantParams) -> Self {
        Self::bare(LayerKind::GlobalAvgPool, channels, output_quant)
    }

    fn groups(&self) -> usize {
        if self.kind == LayerKind::DepthwiseConv2d {
            self.in_channels as usize
        } else {
            1
        }
    }
}

fn check_quant(q: &QuantParams, what: &str, index: usize) -> Result<()> {
    if !(q.scale > 0.0 && q.scale.is_finite()) {
        return Err(ModelError::Graph(format!(
            "layer {index}: {what} scale {} must be positive",
            q.scale
        )));
    }
    Ok(())
}

/// Propagates shapes through `layers`, returning every tensor shape
/// (input first). Fails on the first incompatible layer.
pub fn infer_shapes(input: Shape, layers: &[LayerSpec]) -> Result<Vec<Shape>> {
    let mut shapes = Vec::with_capacity(layers.len() + 1);
    shapes.push(input);
    for (i, layer) in layers.iter().enumerate() {
        let cur = shapes[i];
        check_quant(&layer.output_quant, "output", i)?;
        let in_c = layer.in_channels as usize;
        let out_c = layer.out_channels as usize;
        let expect_weights = |n: usize| -> Result<()> {
            check_quant(&layer.weight_quant, "weight", i)?;
            if layer.weights.len() != n {
                return Err(ModelError::Graph(format!(
                    "layer {i}: expected {n} weights, found {}",
                    layer.weights.len()
                )));
            }
            if !layer.bias.is_empty() && layer.bias.len() != out_c {
                return Err(ModelError::Graph(format!(
                    "layer {i}: bias has {} entries for {out_c} outputs",
                    layer.bias.len()
                )));
            }
            Ok(())
        };
        let next = match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d => {
                if in_c != cur.c {
                    return Err(ModelError::Graph(format!(
                        "layer {i}: expects {in_c} input channels, tensor has {}",
                        cur.c
                    )));
                }
                let (kh, kw) = (layer.kernel.0 as usize, layer.kernel.1 as usize);
                let (sh, sw) = (layer.stride.0 as usize, layer.stride.1 as usize);
                let (ph, pw) = (layer.padding.0 as usize, layer.padding.1 as usize);
                if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
                    return Err(ModelError::Graph(format!(
                        "layer {i}: zero kernel or stride"
                    )));
                }
                if layer.kind == LayerKind::PointwiseConv2d && (kh, kw) != (1, 1) {
                    return Err(ModelError::Graph(format!(
                        "layer {i}: pointwise kernel must be 1x1"
                    )));
                }
                if layer.kind == LayerKind::DepthwiseConv2d && in_c != out_c {
                    return Err(ModelError::Graph(format!(
                        "layer {i}: depthwise conv must keep channel count"
                    )));
                }
                if cur.h + 2 * ph < kh || cur.w + 2 * pw < kw {
                    return Err(ModelError::Graph(format!(
                        "layer {i}: kernel larger than input"
                    )));
                }
                expect_weights(out_c * (in_c / layer.groups()) * kh * kw)?;
                Shape::new(
                    out_c,
                    (cur.h + 2 * ph - kh) / sh + 1,
                    (cur.w + 2 * pw - kw) / sw + 1,
                )
            }
            LayerKind::Relu6 | LayerKind::GlobalAvgPool | LayerKind::ResidualAdd => {
                if in_c != cur.c || out_c != cur.c {
                    return Err(ModelError::Graph(format!(
                        "layer {i}: declared {in_c}->{out_c} channels on a {}-channel tensor",
                        cur.c
                    )));
                }
                match layer.kind {
                    LayerKind::GlobalAvgPool => Shape::new(cur.c, 1, 1),
                    LayerKind::ResidualAdd => {
                        let j = layer.skip_from as usize;
                        if j > i {
                            return Err(ModelError::Graph(format!(
                                "layer {i}: skip source {j} is not an earlier tensor"
                            )));
                        }
                        if shapes[j] != cur {
                            return Err(ModelError::Graph(format!(
                                "layer {i}: residual operands {:?} and {:?} differ",
                                shapes[j], cur
                            )));
                        }
                        cur
                    }
                    _ => cur,
                }
            }
            LayerKind::Linear => {
                if in_c != cur.numel() {
                    return Err(ModelError::Graph(format!(
                        "layer {i}: linear expects {in_c} inputs, tensor has {}",
                        cur.numel()
                    )));
                }
                expect_weights(out_c * in_c)?;
                Shape::new(out_c, 1, 1)
            }
        };
        if next.numel() == 0 {
            return Err(ModelError::Graph(format!(
                "layer {i}: produces an empty tensor"
            )));
        }
        shapes.push(next);
    }
    Ok(shapes)
}

/// A validated int8 model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Shape,
    input_quant: QuantParams,
    class_count: u32,
    layers: Vec<LayerSpec>,
    metadata: Vec<u8>,
    shapes: Vec<Shape>,
}

impl ModelGraph {
    pub fn new(
        input_shape: Shape,
        input_quant: QuantParams,
        class_count: u32,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        Self::with_metadata(input_shape, input_quant, class_count, layers, Vec::new())
    }

    /// `metadata` is an opaque constant blob stored with the model (e.g. class labels).
    pub fn with_metadata(
        input_shape: Shape,
        input_quant: QuantParams,
        class_count: u32,
        layers: Vec<LayerSpec>,
        metadata: Vec<u8>,
    ) -> Result<Self> {
        if input_shape.c != 1 {
            return Err(ModelError::Graph(format!(
                "model input must have one channel, got {}",
                input_shape.c
            )));
        }
        if input_shape.numel() == 0 {
            return Err(ModelError::Graph("empty input shape".into()));
        }
        check_quant(&input_quant, "input", 0)?;
        if class_count == 0 {
            return Err(ModelError::Graph("class count must be positive".into()));
        }
        match layers.last() {
            Some(l) if l.kind == LayerKind::Linear && l.out_channels == class_count => {}
            _ => {
                return Err(ModelError::Graph(format!(
                    "last layer must be linear with {class_count} outputs"
                )))
            }
        }
        let shapes = infer_shapes(input_shape, &layers)?;
        Ok(Self {
            input_shape,
            input_quant,
            class_count,
            layers,
            metadata,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_quant(&self) -> QuantParams {
        self.input_quant
    }

    pub fn class_count(&self) -> u32 {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn metadata(&self) -> &[u8] {
        &self.metadata
    }

    /// Shapes of all tensors, model input first.
    pub fn tensor_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Quantization of tensor `i` (0 = model input).
    pub fn tensor_quant(&self, i: usize) -> QuantParams {
        if i == 0 {
            self.input_quant
        } else {
            self.layers[i - 1].output_quant
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q: QuantParams = QuantParams::new(0.1, 0);

    fn tiny() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv2d(1, 4, 3, 1, 1, Q, vec![1; 36], vec![], Q),
            LayerSpec::relu6(4, Q),
            LayerSpec::global_avg_pool(4, Q),
            LayerSpec::linear(4, 2, Q, vec![1; 8], vec![0, 0], Q),
        ]
    }

    #[test]
    fn shapes_propagate() {
        let m = ModelGraph::new(Shape::new(1, 8, 10), Q, 2, tiny()).unwrap();
        let s = m.tensor_shapes();
        assert_eq!(s[1], Shape::new(4, 8, 10));
        assert_eq!(s[3], Shape::new(4, 1, 1));
        assert_eq!(s[4], Shape::new(2, 1, 1));
    }

    #[test]
    fn linear_dim_mismatch() {
        let mut layers = tiny();
        layers[3] = LayerSpec::linear(5, 2, Q, vec![1; 10], vec![], Q);
        assert!(matches!(
            ModelGraph::new(Shape::new(1, 8, 10), Q, 2, layers),
            Err(ModelError::Graph(_))
        ));
    }

    #[test]
    fn head_and_input_invariants() {
        assert!(ModelGraph::new(Shape::new(2, 8, 10), Q, 2, tiny()).is_err());
        assert!(ModelGraph::new(Shape::new(1, 8, 10), Q, 3, tiny()).is_err());
        let mut layers = tiny();
        layers.pop();
        assert!(ModelGraph::new(Shape::new(1, 8, 10), Q, 4, layers).is_err());
    }

    #[test]
    fn residual_shapes_checked() {
        let mut layers = tiny();
        layers.insert(2, LayerSpec::residual_add(4, 1, Q));
        assert!(ModelGraph::new(Shape::new(1, 8, 10), Q, 2, layers.clone()).is_ok());
        layers[2].skip_from = 0;
        assert!(ModelGraph::new(Shape::new(1, 8, 10), Q, 2, layers.clone()).is_err());
        layers[2].skip_from = 7;
        assert!(ModelGraph::new(Shape::new(1, 8, 10), Q, 2, layers).is_err());
    }

    #[test]
    fn bad_scales_rejected() {
        let mut layers = tiny();
        layers[1].output_quant.scale = 0.0;
        assert!(ModelGraph::new(Shape::new(1, 8, 10), Q, 2, layers).is_err());
    }

    #[test]
    fn quant_range_covers_zero() {
        let q = QuantParams::from_range(0.0, 6.0);
        assert_eq!(q.zero_point, -128);
        assert_eq!(q.quantize(0.0), -128);
        assert_eq!(q.quantize(6.0), 127);
        let q = QuantParams::from_range(-80.0, 0.0);
        assert_eq!(q.zero_point, 127);
        assert_eq!(q.quantize(-80.0), -128);
    }
}
