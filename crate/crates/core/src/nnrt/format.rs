//! `ENM1` model container (little-endian).
//!
//! ```text
//! header   "ENM1" | version u32 | layer_count u32 | class_count u32
//!          | in_c u32 | in_h u32 | in_w u32 | input_scale f32 | input_zp i32
//!          | metadata_len u32 | metadata [u8]
//! layer    kind u8 | in_ch u32 | out_ch u32 | kh u32 | kw u32 | sh u32 | sw u32
//!          | ph u32 | pw u32 | skip_from u32
//!          | weight_scale f32 | weight_zp i32 | out_scale f32 | out_zp i32
//!          | weight_count u32 | weights [i8] | bias_count u32 | bias [i32]
//! ```

use super::{LayerKind, LayerSpec, ModelError, ModelGraph, QuantParams, Result, Shape};

pub const ENM1_MAGIC: &[u8; 4] = b"ENM1";
pub const ENM1_VERSION: u32 = 1;

pub(crate) const HEADER_BYTES: usize = 4 + 4 * 9;
pub(crate) const LAYER_FIXED_BYTES: usize = 1 + 4 * 9 + 16 + 4 + 4;

pub fn save_model(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(super::resources::encoded_len(model));
    let shape = model.input_shape();
    let iq = model.input_quant();
    out.extend_from_slice(ENM1_MAGIC);
    for v in [
        ENM1_VERSION,
        model.layers().len() as u32,
        model.class_count(),
        shape.c as u32,
        shape.h as u32,
        shape.w as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&iq.scale.to_le_bytes());
    out.extend_from_slice(&iq.zero_point.to_le_bytes());
    out.extend_from_slice(&(model.metadata().len() as u32).to_le_bytes());
    out.extend_from_slice(model.metadata());

    for l in model.layers() {
        out.push(l.kind as u8);
        for v in [
            l.in_channels,
            l.out_channels,
            l.kernel.0,
            l.kernel.1,
            l.stride.0,
            l.stride.1,
            l.padding.0,
            l.padding.1,
            l.skip_from,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&l.weight_quant.scale.to_le_bytes());
        out.extend_from_slice(&l.weight_quant.zero_point.to_le_bytes());
        out.extend_from_slice(&l.output_quant.scale.to_le_bytes());
        out.extend_from_slice(&l.output_quant.zero_point.to_le_bytes());
        out.extend_from_slice(&(l.weights.len() as u32).to_le_bytes());
        out.extend(l.weights.iter().map(|&w| w as u8));
        out.extend_from_slice(&(l.bias.len() as u32).to_le_bytes());
        for b in &l.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(self.u32()? as i32)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn quant(&mut self) -> Result<QuantParams> {
        Ok(QuantParams::new(self.f32()?, self.i32()?))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses and validates an `ENM1` model.
pub fn load_model(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != ENM1_MAGIC {
        return Err(ModelError::Format("bad magic, expected ENM1".into()));
    }
    let version = r.u32()?;
    if version != ENM1_VERSION {
        return Err(ModelError::Format(format!("unsupported version {version}")));
    }
    let layer_count = r.u32()? as usize;
    let class_count = r.u32()?;
    let shape = Shape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let input_quant = r.quant()?;
    let meta_len = r.u32()? as usize;
    let metadata = r.take(meta_len)?.to_vec();

    if layer_count > r.remaining() / LAYER_FIXED_BYTES {
        return Err(ModelError::Format(format!(
            "{layer_count} layers cannot fit in {} bytes",
            r.remaining()
        )));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let kind_byte = r.u8()?;
        let kind = LayerKind::from_u8(kind_byte)
            .ok_or_else(|| ModelError::Format(format!("layer {i}: unknown kind {kind_byte}")))?;
        let mut dims = [0u32; 9];
        for d in dims.iter_mut() {
            *d = r.u32()?;
        }
        let weight_quant = r.quant()?;
        let output_quant = r.quant()?;
        let n_weights = r.u32()? as usize;
        let weights = r.take(n_weights)?.iter().map(|&b| b as i8).collect();
        let n_bias = r.u32()? as usize;
        let bias_bytes = r.take(
            n_bias
                .checked_mul(4)
                .ok_or_else(|| ModelError::Format(format!("layer {i}: bias count overflows")))?,
        )?;
        let bias = bias_bytes
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        layers.push(LayerSpec {
            kind,
            in_channels: dims[0],
            out_channels: dims[1],
            kernel: (dims[2], dims[3]),
            stride: (dims[4], dims[5]),
            padding: (dims[6], dims[7]),
            skip_from: dims[8],
            weight_quant,
            weights,
            bias,
            output_quant,
        });
    }
    if r.remaining() != 0 {
        return Err(ModelError::Format(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    ModelGraph::with_metadata(shape, input_quant, class_count, layers, metadata)
}
