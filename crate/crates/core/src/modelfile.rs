//! The TBN1 model container and the storage / memory / bit-ops
//! accounting that goes with it.
//!
//! TBN1 is a little-endian binary format: a fixed header, one record per
//! layer (shape, mode, tiling factor, alphas, then the payload — packed
//! tile bits for binary modes, f32 words for dense and fp-tiled modes),
//! and a trailing CRC32 (IEEE) over everything before it. The byte layout
//! is documented field-by-field in `docs/format.md`.
//!
//! Accounting is not an estimate of the format: payload byte counts in
//! the reports are exactly the byte lengths of the serialized sections.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{pack_tile, PackedBitMatrix};
use crate::layers::{
    Conv2dLayer, Layer, LayerMode, LayerParams, LayerSlot, LinearLayer, Model, ModelMeta,
    Normalization,
};
use crate::tensor::{Shape, Tensor};
use crate::tiling::{self, AlphaMode, AlphaSet, AlphaSource, Tile, TileSpec};

pub const MAGIC: [u8; 4] = *b"TBN1";
pub const FORMAT_VERSION: u32 = 1;

const KIND_LINEAR: u8 = 0;
const KIND_CONV2D: u8 = 1;

fn mode_tag(mode: LayerMode) -> u8 {
    match mode {
        LayerMode::Dense => 0,
        LayerMode::BinaryWeight => 1,
        LayerMode::Tiled => 2,
        LayerMode::TiledFp => 3,
    }
}

fn mode_from_tag(tag: u8) -> Result<LayerMode> {
    Ok(match tag {
        0 => LayerMode::Dense,
        1 => LayerMode::BinaryWeight,
        2 => LayerMode::Tiled,
        3 => LayerMode::TiledFp,
        other => {
            return Err(Error::InvalidConfig(format!("unknown layer mode tag {other}")))
        }
    })
}

// ── Layer records ──────────────────────────────────────────────────────

/// Payload of one serialized layer.
#[derive(Clone, Debug)]
pub enum RecordPayload {
    /// Packed tile bits: q bits for `Tiled`, N bits for `BinaryWeight`.
    Bits(PackedBitMatrix),
    /// f32 words: the full weights (`Dense`) or the fp tile (`TiledFp`).
    Floats(Vec<f32>),
}

/// One layer as stored on disk.
#[derive(Clone, Debug)]
pub struct LayerRecord {
    pub kind: u8,
    pub mode: LayerMode,
    pub relu_after: bool,
    pub dims: Vec<u64>,
    pub stride: u32,
    pub padding: u32,
    pub p: u64,
    pub q: u64,
    pub alpha_mode: AlphaMode,
    pub alpha_source: AlphaSource,
    pub alpha_values: Vec<f32>,
    pub payload: RecordPayload,
}

impl LayerRecord {
    /// Byte length of the alpha + payload sections (what the storage
    /// report must agree with exactly).
    pub fn payload_bytes(&self) -> u64 {
        let payload = match &self.payload {
            RecordPayload::Bits(p) => p.byte_len(),
            RecordPayload::Floats(f) => 4 * f.len(),
        };
        4 * self.alpha_values.len() as u64 + payload as u64
    }

    fn from_slot(slot: &LayerSlot) -> Result<LayerRecord> {
        let layer = &slot.layer;
        let dims: Vec<u64> = layer.weight_dims().iter().map(|&d| d as u64).collect();
        let (kind, stride, padding) = match layer {
            Layer::Linear(_) => (KIND_LINEAR, 1, 0),
            Layer::Conv2d(c) => (KIND_CONV2D, c.stride as u32, c.padding as u32),
        };
        let n: u64 = dims.iter().product();
        let (p, q, alpha_mode, alpha_source, alpha_values, payload) = match layer.params() {
            LayerParams::Dense { weights } | LayerParams::FrozenDense { weights } => (
                1,
                n,
                AlphaMode::PerLayer,
                AlphaSource::FromW,
                Vec::new(),
                RecordPayload::Floats(weights.data().to_vec()),
            ),
            LayerParams::Binary(state) => {
                let scores = tiling::aggregate(&state.weights, &state.spec)?;
                let tile = tiling::threshold(&scores);
                let src = match state.alpha_source {
                    AlphaSource::FromW => &state.weights,
                    AlphaSource::FromA => state.alpha_weights.as_ref().expect("FromA carries A"),
                };
                let alphas =
                    tiling::compute_alphas(src, &state.spec, state.alpha_mode, state.alpha_source)?;
                (
                    state.spec.p() as u64,
                    state.spec.q() as u64,
                    state.alpha_mode,
                    state.alpha_source,
                    alphas.values,
                    RecordPayload::Bits(pack_tile(&tile)),
                )
            }
            LayerParams::FrozenBinary { tile, spec, alphas } => (
                spec.p() as u64,
                spec.q() as u64,
                alphas.mode,
                alphas.source,
                alphas.values.clone(),
                RecordPayload::Bits(pack_tile(tile)),
            ),
            LayerParams::FpTiled { weights, spec } => {
                let (tile_fp, _) = tiling::tiled_forward_fp(weights, spec)?;
                (
                    spec.p() as u64,
                    spec.q() as u64,
                    AlphaMode::PerLayer,
                    AlphaSource::FromW,
                    Vec::new(),
                    RecordPayload::Floats(tile_fp),
                )
            }
            LayerParams::FrozenFpTiled { tile, spec } => (
                spec.p() as u64,
                spec.q() as u64,
                AlphaMode::PerLayer,
                AlphaSource::FromW,
                Vec::new(),
                RecordPayload::Floats(tile.clone()),
            ),
        };
        Ok(LayerRecord {
            kind,
            mode: layer.mode(),
            relu_after: slot.relu_after,
            dims,
            stride,
            padding,
            p,
            q,
            alpha_mode,
            alpha_source,
            alpha_values,
            payload,
        })
    }

    fn into_slot(self) -> Result<LayerSlot> {
        let dims: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        let n: usize = dims.iter().product();
        let spec = TileSpec::new(self.p as usize, n)?;
        if spec.q() != self.q as usize {
            return Err(Error::InvalidConfig(format!(
                "record q={} disagrees with N/p={}",
                self.q,
                spec.q()
            )));
        }
        let params = match (self.mode, self.payload) {
            (LayerMode::Dense, RecordPayload::Floats(f)) => LayerParams::FrozenDense {
                weights: Tensor::new(Shape::new(&dims)?, f)?,
            },
            (LayerMode::TiledFp, RecordPayload::Floats(f)) => {
                if f.len() != spec.q() {
                    return Err(Error::Truncated("fp tile length mismatch".into()));
                }
                LayerParams::FrozenFpTiled { tile: f, spec }
            }
            (LayerMode::BinaryWeight | LayerMode::Tiled, RecordPayload::Bits(bits)) => {
                if bits.rows() != spec.q() {
                    return Err(Error::Truncated("tile bit count mismatch".into()));
                }
                let values = crate::kernels::unpack_bits(&bits).into_data();
                LayerParams::FrozenBinary {
                    tile: Tile::new(values)?,
                    spec,
                    alphas: AlphaSet {
                        mode: self.alpha_mode,
                        source: self.alpha_source,
                        values: self.alpha_values,
                    },
                }
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "payload type does not match layer mode".into(),
                ))
            }
        };
        let layer = match self.kind {
            KIND_LINEAR => {
                let (out, inf) = match dims.as_slice() {
                    &[o, i] => (o, i),
                    _ => return Err(Error::InvalidConfig("linear record needs 2 dims".into())),
                };
                Layer::Linear(LinearLayer::from_params(out, inf, self.mode, params))
            }
            KIND_CONV2D => {
                let (oc, ic, kh, kw) = match dims.as_slice() {
                    &[a, b, c, d] => (a, b, c, d),
                    _ => return Err(Error::InvalidConfig("conv record needs 4 dims".into())),
                };
                Layer::Conv2d(Conv2dLayer::from_params(
                    oc,
                    ic,
                    kh,
                    kw,
                    self.stride as usize,
                    self.padding as usize,
                    self.mode,
                    params,
                ))
            }
            other => return Err(Error::InvalidConfig(format!("unknown layer kind {other}"))),
        };
        Ok(LayerSlot {
            layer,
            relu_after: self.relu_after,
        })
    }
}

// ── Wire encoding ──────────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .buf
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Truncated(format!("need {n} bytes at offset {}", self.at)))?;
        self.at += n;
        Ok(slice)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Serialize a model to TBN1 bytes.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(model.meta.lambda);
    w.u64(model.meta.seed);
    w.u32(match model.meta.normalization {
        Normalization::UnitScale => 0,
    });
    w.u32(model.slots.len() as u32);
    for slot in &model.slots {
        let rec = LayerRecord::from_slot(slot)?;
        w.u8(rec.kind);
        w.u8(mode_tag(rec.mode));
        w.u8(match rec.alpha_mode {
            AlphaMode::PerLayer => 0,
            AlphaMode::PerTile => 1,
        });
        w.u8(match rec.alpha_source {
            AlphaSource::FromW => 0,
            AlphaSource::FromA => 1,
        });
        w.u8(rec.relu_after as u8);
        w.u8(rec.dims.len() as u8);
        for &d in &rec.dims {
            w.u64(d);
        }
        if rec.kind == KIND_CONV2D {
            w.u32(rec.stride);
            w.u32(rec.padding);
        }
        w.u64(rec.p);
        w.u64(rec.q);
        w.u32(rec.alpha_values.len() as u32);
        w.f32s(&rec.alpha_values);
        match &rec.payload {
            RecordPayload::Bits(bits) => {
                w.u64(bits.byte_len() as u64);
                w.buf.extend_from_slice(bits.bytes());
            }
            RecordPayload::Floats(f) => {
                w.u64(4 * f.len() as u64);
                w.f32s(f);
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

/// Write the TBN1 encoding of `model` to `path`.
pub fn serialize(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse TBN1 bytes into an inference-ready model (frozen layers).
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 4 + 4 + 4 {
        return Err(Error::Truncated(format!("{} bytes is no TBN1 file", bytes.len())));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    let mut r = Reader { buf: body, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: "<bytes>".into(),
            got: u32::from_le_bytes(magic.try_into().expect("4 bytes")),
            expected: u32::from_le_bytes(MAGIC),
        });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let lambda = r.u64()?;
    let seed = r.u64()?;
    let normalization = match r.u32()? {
        0 => Normalization::UnitScale,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown normalization tag {other}"
            )))
        }
    };
    let layer_count = r.u32()? as usize;
    let mut slots = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = r.u8()?;
        let mode = mode_from_tag(r.u8()?)?;
        let alpha_mode = match r.u8()? {
            0 => AlphaMode::PerLayer,
            1 => AlphaMode::PerTile,
            other => {
                return Err(Error::InvalidConfig(format!("unknown alpha mode tag {other}")))
            }
        };
        let alpha_source = match r.u8()? {
            0 => AlphaSource::FromW,
            1 => AlphaSource::FromA,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown alpha source tag {other}"
                )))
            }
        };
        let relu_after = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()?);
        }
        let (stride, padding) = if kind == KIND_CONV2D {
            (r.u32()?, r.u32()?)
        } else {
            (1, 0)
        };
        let p = r.u64()?;
        let q = r.u64()?;
        let alpha_count = r.u32()? as usize;
        let mut alpha_values = Vec::with_capacity(alpha_count);
        for _ in 0..alpha_count {
            let b = r.take(4)?;
            alpha_values.push(f32::from_le_bytes(b.try_into().expect("4 bytes")));
        }
        let payload_len = r.u64()? as usize;
        let payload_bytes = r.take(payload_len)?;
        let payload = match mode {
            LayerMode::Dense | LayerMode::TiledFp => {
                if payload_len % 4 != 0 {
                    return Err(Error::Truncated("float payload not 4-byte aligned".into()));
                }
                RecordPayload::Floats(
                    payload_bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                )
            }
            LayerMode::BinaryWeight | LayerMode::Tiled => {
                // Rebuild the q x 1 packed matrix from raw bytes.
                let bits = packed_from_bytes(q as usize, payload_bytes)?;
                RecordPayload::Bits(bits)
            }
        };
        slots.push(
            LayerRecord {
                kind,
                mode,
                relu_after,
                dims,
                stride,
                padding,
                p,
                q,
                alpha_mode,
                alpha_source,
                alpha_values,
                payload,
            }
            .into_slot()?,
        );
    }
    if r.at != body.len() {
        return Err(Error::Truncated(format!(
            "{} trailing bytes after last record",
            body.len() - r.at
        )));
    }
    Ok(Model::new(
        slots,
        ModelMeta {
            lambda,
            seed,
            normalization,
        },
    ))
}

fn packed_from_bytes(rows: usize, bytes: &[u8]) -> Result<PackedBitMatrix> {
    if bytes.len() != rows.div_ceil(8) {
        return Err(Error::Truncated(format!(
            "expected {} tile bytes, found {}",
            rows.div_ceil(8),
            bytes.len()
        )));
    }
    // Round-trip through the bit accessors to keep one canonical layout.
    let mut values = Vec::with_capacity(rows);
    for r in 0..rows {
        let bit = bytes[r / 8] >> (7 - r % 8) & 1;
        values.push(if bit == 1 { 1.0 } else { -1.0 });
    }
    let t = Tensor::new(Shape::new(&[rows, 1])?, values)?;
    crate::kernels::pack_bits(&t)
}

/// Read and parse a TBN1 file.
pub fn deserialize(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}

// ── Accounting ─────────────────────────────────────────────────────────

/// Reported sizes use decimal kilobytes (1 KB = 1000 bytes); that is the
/// convention under which the reference storage table reproduces.
pub const KB: f64 = 1000.0;

#[derive(Clone, Debug, serde::Serialize)]
pub struct LayerAccounting {
    pub index: usize,
    pub kind: String,
    pub mode: LayerMode,
    pub params: u64,
    pub p: u64,
    pub q: u64,
    pub alpha_count: u64,
    /// Stored payload bits: tile/weight bits plus 32 per alpha.
    pub storage_bits: u64,
    /// Exact byte length of the serialized alpha + payload sections.
    pub payload_bytes: u64,
    /// Bytes resident while this layer executes: activations + weights.
    pub input_bytes: Option<u64>,
    pub output_bytes: Option<u64>,
    pub resident_weight_bytes: u64,
    pub layer_memory_bytes: Option<u64>,
    /// Binary multiply-accumulates per unit application (N for a dense
    /// pass) and after replicated outputs are computed once.
    pub bitops_dense: u64,
    pub bitops_effective: u64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AccountingReport {
    pub layers: Vec<LayerAccounting>,
    pub total_params: u64,
    /// Sum of per-layer storage bits (weights + alphas).
    pub total_storage_bits: u64,
    /// Weight payload bits only (no alphas).
    pub weight_bits: u64,
    /// Headline figure. A model with tiled layers counts its alpha bytes;
    /// an all-binary model counts weight bits only — each is the
    /// convention its reference figure was printed under.
    pub storage_kb: f64,
    pub bitwidth_per_param: f64,
    pub savings_vs_binary: f64,
    pub peak_layer_memory_bytes: Option<u64>,
    pub peak_memory_kb: Option<f64>,
    pub total_bitops_dense: u64,
    pub total_bitops_effective: u64,
}

fn layer_info(layer: &Layer) -> (u64, u64, u64, u64) {
    // (n, p, q, alpha_count)
    let n: u64 = layer.weight_dims().iter().map(|&d| d as u64).product();
    match layer.params() {
        LayerParams::Dense { .. } | LayerParams::FrozenDense { .. } => (n, 1, n, 0),
        LayerParams::Binary(state) => {
            let alphas = match state.alpha_mode {
                AlphaMode::PerLayer => 1,
                AlphaMode::PerTile => state.spec.p() as u64,
            };
            (n, state.spec.p() as u64, state.spec.q() as u64, alphas)
        }
        LayerParams::FrozenBinary { spec, alphas, .. } => (
            n,
            spec.p() as u64,
            spec.q() as u64,
            alphas.values.len() as u64,
        ),
        LayerParams::FpTiled { spec, .. } | LayerParams::FrozenFpTiled { spec, .. } => {
            (n, spec.p() as u64, spec.q() as u64, 0)
        }
    }
}

fn alpha_mode_of(layer: &Layer) -> AlphaMode {
    match layer.params() {
        LayerParams::Binary(state) => state.alpha_mode,
        LayerParams::FrozenBinary { alphas, .. } => alphas.mode,
        _ => AlphaMode::PerLayer,
    }
}

fn account(model: &Model, input_dims: Option<&[usize]>) -> Result<AccountingReport> {
    let mut layers = Vec::new();
    let mut cur_dims: Option<Vec<usize>> = input_dims.map(|d| d.to_vec());
    for (index, slot) in model.slots.iter().enumerate() {
        let layer = &slot.layer;
        let (n, p, q, alpha_count) = layer_info(layer);
        let mode = layer.mode();
        let storage_bits = match mode {
            LayerMode::Tiled => q + 32 * alpha_count,
            LayerMode::BinaryWeight => n + 32 * alpha_count,
            LayerMode::Dense => 32 * n,
            LayerMode::TiledFp => 32 * q,
        };
        let payload_bytes = match mode {
            LayerMode::Tiled | LayerMode::BinaryWeight => q.div_ceil(8) + 4 * alpha_count,
            LayerMode::Dense => 4 * n,
            LayerMode::TiledFp => 4 * q,
        };
        let resident_weight_bytes = match mode {
            LayerMode::Tiled | LayerMode::BinaryWeight => q.div_ceil(8) + 4 * alpha_count,
            LayerMode::Dense => 4 * n,
            LayerMode::TiledFp => 4 * q,
        };

        // Activation chain for the memory report.
        let (input_bytes, output_bytes) = match (&mut cur_dims, layer) {
            (Some(dims), Layer::Linear(l)) => {
                let in_elems: usize = dims.iter().product();
                if in_elems != l.in_features {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {index}: input dims {:?} do not chain into {} features",
                        dims, l.in_features
                    )));
                }
                let out = l.out_features;
                *dims = vec![out];
                (Some(4 * in_elems as u64), Some(4 * out as u64))
            }
            (Some(dims), Layer::Conv2d(c)) => {
                let (ic, h, w) = match dims.as_slice() {
                    &[ic, h, w] => (ic, h, w),
                    other => {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {index}: conv input dims {other:?} must be (c,h,w)"
                        )))
                    }
                };
                if ic != c.in_ch {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {index}: conv input has {ic} channels, layer expects {}",
                        c.in_ch
                    )));
                }
                let span_h = h + 2 * c.padding;
                let span_w = w + 2 * c.padding;
                if span_h < c.kh || span_w < c.kw {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {index}: kernel exceeds padded input"
                    )));
                }
                let oh = (span_h - c.kh) / c.stride + 1;
                let ow = (span_w - c.kw) / c.stride + 1;
                let in_elems = ic * h * w;
                let out_elems = c.out_ch * oh * ow;
                *dims = vec![c.out_ch, oh, ow];
                (Some(4 * in_elems as u64), Some(4 * out_elems as u64))
            }
            (None, _) => (None, None),
        };
        let layer_memory_bytes = match (input_bytes, output_bytes) {
            (Some(i), Some(o)) => Some(i + o + resident_weight_bytes),
            _ => None,
        };

        // Bit-ops: replicated outputs are computed once when the tile
        // covers whole output units under a single alpha.
        let unit = match layer {
            Layer::Linear(l) => l.in_features as u64,
            Layer::Conv2d(c) => (c.in_ch * c.kh * c.kw) as u64,
        };
        let reducible =
            mode == LayerMode::Tiled && alpha_mode_of(layer) == AlphaMode::PerLayer && q % unit == 0;
        let bitops_effective = if reducible { n / p } else { n };

        layers.push(LayerAccounting {
            index,
            kind: match layer {
                Layer::Linear(_) => "linear".into(),
                Layer::Conv2d(_) => "conv2d".into(),
            },
            mode,
            params: n,
            p,
            q,
            alpha_count,
            storage_bits,
            payload_bytes,
            input_bytes,
            output_bytes,
            resident_weight_bytes,
            layer_memory_bytes,
            bitops_dense: n,
            bitops_effective,
        });
    }

    let total_params: u64 = layers.iter().map(|l| l.params).sum();
    let total_storage_bits: u64 = layers.iter().map(|l| l.storage_bits).sum();
    let alpha_bits: u64 = layers.iter().map(|l| 32 * l.alpha_count).sum();
    let weight_bits = total_storage_bits - alpha_bits;
    let has_tiled = layers
        .iter()
        .any(|l| matches!(l.mode, LayerMode::Tiled | LayerMode::TiledFp));
    // Reference-table conventions: the all-binary figure counts weight
    // bits only; the tiled figure includes alpha bytes.
    let headline_bits = if has_tiled { total_storage_bits } else { weight_bits };
    let storage_kb = headline_bits as f64 / 8.0 / KB;
    let peak_layer_memory_bytes = layers.iter().filter_map(|l| l.layer_memory_bytes).max();

    Ok(AccountingReport {
        total_params,
        total_storage_bits,
        weight_bits,
        storage_kb,
        bitwidth_per_param: total_storage_bits as f64 / total_params as f64,
        savings_vs_binary: total_params as f64 / total_storage_bits as f64,
        peak_layer_memory_bytes,
        peak_memory_kb: peak_layer_memory_bytes.map(|b| b as f64 / KB),
        total_bitops_dense: layers.iter().map(|l| l.bitops_dense).sum(),
        total_bitops_effective: layers.iter().map(|l| l.bitops_effective).sum(),
        layers,
    })
}

/// Stored-size accounting (bits, bitwidth per parameter, headline KB).
pub fn storage_report(model: &Model) -> Result<AccountingReport> {
    account(model, None)
}

/// Peak resident memory per layer: input + output activations plus the
/// layer's resident weights, chained from `input_dims`.
pub fn memory_report(model: &Model, input_dims: &[usize]) -> Result<AccountingReport> {
    account(model, Some(input_dims))
}

/// Binary multiply-accumulate counts with the replicated-output reduction.
pub fn bitops_report(model: &Model) -> Result<AccountingReport> {
    account(model, None)
}
