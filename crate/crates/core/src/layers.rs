//! Network building blocks: tiled/binary/dense linear and conv2d layers,
//! the lambda minimum-size tiling policy, and a sequential model container
//! with manual forward/backward. No layer owns a bias.

use crate::error::{Error, Result};
use crate::tensor::{self, Shape, Tensor};
use crate::tiling::{
    self, AlphaMode, AlphaSet, AlphaSource, Tile, TileSpec, TilingState,
};

/// How a layer represents its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum LayerMode {
    /// Full-precision weights, exact gradients.
    Dense,
    /// Binary weights with one per-layer alpha; equals tiling with p=1.
    BinaryWeight,
    /// Binary tile replicated p times, alpha-scaled, straight-through.
    Tiled,
    /// Full-precision tile (segment averages), exact gradients, no alpha.
    TiledFp,
}

/// Model-level weight regime chosen at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Dense,
    Bwnn,
    Tbn,
    TbnFp,
}

/// Tiling policy: requested compression plus the minimum layer size
/// (element count) below which a layer is left untiled.
#[derive(Clone, Copy, Debug)]
pub struct TilingPolicy {
    pub p: usize,
    pub lambda: usize,
    pub alpha_mode: AlphaMode,
    pub alpha_source: AlphaSource,
}

impl Default for TilingPolicy {
    fn default() -> Self {
        TilingPolicy {
            p: 4,
            lambda: 64_000,
            alpha_mode: AlphaMode::PerTile,
            alpha_source: AlphaSource::FromA,
        }
    }
}

/// Weight storage for one layer. `Frozen*` variants come from model files
/// and carry only the inference payload; they cannot be trained further.
#[derive(Clone, Debug)]
pub enum LayerParams {
    Dense {
        weights: Tensor,
    },
    /// Covers both `BinaryWeight` (p=1) and `Tiled` (p>1).
    Binary(TilingState),
    FpTiled {
        weights: Tensor,
        spec: TileSpec,
    },
    FrozenDense {
        weights: Tensor,
    },
    FrozenBinary {
        tile: Tile,
        spec: TileSpec,
        alphas: AlphaSet,
    },
    FrozenFpTiled {
        tile: Vec<f32>,
        spec: TileSpec,
    },
}

/// Gradients produced by one layer's backward pass.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub grad_w: Tensor,
    pub grad_a: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct TrainCache {
    input: Tensor,
    bhat: Tensor,
}

// ── Linear ─────────────────────────────────────────────────────────────

/// Fully-connected layer, weight shape `(out_features, in_features)`
/// row-major, `y = x * W^T`, no bias.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub out_features: usize,
    pub in_features: usize,
    pub mode: LayerMode,
    pub params: LayerParams,
    cache: Option<TrainCache>,
}

impl LinearLayer {
    pub fn new(
        out_features: usize,
        in_features: usize,
        mode: LayerMode,
        policy: &TilingPolicy,
        seed: u64,
    ) -> Result<Self> {
        let shape = Shape::new(&[out_features, in_features])?;
        let params = build_params(shape, mode, policy, seed)?;
        Ok(LinearLayer {
            out_features,
            in_features,
            mode,
            params,
            cache: None,
        })
    }

    pub fn from_params(
        out_features: usize,
        in_features: usize,
        mode: LayerMode,
        params: LayerParams,
    ) -> Self {
        LinearLayer {
            out_features,
            in_features,
            mode,
            params,
            cache: None,
        }
    }

    fn batch_view(&self, x: &Tensor) -> Result<(usize, Tensor)> {
        let dims = x.shape().dims();
        let batch = dims[0];
        if batch * self.in_features != x.count() {
            return Err(Error::ShapeMismatch(format!(
                "input {} is not batch x {} features",
                x.shape(),
                self.in_features
            )));
        }
        let flat = x.reshape(Shape::new(&[batch, self.in_features])?)?;
        Ok((batch, flat))
    }

    /// Materialized `B_hat` as an `(out, in)` matrix.
    pub fn effective_weight(&self) -> Result<Tensor> {
        effective_weight(&self.params)?
            .reshape(Shape::new(&[self.out_features, self.in_features])?)
    }

    /// Inference forward; never mutates the layer.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, flat) = self.batch_view(x)?;
        let bhat = self.effective_weight()?;
        tensor::matmul(&flat, &bhat.transposed2d()?)
    }

    /// Training forward: caches the input and the materialized `B_hat`.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, flat) = self.batch_view(x)?;
        let bhat = match &mut self.params {
            LayerParams::Binary(state) => state.tiled_forward()?,
            other => effective_weight(other)?,
        };
        let bhat = if bhat.shape().dims().len() == 2 {
            bhat
        } else {
            bhat.reshape(Shape::new(&[self.out_features, self.in_features])?)?
        };
        let y = tensor::matmul(&flat, &bhat.transposed2d()?)?;
        self.cache = Some(TrainCache {
            input: x.clone(),
            bhat,
        });
        Ok(y)
    }

    /// `gradX = gradY * B_hat`, `gradB_hat = gradY^T * x`, then parameter
    /// gradients through the mode-specific path.
    pub fn backward(&mut self, grad_y: &Tensor) -> Result<(Tensor, LayerGrads)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::StateMissing("linear backward before forward"))?;
        let (batch, flat) = self.batch_view(&cache.input)?;
        let (gb, go) = grad_y.dims2()?;
        if gb != batch || go != self.out_features {
            return Err(Error::ShapeMismatch(format!(
                "gradY {} does not match batch {} x out {}",
                grad_y.shape(),
                batch,
                self.out_features
            )));
        }
        let grad_x = tensor::matmul(grad_y, &cache.bhat)?;
        let grad_bhat = tensor::matmul(&grad_y.transposed2d()?, &flat)?;
        let grads = param_grads(&self.params, &grad_bhat)?;
        Ok((grad_x.reshape(cache.input.shape().clone())?, grads))
    }
}

// ── Conv2d ─────────────────────────────────────────────────────────────

/// 2-D convolution (cross-correlation), weight shape
/// `(out_ch, in_ch, kh, kw)` row-major, no bias. Tiling math is identical
/// to linear layers, applied to the flattened weight.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: LayerMode,
    pub params: LayerParams,
    cache: Option<TrainCache>,
    last_macs: u64,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        mode: LayerMode,
        policy: &TilingPolicy,
        seed: u64,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        let shape = Shape::new(&[out_ch, in_ch, kh, kw])?;
        let params = build_params(shape, mode, policy, seed)?;
        Ok(Conv2dLayer {
            out_ch,
            in_ch,
            kh,
            kw,
            stride,
            padding,
            mode,
            params,
            cache: None,
            last_macs: 0,
        })
    }

    pub fn from_params(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        mode: LayerMode,
        params: LayerParams,
    ) -> Self {
        Conv2dLayer {
            out_ch,
            in_ch,
            kh,
            kw,
            stride,
            padding,
            mode,
            params,
            cache: None,
            last_macs: 0,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let dims = x.shape().dims();
        let &[batch, ic, h, w] = match dims {
            [a, b, c, d] => &[*a, *b, *c, *d],
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "conv input must be 4-d, got {}",
                    x.shape()
                )))
            }
        };
        if ic != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv input has {ic} channels, layer expects {}",
                self.in_ch
            )));
        }
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < self.kh || span_w < self.kw {
            return Err(Error::ShapeMismatch(format!(
                "kernel {}x{} larger than padded input {span_h}x{span_w}",
                self.kh, self.kw
            )));
        }
        let oh = (span_h - self.kh) / self.stride + 1;
        let ow = (span_w - self.kw) / self.stride + 1;
        Ok((batch, h, w, oh, ow))
    }

    /// If the layer's binary tile covers whole output channels with a
    /// single per-layer alpha, output channels repeat with this period.
    pub fn replication_period(&self) -> Option<usize> {
        let unit = self.in_ch * self.kh * self.kw;
        if let LayerParams::Binary(state) = &self.params {
            if state.alpha_mode == AlphaMode::PerLayer && state.spec.q() % unit == 0 {
                let period = state.spec.q() / unit;
                if period < self.out_ch {
                    return Some(period);
                }
            }
        }
        if let LayerParams::FrozenBinary { spec, alphas, .. } = &self.params {
            if alphas.mode == AlphaMode::PerLayer && spec.q() % unit == 0 {
                let period = spec.q() / unit;
                if period < self.out_ch {
                    return Some(period);
                }
            }
        }
        None
    }

    /// Multiply-accumulates executed by the most recent forward. Replicated
    /// output channels are computed once and copied, so this drops by the
    /// replication factor relative to an untiled twin.
    pub fn last_macs(&self) -> u64 {
        self.last_macs
    }

    /// Materialized `B_hat` as an `(out_ch, in_ch, kh, kw)` tensor.
    pub fn effective_weight(&self) -> Result<Tensor> {
        effective_weight(&self.params)?
            .reshape(Shape::new(&[self.out_ch, self.in_ch, self.kh, self.kw])?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let bhat = effective_weight(&self.params)?;
        let (y, _) = self.conv_forward(x, &bhat)?;
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let bhat = match &mut self.params {
            LayerParams::Binary(state) => state.tiled_forward()?,
            other => effective_weight(other)?,
        };
        let (y, macs) = self.conv_forward(x, &bhat)?;
        self.last_macs = macs;
        self.cache = Some(TrainCache {
            input: x.clone(),
            bhat,
        });
        Ok(y)
    }

    /// Direct loop-nest cross-correlation with per-element accumulation
    /// over `(ic, ky, kx)` in ascending order. When output channels are
    /// provably replicated, only the first period is computed and the rest
    /// are copied (bitwise identical by construction).
    fn conv_forward(&self, x: &Tensor, weight: &Tensor) -> Result<(Tensor, u64)> {
        let (batch, h, w, oh, ow) = self.geometry(x)?;
        let computed_ch = self.replication_period().unwrap_or(self.out_ch);
        let (oc, ic, kh, kw) = (self.out_ch, self.in_ch, self.kh, self.kw);
        let (stride, padding) = (self.stride, self.padding);
        let xd = x.data();
        let wd = weight.data();
        let mut out = vec![0.0f32; batch * oc * oh * ow];
        let row = oc * oh * ow;
        let work = batch * computed_ch * oh * ow * ic * kh * kw;
        crate::parallel::for_each_row(&mut out, row, work, |b, obatch| {
            let xb = &xd[b * ic * h * w..(b + 1) * ic * h * w];
            for o in 0..computed_ch {
                let wslice = &wd[o * ic * kh * kw..(o + 1) * ic * kh * kw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for c in 0..ic {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < padding || iy - padding >= h {
                                    continue;
                                }
                                let iy = iy - padding;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < padding || ix - padding >= w {
                                        continue;
                                    }
                                    let ix = ix - padding;
                                    acc += xb[(c * h + iy) * w + ix]
                                        * wslice[(c * kh + ky) * kw + kx];
                                }
                            }
                        }
                        obatch[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            // Copy replicated channels from their computed representative.
            for o in computed_ch..oc {
                let (src, dst) = obatch.split_at_mut(o * oh * ow);
                dst[..oh * ow]
                    .copy_from_slice(&src[(o % computed_ch) * oh * ow..][..oh * ow]);
            }
        });
        let macs = self.count_macs(batch, computed_ch, h, w, oh, ow);
        Ok((
            Tensor::new(Shape::new(&[batch, oc, oh, ow])?, out)?,
            macs,
        ))
    }

    /// Exact count of in-bounds multiply-accumulates for `channels`
    /// computed output channels (padding taps execute nothing).
    fn count_macs(&self, batch: usize, channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> u64 {
        let mut taps: u64 = 0;
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..self.kh {
                    let iy = oy * self.stride + ky;
                    if iy < self.padding || iy - self.padding >= h {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = ox * self.stride + kx;
                        if ix < self.padding || ix - self.padding >= w {
                            continue;
                        }
                        taps += 1;
                    }
                }
            }
        }
        taps * self.in_ch as u64 * channels as u64 * batch as u64
    }

    /// Loop-nest adjoint of the forward pass.
    pub fn backward(&mut self, grad_y: &Tensor) -> Result<(Tensor, LayerGrads)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::StateMissing("conv backward before forward"))?;
        let x = &cache.input;
        let (batch, h, w, oh, ow) = self.geometry(x)?;
        let gdims = grad_y.shape().dims();
        if gdims != [batch, self.out_ch, oh, ow] {
            return Err(Error::ShapeMismatch(format!(
                "gradY {} does not match conv output ({batch},{},{oh},{ow})",
                grad_y.shape(),
                self.out_ch
            )));
        }
        let (oc, ic, kh, kw) = (self.out_ch, self.in_ch, self.kh, self.kw);
        let mut grad_x = vec![0.0f32; x.count()];
        let mut grad_w = vec![0.0f32; oc * ic * kh * kw];
        let gd = grad_y.data();
        let xd = x.data();
        let wd = cache.bhat.data();
        for b in 0..batch {
            let xb = &xd[b * ic * h * w..];
            let gxb = &mut grad_x[b * ic * h * w..(b + 1) * ic * h * w];
            for o in 0..oc {
                let wslice = &wd[o * ic * kh * kw..];
                let gwslice_at = o * ic * kh * kw;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gd[((b * oc + o) * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..ic {
                            for ky in 0..kh {
                                let iy = oy * self.stride + ky;
                                if iy < self.padding || iy - self.padding >= h {
                                    continue;
                                }
                                let iy = iy - self.padding;
                                for kx in 0..kw {
                                    let ix = ox * self.stride + kx;
                                    if ix < self.padding || ix - self.padding >= w {
                                        continue;
                                    }
                                    let ix = ix - self.padding;
                                    let xi = (c * h + iy) * w + ix;
                                    let wi = (c * kh + ky) * kw + kx;
                                    gxb[xi] += g * wslice[wi];
                                    grad_w[gwslice_at + wi] += g * xb[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        let grad_bhat = Tensor::new(Shape::new(&[oc, ic, kh, kw])?, grad_w)?;
        let grads = param_grads(&self.params, &grad_bhat)?;
        Ok((Tensor::new(x.shape().clone(), grad_x)?, grads))
    }
}

// ── Shared parameter plumbing ──────────────────────────────────────────

/// Deterministic per-layer seed derivation (splitmix64 over a combined
/// key) so W and A streams never collide across layers.
pub fn derive_seed(seed: u64, layer: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(layer.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9).wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_params(shape: Shape, mode: LayerMode, policy: &TilingPolicy, seed: u64) -> Result<LayerParams> {
    let n = shape.count();
    let weights = tensor::fan_scaled_normal_init(shape.clone(), derive_seed(seed, 0, 0));
    match mode {
        LayerMode::Dense => Ok(LayerParams::Dense { weights }),
        LayerMode::TiledFp => {
            let spec = TileSpec::new(policy.p, n).map_err(|_| {
                Error::InvalidConfig(format!("p={} does not divide layer size {n}", policy.p))
            })?;
            Ok(LayerParams::FpTiled { weights, spec })
        }
        LayerMode::BinaryWeight | LayerMode::Tiled => {
            let p = if mode == LayerMode::BinaryWeight { 1 } else { policy.p };
            let spec = TileSpec::new(p, n).map_err(|_| {
                Error::InvalidConfig(format!("p={p} does not divide layer size {n}"))
            })?;
            // Untiled binary layers always carry exactly one alpha.
            let alpha_mode = if p == 1 { AlphaMode::PerLayer } else { policy.alpha_mode };
            let alpha_weights = match policy.alpha_source {
                AlphaSource::FromW => None,
                AlphaSource::FromA => {
                    Some(tensor::fan_scaled_normal_init(shape, derive_seed(seed, 0, 1)))
                }
            };
            Ok(LayerParams::Binary(TilingState::new(
                weights,
                alpha_weights,
                spec,
                alpha_mode,
                policy.alpha_source,
            )?))
        }
    }
}

/// Materialize the effective weight tensor for any parameter state.
pub fn effective_weight(params: &LayerParams) -> Result<Tensor> {
    match params {
        LayerParams::Dense { weights } | LayerParams::FrozenDense { weights } => Ok(weights.clone()),
        LayerParams::Binary(state) => state.effective_weight(),
        LayerParams::FpTiled { weights, spec } => {
            Ok(tiling::tiled_forward_fp(weights, spec)?.1)
        }
        LayerParams::FrozenBinary { tile, spec, alphas } => {
            let shape = frozen_shape(spec);
            let binary = tiling::replicate(tile, spec, &shape)?;
            tiling::scale(&binary, alphas, spec)
        }
        LayerParams::FrozenFpTiled { tile, spec } => {
            let mut data = Vec::with_capacity(spec.n());
            for _ in 0..spec.p() {
                data.extend_from_slice(tile);
            }
            Tensor::new(frozen_shape(spec), data)
        }
    }
}

// Frozen payloads are stored flat; the owning layer re-applies its
// logical shape, so a flat shape here is only an intermediate.
fn frozen_shape(spec: &TileSpec) -> Shape {
    Shape::new(&[spec.n()]).expect("spec.n() >= 1")
}

fn param_grads(params: &LayerParams, grad_bhat: &Tensor) -> Result<LayerGrads> {
    match params {
        LayerParams::Dense { .. } => Ok(LayerGrads {
            grad_w: grad_bhat.clone(),
            grad_a: None,
        }),
        LayerParams::Binary(state) => {
            let (grad_w, grad_a) = state.tiled_backward(grad_bhat)?;
            Ok(LayerGrads { grad_w, grad_a })
        }
        LayerParams::FpTiled { spec, .. } => Ok(LayerGrads {
            grad_w: tiling::tiled_backward_fp(spec, grad_bhat)?,
            grad_a: None,
        }),
        _ => Err(Error::InvalidConfig(
            "frozen layers cannot produce parameter gradients".into(),
        )),
    }
}

// ── Model ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(LinearLayer),
    Conv2d(Conv2dLayer),
}

impl Layer {
    pub fn params(&self) -> &LayerParams {
        match self {
            Layer::Linear(l) => &l.params,
            Layer::Conv2d(c) => &c.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut LayerParams {
        match self {
            Layer::Linear(l) => &mut l.params,
            Layer::Conv2d(c) => &mut c.params,
        }
    }

    pub fn mode(&self) -> LayerMode {
        match self {
            Layer::Linear(l) => l.mode,
            Layer::Conv2d(c) => c.mode,
        }
    }

    /// Flat weight shape dims as stored in model records.
    pub fn weight_dims(&self) -> Vec<usize> {
        match self {
            Layer::Linear(l) => vec![l.out_features, l.in_features],
            Layer::Conv2d(c) => vec![c.out_ch, c.in_ch, c.kh, c.kw],
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        let flat = effective_weight(self.params())?;
        let dims = self.weight_dims();
        flat.reshape(Shape::new(&dims)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(c) => c.forward(x),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward_train(x),
            Layer::Conv2d(c) => c.forward_train(x),
        }
    }

    pub fn backward(&mut self, grad_y: &Tensor) -> Result<(Tensor, LayerGrads)> {
        match self {
            Layer::Linear(l) => l.backward(grad_y),
            Layer::Conv2d(c) => c.backward(grad_y),
        }
    }

    /// Mutable references to the trainable tensors, W first then A.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        match self.params_mut() {
            LayerParams::Dense { weights } | LayerParams::FpTiled { weights, .. } => vec![weights],
            LayerParams::Binary(state) => {
                let mut v = vec![&mut state.weights];
                if let Some(a) = state.alpha_weights.as_mut() {
                    v.push(a);
                }
                v
            }
            _ => vec![],
        }
    }

    pub fn is_frozen(&self) -> bool {
        matches!(
            self.params(),
            LayerParams::FrozenDense { .. }
                | LayerParams::FrozenBinary { .. }
                | LayerParams::FrozenFpTiled { .. }
        )
    }
}

/// One model position: a layer plus whether a ReLU follows it.
#[derive(Clone, Debug)]
pub struct LayerSlot {
    pub layer: Layer,
    pub relu_after: bool,
}

/// Input normalization applied during training; recorded in the model
/// file so inference reproduces preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Pixels divided by 255 into [0,1]; no mean/std centering.
    UnitScale,
}

#[derive(Clone, Debug)]
pub struct ModelMeta {
    pub lambda: u64,
    pub seed: u64,
    pub normalization: Normalization,
}

/// Sequential stack of layers with fused-ReLU markers.
#[derive(Clone, Debug)]
pub struct Model {
    pub slots: Vec<LayerSlot>,
    pub meta: ModelMeta,
    trace: Vec<Option<Tensor>>,
}

impl Model {
    pub fn new(slots: Vec<LayerSlot>, meta: ModelMeta) -> Self {
        Model {
            slots,
            meta,
            trace: Vec::new(),
        }
    }

    /// Pure inference forward (usable on frozen models).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for slot in &self.slots {
            cur = slot.layer.forward(&cur)?;
            if slot.relu_after {
                relu_in_place(&mut cur);
            }
        }
        Ok(cur)
    }

    /// Training forward: layers cache their inputs, the model caches
    /// pre-activations for the ReLU masks.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.trace.clear();
        let mut cur = x.clone();
        for slot in &mut self.slots {
            let y = slot.layer.forward_train(&cur)?;
            if slot.relu_after {
                self.trace.push(Some(y.clone()));
                cur = y;
                relu_in_place(&mut cur);
            } else {
                self.trace.push(None);
                cur = y;
            }
        }
        Ok(cur)
    }

    /// Backward replay in reverse; returns per-layer gradients in layer
    /// order.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Vec<LayerGrads>> {
        if self.trace.len() != self.slots.len() {
            return Err(Error::StateMissing("model backward before forward_train"));
        }
        let mut grad = grad_out.clone();
        let mut grads_rev = Vec::with_capacity(self.slots.len());
        for (slot, pre) in self.slots.iter_mut().zip(&self.trace).rev() {
            if slot.relu_after {
                let pre = pre.as_ref().expect("relu slots record pre-activations");
                for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let (grad_x, layer_grads) = slot.layer.backward(&grad)?;
            grads_rev.push(layer_grads);
            grad = grad_x;
        }
        grads_rev.reverse();
        Ok(grads_rev)
    }

    pub fn has_frozen_layers(&self) -> bool {
        self.slots.iter().any(|s| s.layer.is_frozen())
    }
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Build an MLP: `sizes = [in, hidden..., out]`, ReLU after every layer
/// but the last. Under `Tbn`, layers below `lambda` fall back to
/// `BinaryWeight`; under `TbnFp` they fall back to `Dense`.
pub fn build_mlp(
    sizes: &[usize],
    mode: ModelMode,
    policy: &TilingPolicy,
    seed: u64,
) -> Result<Model> {
    if sizes.len() < 2 {
        return Err(Error::InvalidConfig(
            "an MLP needs at least input and output sizes".into(),
        ));
    }
    let mut slots = Vec::new();
    for idx in 0..sizes.len() - 1 {
        let (inf, outf) = (sizes[idx], sizes[idx + 1]);
        let n = inf * outf;
        let layer_mode = match mode {
            ModelMode::Dense => LayerMode::Dense,
            ModelMode::Bwnn => LayerMode::BinaryWeight,
            ModelMode::Tbn => {
                if n >= policy.lambda {
                    LayerMode::Tiled
                } else {
                    LayerMode::BinaryWeight
                }
            }
            ModelMode::TbnFp => {
                if n >= policy.lambda {
                    LayerMode::TiledFp
                } else {
                    LayerMode::Dense
                }
            }
        };
        let layer = LinearLayer::new(outf, inf, layer_mode, policy, derive_seed(seed, idx as u64, 2))
            .map_err(|e| match e {
                Error::InvalidConfig(msg) => {
                    Error::InvalidConfig(format!("layer {idx} ({outf}x{inf}): {msg}"))
                }
                other => other,
            })?;
        slots.push(LayerSlot {
            layer: Layer::Linear(layer),
            relu_after: idx + 1 < sizes.len() - 1,
        });
    }
    Ok(Model::new(
        slots,
        ModelMeta {
            lambda: policy.lambda as u64,
            seed,
            normalization: Normalization::UnitScale,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fan_scaled_normal_init;

    fn tensor(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(Shape::new(dims).unwrap(), data.to_vec()).unwrap()
    }

    fn policy(p: usize, lambda: usize) -> TilingPolicy {
        TilingPolicy {
            p,
            lambda,
            alpha_mode: AlphaMode::PerTile,
            alpha_source: AlphaSource::FromA,
        }
    }

    #[test]
    fn mlp_lambda_policy_matches_paper_shape() {
        // 784x128 = 100352 >= 64000 -> tiled; classifier 1280 < 64000 -> binary.
        let m = build_mlp(&[784, 128, 10], ModelMode::Tbn, &policy(4, 64_000), 0).unwrap();
        assert_eq!(m.slots[0].layer.mode(), LayerMode::Tiled);
        assert!(m.slots[0].relu_after);
        assert_eq!(m.slots[1].layer.mode(), LayerMode::BinaryWeight);
        assert!(!m.slots[1].relu_after);
        match m.slots[1].layer.params() {
            LayerParams::Binary(st) => assert_eq!(st.alpha_mode, AlphaMode::PerLayer),
            other => panic!("classifier should be binary, got {other:?}"),
        }
    }

    #[test]
    fn mlp_small_tiled_layer() {
        let m = build_mlp(&[4, 4], ModelMode::Tbn, &policy(2, 0), 0).unwrap();
        match m.slots[0].layer.params() {
            LayerParams::Binary(st) => {
                assert_eq!(st.spec.p(), 2);
                assert_eq!(st.spec.q(), 8);
            }
            other => panic!("expected tiled layer, got {other:?}"),
        }
    }

    #[test]
    fn mlp_indivisible_p_is_config_error() {
        let err = build_mlp(&[4, 4], ModelMode::Tbn, &policy(3, 0), 0).unwrap_err();
        match err {
            Error::InvalidConfig(msg) => assert!(msg.contains("layer 0"), "{msg}"),
            other => panic!("expected InvalidConfig, got {other}"),
        }
    }

    #[test]
    fn dense_identity_forward() {
        let w = tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let layer = LinearLayer::from_params(2, 2, LayerMode::Dense, LayerParams::Dense { weights: w });
        let x = tensor(&[3, 2], &[1.0, 2.0, -0.5, 0.25, 3.0, -3.0]);
        assert_eq!(layer.forward(&x).unwrap(), x);
    }

    #[test]
    fn tiled_all_positive_rows_equal() {
        // All-positive W -> B all ones -> each output is alpha * sum(x).
        let mut policy = policy(2, 0);
        policy.alpha_mode = AlphaMode::PerLayer;
        policy.alpha_source = AlphaSource::FromW;
        let mut layer = LinearLayer::new(4, 2, LayerMode::Tiled, &policy, 9).unwrap();
        if let LayerParams::Binary(st) = &mut layer.params {
            for v in st.weights.data_mut() {
                *v = v.abs().max(0.1);
            }
        }
        let x = tensor(&[1, 2], &[2.0, 1.0]);
        let y = layer.forward(&x).unwrap();
        let first = y.data()[0];
        assert!(y.data().iter().all(|&v| v == first));
    }

    /// Naive (i,j,r) oracle of x * W^T.
    fn forward_oracle(x: &Tensor, w: &Tensor) -> Vec<f32> {
        let (b, k) = x.dims2().unwrap();
        let (m, _) = w.dims2().unwrap();
        let mut out = vec![0.0f32; b * m];
        for i in 0..b {
            for j in 0..m {
                let mut acc = 0.0f32;
                for r in 0..k {
                    acc += x.data()[i * k + r] * w.data()[j * k + r];
                }
                out[i * m + j] = acc;
            }
        }
        out
    }

    #[test]
    fn tiled_forward_equals_materialized_oracle_bitwise() {
        let mut layer = LinearLayer::new(6, 4, LayerMode::Tiled, &policy(2, 0), 5).unwrap();
        let x = fan_scaled_normal_init(Shape::new(&[3, 4]).unwrap(), 77);
        let y = layer.forward_train(&x).unwrap();
        let bhat = layer.effective_weight().unwrap();
        assert_eq!(y.data(), forward_oracle(&x, &bhat).as_slice());
    }

    #[test]
    fn conv_1x1_scales() {
        let w = tensor(&[1, 1, 1, 1], &[2.0]);
        let layer = Conv2dLayer::from_params(
            1, 1, 1, 1, 1, 0,
            LayerMode::Dense,
            LayerParams::Dense { weights: w },
        );
        let x = tensor(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 4.0]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[2.0, -4.0, 6.0, 8.0]);
    }

    /// Naive 7-loop conv oracle with zero padding.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        oc: usize,
        ic: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<f32> {
        let dims = x.shape().dims();
        let (b, h, wd) = (dims[0], dims[2], dims[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0f32; b * oc * oh * ow];
        for bi in 0..b {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for c in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * ic + c) * h + iy as usize) * wd
                                        + ix as usize]
                                        * w.data()[((o * ic + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_seven_loop_oracle_bitwise() {
        let layer = Conv2dLayer::new(3, 2, 3, 3, 2, 1, LayerMode::Dense, &policy(1, 0), 21).unwrap();
        let x = fan_scaled_normal_init(Shape::new(&[2, 2, 5, 6]).unwrap(), 31);
        let y = layer.forward(&x).unwrap();
        let w = layer.effective_weight().unwrap();
        let want = conv_oracle(&x, &w, 3, 2, 3, 3, 2, 1);
        assert_eq!(y.data(), want.as_slice());
    }

    #[test]
    fn tiled_conv_output_channels_replicate_bitwise() {
        // out_ch=2, p=2, q = in_ch*kh*kw, per-layer alpha -> identical channels.
        let mut pol = policy(2, 0);
        pol.alpha_mode = AlphaMode::PerLayer;
        pol.alpha_source = AlphaSource::FromW;
        let layer = Conv2dLayer::new(2, 3, 3, 3, 1, 0, LayerMode::Tiled, &pol, 17).unwrap();
        assert_eq!(layer.replication_period(), Some(1));
        let x = fan_scaled_normal_init(Shape::new(&[1, 3, 6, 6]).unwrap(), 41);
        // Compare against the oracle on the materialized weight: replication
        // must hold through ordinary arithmetic, not just the fast path.
        let w = layer.effective_weight().unwrap();
        let want = conv_oracle(&x, &w, 2, 3, 3, 3, 1, 0);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data(), want.as_slice());
        let (ch0, ch1) = want.split_at(16);
        assert_eq!(ch0, ch1);
    }

    #[test]
    fn conv_fast_path_counts_quarter_macs() {
        let mut pol = policy(4, 0);
        pol.alpha_mode = AlphaMode::PerLayer;
        pol.alpha_source = AlphaSource::FromW;
        let mut tiled = Conv2dLayer::new(4, 2, 3, 3, 1, 0, LayerMode::Tiled, &pol, 3).unwrap();
        let bhat = tiled.effective_weight().unwrap();
        // Twin with identical effective weights, untiled.
        let mut twin = Conv2dLayer::from_params(
            4, 2, 3, 3, 1, 0,
            LayerMode::Dense,
            LayerParams::Dense { weights: bhat },
        );
        let x = fan_scaled_normal_init(Shape::new(&[2, 2, 7, 7]).unwrap(), 5);
        let y_tiled = tiled.forward_train(&x).unwrap();
        let y_twin = twin.forward_train(&x).unwrap();
        assert_eq!(y_tiled.data(), y_twin.data());
        assert_eq!(tiled.last_macs() * 4, twin.last_macs());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    /// Directional finite-difference check of d(sum(y*g))/dW for one layer.
    fn check_linear_fd(mut layer: LinearLayer, x: &Tensor, tol: f64) {
        let g = fan_scaled_normal_init(
            Shape::new(&[x.shape().dims()[0], layer.out_features]).unwrap(),
            999,
        );
        let y = layer.forward_train(x).unwrap();
        assert_eq!(y.shape().dims(), g.shape().dims());
        let (_, grads) = layer.backward(&g).unwrap();

        // Probe along a fixed random direction v in W-space.
        let w0 = match &layer.params {
            LayerParams::Dense { weights } | LayerParams::FpTiled { weights, .. } => weights.clone(),
            other => panic!("fd test covers exact-gradient modes, got {other:?}"),
        };
        let v = fan_scaled_normal_init(w0.shape().clone(), 1234);
        let analytic: f64 = grads
            .grad_w
            .data()
            .iter()
            .zip(v.data())
            .map(|(&gw, &vv)| gw as f64 * vv as f64)
            .sum();

        let h = 1e-3f32;
        let eval = |sign: f32| -> f64 {
            let mut pert = layer.clone();
            match &mut pert.params {
                LayerParams::Dense { weights } | LayerParams::FpTiled { weights, .. } => {
                    for (w, &vv) in weights.data_mut().iter_mut().zip(v.data()) {
                        *w += sign * h * vv;
                    }
                }
                _ => unreachable!(),
            }
            let y = pert.forward(x).unwrap();
            y.data()
                .iter()
                .zip(g.data())
                .map(|(&yv, &gv)| yv as f64 * gv as f64)
                .sum()
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h as f64);
        assert!(
            rel_err(analytic, numeric) < tol,
            "analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn dense_layer_matches_finite_differences() {
        let layer = LinearLayer::new(3, 4, LayerMode::Dense, &policy(1, 0), 8).unwrap();
        let x = fan_scaled_normal_init(Shape::new(&[2, 4]).unwrap(), 88);
        check_linear_fd(layer, &x, 1e-3);
    }

    #[test]
    fn fp_tiled_layer_matches_finite_differences() {
        let layer = LinearLayer::new(4, 4, LayerMode::TiledFp, &policy(2, 0), 8).unwrap();
        let x = fan_scaled_normal_init(Shape::new(&[3, 4]).unwrap(), 89);
        check_linear_fd(layer, &x, 1e-3);
    }

    #[test]
    fn zero_grad_y_gives_zero_grads() {
        let mut layer = LinearLayer::new(3, 4, LayerMode::Tiled, &policy(2, 0), 8).unwrap();
        let x = fan_scaled_normal_init(Shape::new(&[2, 4]).unwrap(), 90);
        layer.forward_train(&x).unwrap();
        let zero = Tensor::zeros(Shape::new(&[2, 3]).unwrap());
        let (gx, grads) = layer.backward(&zero).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_w.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_a.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_single_dense_equals_layer_forward() {
        let layer = LinearLayer::new(3, 4, LayerMode::Dense, &policy(1, 0), 8).unwrap();
        let solo = layer.clone();
        let model = Model::new(
            vec![LayerSlot {
                layer: Layer::Linear(layer),
                relu_after: false,
            }],
            ModelMeta {
                lambda: 0,
                seed: 8,
                normalization: Normalization::UnitScale,
            },
        );
        let x = fan_scaled_normal_init(Shape::new(&[2, 4]).unwrap(), 91);
        assert_eq!(model.forward(&x).unwrap(), solo.forward(&x).unwrap());
    }

    #[test]
    fn relu_kills_gradient_on_negative_preactivations() {
        let w = tensor(&[1, 1], &[1.0]);
        let layer = LinearLayer::from_params(1, 1, LayerMode::Dense, LayerParams::Dense { weights: w });
        let mut model = Model::new(
            vec![
                LayerSlot {
                    layer: Layer::Linear(layer.clone()),
                    relu_after: true,
                },
                LayerSlot {
                    layer: Layer::Linear(layer),
                    relu_after: false,
                },
            ],
            ModelMeta {
                lambda: 0,
                seed: 0,
                normalization: Normalization::UnitScale,
            },
        );
        let x = tensor(&[2, 1], &[-1.0, 2.0]);
        model.forward_train(&x).unwrap();
        let g = tensor(&[2, 1], &[1.0, 1.0]);
        let grads = model.backward(&g).unwrap();
        // First sample's pre-activation is negative, so only the second
        // contributes to the first layer's gradient.
        assert_eq!(grads[0].grad_w.data(), &[2.0]);
    }

    #[test]
    fn two_layer_dense_model_matches_finite_differences() {
        let mut model = build_mlp(&[4, 5, 3], ModelMode::Dense, &policy(1, 0), 12).unwrap();
        let x = fan_scaled_normal_init(Shape::new(&[2, 4]).unwrap(), 92);
        let g = fan_scaled_normal_init(Shape::new(&[2, 3]).unwrap(), 93);
        model.forward_train(&x).unwrap();
        let grads = model.backward(&g).unwrap();

        // Independent f64 reference: L(W1, W2) = sum(relu(x W1^T) W2^T * g).
        let to64 = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
        let w = |li: usize| match model.slots[li].layer.params() {
            LayerParams::Dense { weights } => weights.clone(),
            _ => unreachable!(),
        };
        let loss64 = |w1: &[f64], w2: &[f64]| -> f64 {
            let x64 = to64(&x);
            let g64 = to64(&g);
            let mut total = 0.0f64;
            for i in 0..2 {
                let mut hdn = [0.0f64; 5];
                for (o, h) in hdn.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for r in 0..4 {
                        acc += x64[i * 4 + r] * w1[o * 4 + r];
                    }
                    *h = acc.max(0.0);
                }
                for o in 0..3 {
                    let mut acc = 0.0;
                    for (r, h) in hdn.iter().enumerate() {
                        acc += h * w2[o * 5 + r];
                    }
                    total += acc * g64[i * 3 + o];
                }
            }
            total
        };

        let h = 1e-5f64;
        for li in 0..2 {
            let v = fan_scaled_normal_init(w(li).shape().clone(), 500 + li as u64);
            let analytic: f64 = grads[li]
                .grad_w
                .data()
                .iter()
                .zip(v.data())
                .map(|(&gw, &vv)| gw as f64 * vv as f64)
                .sum();
            let eval = |sign: f64| -> f64 {
                let mut w1 = to64(&w(0));
                let mut w2 = to64(&w(1));
                let target = if li == 0 { &mut w1 } else { &mut w2 };
                for (wv, &vv) in target.iter_mut().zip(v.data()) {
                    *wv += sign * h * vv as f64;
                }
                loss64(&w1, &w2)
            };
            let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h);
            assert!(
                rel_err(analytic, numeric) < 1e-3,
                "layer {li}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut layer = Conv2dLayer::new(2, 2, 3, 3, 1, 1, LayerMode::Dense, &policy(1, 0), 15).unwrap();
        let x = fan_scaled_normal_init(Shape::new(&[2, 2, 4, 4]).unwrap(), 94);
        let y = layer.forward_train(&x).unwrap();
        let g = fan_scaled_normal_init(y.shape().clone(), 95);
        let (grad_x, grads) = layer.backward(&g).unwrap();

        // Weight direction probe.
        let w0 = match &layer.params {
            LayerParams::Dense { weights } => weights.clone(),
            _ => unreachable!(),
        };
        let v = fan_scaled_normal_init(w0.shape().clone(), 96);
        let analytic: f64 = grads
            .grad_w
            .data()
            .iter()
            .zip(v.data())
            .map(|(&gw, &vv)| gw as f64 * vv as f64)
            .sum();
        let h = 1e-3f32;
        let eval_w = |sign: f32| -> f64 {
            let mut wp = w0.clone();
            for (w, &vv) in wp.data_mut().iter_mut().zip(v.data()) {
                *w += sign * h * vv;
            }
            let layer = Conv2dLayer::from_params(
                2, 2, 3, 3, 1, 1,
                LayerMode::Dense,
                LayerParams::Dense { weights: wp },
            );
            let y = layer.forward(&x).unwrap();
            y.data()
                .iter()
                .zip(g.data())
                .map(|(&yv, &gv)| yv as f64 * gv as f64)
                .sum()
        };
        let numeric = (eval_w(1.0) - eval_w(-1.0)) / (2.0 * h as f64);
        assert!(rel_err(analytic, numeric) < 1e-3, "{analytic} vs {numeric}");

        // Input direction probe.
        let vx = fan_scaled_normal_init(x.shape().clone(), 97);
        let analytic_x: f64 = grad_x
            .data()
            .iter()
            .zip(vx.data())
            .map(|(&gv, &vv)| gv as f64 * vv as f64)
            .sum();
        let eval_x = |sign: f32| -> f64 {
            let mut xp = x.clone();
            for (w, &vv) in xp.data_mut().iter_mut().zip(vx.data()) {
                *w += sign * h * vv;
            }
            let y = layer.forward(&xp).unwrap();
            y.data()
                .iter()
                .zip(g.data())
                .map(|(&yv, &gv)| yv as f64 * gv as f64)
                .sum()
        };
        let numeric_x = (eval_x(1.0) - eval_x(-1.0)) / (2.0 * h as f64);
        assert!(
            rel_err(analytic_x, numeric_x) < 1e-3,
            "{analytic_x} vs {numeric_x}"
        );
    }
}
