//! Tile construction and straight-through gradients.
//!
//! A layer's weight tensor is flattened row-major and read as `p`
//! contiguous segments of length `q` (`p*q = N`). The segments are summed
//! elementwise into a score vector `s`, thresholded into a +/-1 tile `t`,
//! and the tile is replicated back over the layer (`flat(B)[i] = t[i mod q]`).
//! A scale `alpha` — one per layer or one per segment, computed as a mean
//! absolute value of `W` or of a dedicated tensor `A` — turns `B` into the
//! effective weight `B_hat`. Backward treats the threshold/tiling chain as
//! identity (straight-through) and adds the exact chain-rule term for the
//! alpha path.
//!
//! A full-precision variant (`tiled_forward_fp`/`tiled_backward_fp`)
//! averages segments instead and is exactly differentiable: no threshold,
//! no alpha, no straight-through.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// How a layer's element count splits into tile replicas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    p: usize,
    q: usize,
    n: usize,
}

impl TileSpec {
    pub fn new(p: usize, n: usize) -> Result<Self> {
        if p == 0 || n == 0 || n % p != 0 {
            return Err(Error::InvalidConfig(format!(
                "compression factor {p} does not divide element count {n}"
            )));
        }
        Ok(TileSpec { p, q: n / p, n })
    }

    /// Compression factor (number of replicas). `p == 1` means untiled.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Tile length `q = N / p`.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Layer element count.
    pub fn n(&self) -> usize {
        self.n
    }
}

/// A learned length-q vector over {-1.0, +1.0}.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    values: Vec<f32>,
}

impl Tile {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if value != 1.0 && value != -1.0 {
                return Err(Error::BadValue { index, value });
            }
        }
        Ok(Tile { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum AlphaMode {
    PerLayer,
    PerTile,
}

/// Which tensor the alpha scalars are computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaSource {
    /// Reuse the tiling weights `W`; the alpha term feeds back into `gradW`.
    FromW,
    /// A dedicated trainable tensor `A` with its own gradient.
    FromA,
}

/// Alpha scalars for one layer: length 1 (`PerLayer`) or `p` (`PerTile`).
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSet {
    pub mode: AlphaMode,
    pub source: AlphaSource,
    pub values: Vec<f32>,
}

/// Training-time state for one tiled layer: the trainable tensors plus the
/// per-forward cache (`s`, tile, `B`, alphas) the backward pass needs.
#[derive(Clone, Debug)]
pub struct TilingState {
    pub weights: Tensor,
    /// Present iff `alpha_source == FromA`; same shape as `weights`.
    pub alpha_weights: Option<Tensor>,
    pub spec: TileSpec,
    pub alpha_mode: AlphaMode,
    pub alpha_source: AlphaSource,
    cache: Option<ForwardCache>,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    tile: Tile,
    binary: Tensor,
    alphas: AlphaSet,
    scores: Vec<f32>,
}

/// Sum the flat weights across the `p` segments: `s[i] = sum_j flat[j*q+i]`.
pub fn aggregate(weights: &Tensor, spec: &TileSpec) -> Result<Vec<f32>> {
    segment_reduce(weights, spec, 1.0)
}

fn segment_reduce(weights: &Tensor, spec: &TileSpec, scale: f32) -> Result<Vec<f32>> {
    if weights.count() != spec.n() {
        return Err(Error::ShapeMismatch(format!(
            "weights have {} elements, tile spec expects {}",
            weights.count(),
            spec.n()
        )));
    }
    let q = spec.q();
    let mut s = vec![0.0f32; q];
    for segment in weights.data().chunks_exact(q) {
        for (acc, &w) in s.iter_mut().zip(segment) {
            *acc += w;
        }
    }
    if scale != 1.0 {
        for v in &mut s {
            *v *= scale;
        }
    }
    Ok(s)
}

/// Binarize scores: `t_i = +1` iff `s_i > 0`, else `-1` (zero maps to -1).
pub fn threshold(scores: &[f32]) -> Tile {
    Tile {
        values: scores.iter().map(|&s| if s > 0.0 { 1.0 } else { -1.0 }).collect(),
    }
}

/// Replicate the tile over the layer: `flat(B)[i] = t[i mod q]`, reshaped
/// row-major to `shape`.
pub fn replicate(tile: &Tile, spec: &TileSpec, shape: &Shape) -> Result<Tensor> {
    if shape.count() != spec.n() {
        return Err(Error::ShapeMismatch(format!(
            "shape {} has {} elements, tile spec expects {}",
            shape,
            shape.count(),
            spec.n()
        )));
    }
    if tile.len() != spec.q() {
        return Err(Error::ShapeMismatch(format!(
            "tile length {} does not match q={}",
            tile.len(),
            spec.q()
        )));
    }
    let mut data = Vec::with_capacity(spec.n());
    for _ in 0..spec.p() {
        data.extend_from_slice(tile.values());
    }
    Tensor::new(shape.clone(), data)
}

/// Mean absolute value of the whole tensor: `alpha = ||flat(src)||_1 / N`.
pub fn alpha_per_layer(src: &Tensor) -> f32 {
    let n = src.count();
    debug_assert!(n > 0);
    src.data().iter().map(|v| v.abs()).sum::<f32>() / n as f32
}

/// Per-segment mean absolute value: `alpha_j = ||flat(src)[j*q..(j+1)*q]||_1 / q`.
pub fn alpha_per_tile(src: &Tensor, spec: &TileSpec) -> Result<Vec<f32>> {
    if src.count() != spec.n() {
        return Err(Error::ShapeMismatch(format!(
            "alpha source has {} elements, tile spec expects {}",
            src.count(),
            spec.n()
        )));
    }
    let q = spec.q() as f32;
    Ok(src
        .data()
        .chunks_exact(spec.q())
        .map(|seg| seg.iter().map(|v| v.abs()).sum::<f32>() / q)
        .collect())
}

/// Compute the full [`AlphaSet`] for one layer from its source tensor.
pub fn compute_alphas(
    src: &Tensor,
    spec: &TileSpec,
    mode: AlphaMode,
    source: AlphaSource,
) -> Result<AlphaSet> {
    let values = match mode {
        AlphaMode::PerLayer => vec![alpha_per_layer(src)],
        AlphaMode::PerTile => alpha_per_tile(src, spec)?,
    };
    Ok(AlphaSet {
        mode,
        source,
        values,
    })
}

/// Scale the binary tensor by its alphas: each segment `j` of `flat(B)`
/// is multiplied by `alpha_j` (or by the single per-layer alpha).
pub fn scale(binary: &Tensor, alphas: &AlphaSet, spec: &TileSpec) -> Result<Tensor> {
    if binary.count() != spec.n() {
        return Err(Error::ShapeMismatch(format!(
            "binary tensor has {} elements, tile spec expects {}",
            binary.count(),
            spec.n()
        )));
    }
    check_alpha_len(alphas, spec)?;
    let mut out = binary.clone();
    match alphas.mode {
        AlphaMode::PerLayer => {
            let a = alphas.values[0];
            for v in out.data_mut() {
                *v *= a;
            }
        }
        AlphaMode::PerTile => {
            for (segment, &a) in out.data_mut().chunks_exact_mut(spec.q()).zip(&alphas.values) {
                for v in segment {
                    *v *= a;
                }
            }
        }
    }
    Ok(out)
}

fn check_alpha_len(alphas: &AlphaSet, spec: &TileSpec) -> Result<()> {
    let want = match alphas.mode {
        AlphaMode::PerLayer => 1,
        AlphaMode::PerTile => spec.p(),
    };
    if alphas.values.len() != want {
        return Err(Error::AlphaCountMismatch {
            got: alphas.values.len(),
            expected: want,
        });
    }
    Ok(())
}

impl TilingState {
    pub fn new(
        weights: Tensor,
        alpha_weights: Option<Tensor>,
        spec: TileSpec,
        alpha_mode: AlphaMode,
        alpha_source: AlphaSource,
    ) -> Result<Self> {
        if weights.count() != spec.n() {
            return Err(Error::ShapeMismatch(format!(
                "weights have {} elements, tile spec expects {}",
                weights.count(),
                spec.n()
            )));
        }
        match (alpha_source, &alpha_weights) {
            (AlphaSource::FromA, Some(a)) if a.count() == spec.n() => {}
            (AlphaSource::FromW, None) => {}
            (AlphaSource::FromA, Some(_)) => {
                return Err(Error::ShapeMismatch("A shape differs from W".into()))
            }
            (AlphaSource::FromA, None) => {
                return Err(Error::InvalidConfig("FromA requires an A tensor".into()))
            }
            (AlphaSource::FromW, Some(_)) => {
                return Err(Error::InvalidConfig("FromW must not carry an A tensor".into()))
            }
        }
        Ok(TilingState {
            weights,
            alpha_weights,
            spec,
            alpha_mode,
            alpha_source,
            cache: None,
        })
    }

    fn alpha_src(&self) -> &Tensor {
        match self.alpha_source {
            AlphaSource::FromW => &self.weights,
            AlphaSource::FromA => self.alpha_weights.as_ref().expect("checked at construction"),
        }
    }

    /// aggregate -> threshold -> replicate -> alphas -> scale, without
    /// touching the cache. Used by inference paths that must stay pure.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let (_, scaled) = self.run_forward()?;
        Ok(scaled)
    }

    fn run_forward(&self) -> Result<(ForwardCache, Tensor)> {
        let scores = aggregate(&self.weights, &self.spec)?;
        let tile = threshold(&scores);
        let binary = replicate(&tile, &self.spec, self.weights.shape())?;
        let alphas = compute_alphas(self.alpha_src(), &self.spec, self.alpha_mode, self.alpha_source)?;
        let scaled = scale(&binary, &alphas, &self.spec)?;
        Ok((
            ForwardCache {
                tile,
                binary,
                alphas,
                scores,
            },
            scaled,
        ))
    }

    /// Training forward: compute `B_hat` and cache `s`, `t`, `B`, alphas
    /// for the matching backward.
    pub fn tiled_forward(&mut self) -> Result<Tensor> {
        let (cache, scaled) = self.run_forward()?;
        self.cache = Some(cache);
        Ok(scaled)
    }

    /// Cached tile from the last forward, if any.
    pub fn cached_tile(&self) -> Option<&Tile> {
        self.cache.as_ref().map(|c| &c.tile)
    }

    /// Cached alphas from the last forward, if any.
    pub fn cached_alphas(&self) -> Option<&AlphaSet> {
        self.cache.as_ref().map(|c| &c.alphas)
    }

    /// Cached score vector `s` from the last forward, if any.
    pub fn cached_scores(&self) -> Option<&[f32]> {
        self.cache.as_ref().map(|c| c.scores.as_slice())
    }

    /// Cached binary tensor `B` from the last forward, if any.
    pub fn cached_binary(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.binary)
    }

    /// Straight-through backward: `gradW = gradB_hat * alpha` elementwise
    /// (the threshold/tiling chain is treated as identity), plus the exact
    /// alpha-path term `sign(src)/D * sum_segment(gradB_hat * B)` which
    /// lands in `gradA` (`FromA`) or is added into `gradW` (`FromW`).
    pub fn tiled_backward(&self, grad_bhat: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or(Error::StateMissing("tiled_backward before tiled_forward"))?;
        if grad_bhat.count() != self.spec.n() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} elements, layer has {}",
                grad_bhat.count(),
                self.spec.n()
            )));
        }

        let n = self.spec.n();
        let q = self.spec.q();
        let g = grad_bhat.data();
        let b = cache.binary.data();

        // STE term: gradB_hat scaled by the alpha that multiplied each slot.
        let mut grad_w = grad_bhat.clone();
        match cache.alphas.mode {
            AlphaMode::PerLayer => {
                let a = cache.alphas.values[0];
                for v in grad_w.data_mut() {
                    *v *= a;
                }
            }
            AlphaMode::PerTile => {
                for (segment, &a) in grad_w.data_mut().chunks_exact_mut(q).zip(&cache.alphas.values)
                {
                    for v in segment {
                        *v *= a;
                    }
                }
            }
        }

        // Alpha path: dL/dalpha_j = sum over segment j of gradB_hat * B,
        // then dalpha_j/dsrc[idx] = sign(src[idx]) / D.
        let src = self.alpha_src().data();
        let mut alpha_grad = vec![0.0f32; n];
        match cache.alphas.mode {
            AlphaMode::PerLayer => {
                let dot: f32 = g.iter().zip(b).map(|(&gv, &bv)| gv * bv).sum();
                let inv_d = 1.0 / n as f32;
                for (out, &s) in alpha_grad.iter_mut().zip(src) {
                    *out = sign(s) * inv_d * dot;
                }
            }
            AlphaMode::PerTile => {
                let inv_d = 1.0 / q as f32;
                for j in 0..self.spec.p() {
                    let range = j * q..(j + 1) * q;
                    let dot: f32 = g[range.clone()]
                        .iter()
                        .zip(&b[range.clone()])
                        .map(|(&gv, &bv)| gv * bv)
                        .sum();
                    for idx in range {
                        alpha_grad[idx] = sign(src[idx]) * inv_d * dot;
                    }
                }
            }
        }

        match self.alpha_source {
            AlphaSource::FromA => {
                let grad_a = Tensor::new(self.weights.shape().clone(), alpha_grad)?;
                Ok((grad_w, Some(grad_a)))
            }
            AlphaSource::FromW => {
                for (w, a) in grad_w.data_mut().iter_mut().zip(&alpha_grad) {
                    *w += a;
                }
                Ok((grad_w, None))
            }
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Full-precision tiling: segments are averaged (not summed), the mean
/// tile is replicated without threshold or alpha.
pub fn tiled_forward_fp(weights: &Tensor, spec: &TileSpec) -> Result<(Vec<f32>, Tensor)> {
    let tile_fp = segment_reduce(weights, spec, 1.0 / spec.p() as f32)?;
    let mut data = Vec::with_capacity(spec.n());
    for _ in 0..spec.p() {
        data.extend_from_slice(&tile_fp);
    }
    let tiled = Tensor::new(weights.shape().clone(), data)?;
    Ok((tile_fp, tiled))
}

/// Exact adjoint of average-then-replicate:
/// `gradW[j*q+i] = (sum_j' gradWt[j'*q+i]) / p`.
pub fn tiled_backward_fp(spec: &TileSpec, grad_tiled: &Tensor) -> Result<Tensor> {
    let grad_tile = segment_reduce(grad_tiled, spec, 1.0 / spec.p() as f32)?;
    let mut data = Vec::with_capacity(spec.n());
    for _ in 0..spec.p() {
        data.extend_from_slice(&grad_tile);
    }
    Tensor::new(grad_tiled.shape().clone(), data)
}
