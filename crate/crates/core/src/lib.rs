//! Tiled bit networks: layer weights expressed as a single learned
//! binary vector (a tile) replicated across the layer and scaled by a
//! few alpha floats.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`tensor`]: minimal f32 row-major tensors with a pinned-order matmul
//!   and deterministic fan-scaled normal init (ChaCha8 + Box-Muller);
//! - [`tiling`]: tile construction (aggregate / threshold / replicate),
//!   alpha scaling, straight-through gradients, and the fully
//!   differentiable full-precision tiling variant;
//! - [`layers`]: tiled / binary / dense linear and conv2d layers under a
//!   minimum-size tiling policy, plus a sequential model container;
//! - [`train`]: MNIST IDX loading, softmax cross-entropy, Adam, and the
//!   deterministic training/eval loops;
//! - [`kernels`]: bit-packed inference kernels that keep only the tile
//!   and its alphas resident, with a validation harness against the
//!   materialized dense reference;
//! - [`modelfile`]: the TBN1 serialized format (CRC-protected, bit-exact
//!   round-trips) and storage / memory / bit-ops accounting.
//!
//! Batch-level loops are data-parallel via rayon behind the `parallel`
//! feature (on by default); the sequential fallback is bitwise identical
//! because work is only ever partitioned by output rows.

pub mod error;
pub mod kernels;
pub mod layers;
pub mod modelfile;
mod parallel;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use layers::{build_mlp, Model, ModelMode, TilingPolicy};
pub use tensor::{Shape, Tensor};
pub use tiling::{AlphaMode, AlphaSource, Tile, TileSpec};
pub use train::{evaluate, load_mnist_split, train, MnistDataset, TrainConfig};
