//! MNIST ingestion, softmax cross-entropy, Adam, and the training and
//! evaluation loops. Training is single-threaded and deterministic given
//! the seed; the matmuls inside it may still be row-parallel because that
//! never changes per-element accumulation order.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{derive_seed, Model};
use crate::parallel;
use crate::tensor::{self, Shape, Tensor};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// A loaded MNIST split: images scaled into [0,1], labels 0-9.
#[derive(Clone, Debug)]
pub struct MnistDataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: String,
}

impl MnistDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixel count per sample (784 for the standard files).
    pub fn sample_width(&self) -> usize {
        self.images.shape().dims()[1]
    }

    /// Keep only the first `n` samples (handy for quick runs).
    pub fn truncated(&self, n: usize) -> Result<MnistDataset> {
        let n = n.min(self.len());
        let width = self.sample_width();
        Ok(MnistDataset {
            images: Tensor::new(
                Shape::new(&[n, width])?,
                self.images.data()[..n * width].to_vec(),
            )?,
            labels: self.labels[..n].to_vec(),
            split: self.split.clone(),
        })
    }

    /// Rows `[at..]` of a batch as a (rows, width) tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<u8>)> {
        let width = self.sample_width();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::new(Shape::new(&[indices.len(), width])?, data)?,
            labels,
        ))
    }
}

/// Read a whole file, transparently gunzipping if it starts with the gzip
/// magic (the vendored data ships compressed).
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(path.display().to_string()))
}

/// Parse the big-endian IDX pair: images (magic 2051, count x rows x cols
/// unsigned bytes, divided by 255) and labels (magic 2049).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistDataset> {
    let img = read_maybe_gz(images_path)?;
    let magic = be_u32(&img, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let width = rows * cols;
    let pixels = img
        .get(16..16 + count * width)
        .ok_or_else(|| Error::Truncated(images_path.display().to_string()))?;

    let lbl = read_maybe_gz(labels_path)?;
    let lmagic = be_u32(&lbl, 0, labels_path)?;
    if lmagic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            got: lmagic,
            expected: LABELS_MAGIC,
        });
    }
    let lcount = be_u32(&lbl, 4, labels_path)? as usize;
    let labels = lbl
        .get(8..8 + lcount)
        .ok_or_else(|| Error::Truncated(labels_path.display().to_string()))?;
    if count != lcount {
        return Err(Error::CountMismatch {
            images: count,
            labels: lcount,
        });
    }

    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(MnistDataset {
        images: Tensor::new(Shape::new(&[count.max(1), width.max(1)])?, data)?,
        labels: labels.to_vec(),
        split: String::new(),
    })
}

/// Locate `<stem>-images-idx3-ubyte[.gz]` + labels in `dir` and load them.
pub fn load_mnist_split(dir: &Path, stem: &str) -> Result<MnistDataset> {
    let find = |name: &str| -> Result<PathBuf> {
        let plain = dir.join(name);
        if plain.exists() {
            return Ok(plain);
        }
        let gz = dir.join(format!("{name}.gz"));
        if gz.exists() {
            return Ok(gz);
        }
        Err(Error::io(
            plain.display().to_string(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (also tried .gz)"),
        ))
    };
    let mut ds = load_mnist_idx(
        &find(&format!("{stem}-images-idx3-ubyte"))?,
        &find(&format!("{stem}-labels-idx1-ubyte"))?,
    )?;
    ds.split = stem.to_string();
    Ok(ds)
}

// ── Loss ───────────────────────────────────────────────────────────────

/// Numerically-stabilized softmax cross-entropy, mean over the batch.
/// Returns the loss and `gradLogits = (softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor)> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    let mut grad = logits.clone();
    let mut loss_sum = 0.0f64;
    let inv_b = 1.0 / batch as f32;
    for (i, &label) in labels.iter().enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss_sum += f64::from(sum.ln() - (row[label].ln()));
        for (j, v) in row.iter_mut().enumerate() {
            *v /= sum;
            if j == label {
                *v -= 1.0;
            }
            *v *= inv_b;
        }
    }
    Ok(((loss_sum / batch as f64) as f32, grad))
}

// ── Adam ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment buffers, one pair per trainable tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    timestep: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            timestep: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }

    /// One bias-corrected update over aligned params and grads.
    pub fn step(
        &mut self,
        config: &AdamConfig,
        params: &mut [&mut Tensor],
        grads: &[&[f32]],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.timestep += 1;
        let t = self.timestep as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.count() != grad.len() || param.count() != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "adam param/grad/state sizes differ: {} / {} / {}",
                    param.count(),
                    grad.len(),
                    m.len()
                )));
            }
            for (((w, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * g;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }
}

// ── Training loop ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f32,
    pub test_accuracy: f32,
    pub seconds: f64,
}

/// Full training history. Losses and accuracies are deterministic given
/// the seed; wall-clock seconds obviously are not.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn final_accuracy(&self) -> Option<f32> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    pub fn best_accuracy(&self) -> Option<f32> {
        self.epochs
            .iter()
            .map(|e| e.test_accuracy)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f32| a.max(v))))
    }
}

// Stream id for the shuffle PRNG; keeps it disjoint from init streams.
const SHUFFLE_STREAM: u64 = 7;

fn fisher_yates(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        // Unbiased enough for shuffling at these sizes; fixed forever.
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
}

/// Train `model` on `train_ds`, evaluating on `test_ds` after each epoch.
/// Only W and A tensors receive optimizer updates; tiles are re-derived
/// every forward. Pass `stop_at` to end early once a test accuracy is
/// reached.
pub fn train(
    model: &mut Model,
    train_ds: &MnistDataset,
    test_ds: &MnistDataset,
    config: &TrainConfig,
    stop_at: Option<f32>,
) -> Result<Metrics> {
    if model.has_frozen_layers() {
        return Err(Error::InvalidConfig(
            "model contains frozen layers; rebuild it to train".into(),
        ));
    }
    if config.batch_size == 0 || config.adam.learning_rate <= 0.0 {
        return Err(Error::InvalidConfig(
            "batch_size must be >= 1 and learning rate positive".into(),
        ));
    }
    let param_sizes: Vec<usize> = model
        .slots
        .iter_mut()
        .flat_map(|s| {
            s.layer
                .trainable_params_mut()
                .iter()
                .map(|t| t.count())
                .collect::<Vec<_>>()
        })
        .collect();
    let mut adam = AdamState::new(&param_sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0, SHUFFLE_STREAM));
    let mut indices: Vec<usize> = (0..train_ds.len()).collect();
    let mut metrics = Metrics::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        fisher_yates(&mut indices, &mut rng);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let (x, labels) = train_ds.batch(chunk)?;
            let logits = model.forward_train(&x)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "non-finite loss at epoch {epoch} step {steps}"
                )));
            }
            let layer_grads = model.backward(&grad_logits)?;
            let grad_slices: Vec<&[f32]> = layer_grads
                .iter()
                .flat_map(|g| {
                    let mut v = vec![g.grad_w.data()];
                    if let Some(a) = &g.grad_a {
                        v.push(a.data());
                    }
                    v
                })
                .collect();
            let mut params: Vec<&mut Tensor> = model
                .slots
                .iter_mut()
                .flat_map(|s| s.layer.trainable_params_mut())
                .collect();
            adam.step(&config.adam, &mut params, &grad_slices)?;
            loss_sum += loss as f64;
            steps += 1;
        }
        let test_accuracy = evaluate(model, test_ds)?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss: (loss_sum / steps.max(1) as f64) as f32,
            test_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(target) = stop_at {
            if test_accuracy >= target {
                break;
            }
        }
    }
    Ok(metrics)
}

/// Fraction of correct argmax predictions. Side-effect free: weights are
/// materialized into a local buffer and the model is never mutated.
pub fn evaluate(model: &Model, dataset: &MnistDataset) -> Result<f32> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    // Materialize every layer's effective weight once, transposed for the
    // x * W^T product, then shard batches across threads.
    let mut prepared: Vec<(Tensor, bool)> = Vec::with_capacity(model.slots.len());
    let mut linear_only = true;
    for slot in &model.slots {
        match &slot.layer {
            crate::layers::Layer::Linear(_) => {
                let w = slot.layer.effective_weight()?;
                prepared.push((w.transposed2d()?, slot.relu_after));
            }
            crate::layers::Layer::Conv2d(_) => {
                linear_only = false;
                break;
            }
        }
    }

    let batch = 256usize;
    let n_batches = dataset.len().div_ceil(batch);
    let work = dataset.len() * model.slots.first().map_or(1, |s| s.layer.weight_count());
    let correct = parallel::sum_over(n_batches, work, |bi| {
        let lo = bi * batch;
        let hi = (lo + batch).min(dataset.len());
        let indices: Vec<usize> = (lo..hi).collect();
        let (x, labels) = dataset.batch(&indices).expect("in-range batch");
        let logits = if linear_only {
            let mut cur = x;
            for (wt, relu) in &prepared {
                cur = tensor::matmul(&cur, wt).expect("prepared shapes chain");
                if *relu {
                    crate::layers::relu_in_place(&mut cur);
                }
            }
            cur
        } else {
            model.forward(&x).expect("model forward")
        };
        let preds = tensor::argmax_row(&logits).expect("logits are 2-d");
        preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| **p == **l as usize)
            .count()
    });
    Ok(correct as f32 / dataset.len() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_mlp, ModelMode, TilingPolicy};

    fn write_idx_pair(dir: &Path, pixels: &[Vec<u8>], labels: &[u8]) -> (PathBuf, PathBuf) {
        let rows = 2u32;
        let cols = 2u32;
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
        img.extend_from_slice(&rows.to_be_bytes());
        img.extend_from_slice(&cols.to_be_bytes());
        for p in pixels {
            img.extend_from_slice(p);
        }
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lbl.extend_from_slice(labels);
        let ip = dir.join("imgs");
        let lp = dir.join("lbls");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = vec![vec![0u8, 51, 102, 255], vec![255, 0, 255, 0]];
        let (ip, lp) = write_idx_pair(dir.path(), &pixels, &[3, 9]);
        let ds = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_width(), 4);
        assert_eq!(ds.labels, vec![3, 9]);
        let want: Vec<f32> = [0u8, 51, 102, 255, 255, 0, 255, 0]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        assert_eq!(ds.images.data(), want.as_slice());
    }

    #[test]
    fn idx_wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[vec![0, 0, 0, 0]], &[1]);
        // Swapping the files puts the images magic where labels belong.
        let err = load_mnist_idx(&lp, &ip).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        let err2 = load_mnist_idx(&ip, &ip).unwrap_err();
        assert!(matches!(err2, Error::BadMagic { .. }));
    }

    #[test]
    fn idx_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &[vec![0, 0, 0, 0]], &[1]);
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp).unwrap_err(),
            Error::Truncated(_)
        ));
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = write_idx_pair(dir.path(), &[vec![0, 0, 0, 0]], &[1]);
        let dir2 = tempfile::tempdir().unwrap();
        let (_, lp2) = write_idx_pair(dir2.path(), &[vec![0; 4], vec![0; 4]], &[1, 2]);
        assert!(matches!(
            load_mnist_idx(&ip, &lp2).unwrap_err(),
            Error::CountMismatch { .. }
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(Shape::new(&[2, 10]).unwrap());
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 7]).unwrap();
        assert!((loss - 10.0f32.ln()).abs() < 1e-6);
        // Gradient rows sum to zero.
        for i in 0..2 {
            let s: f32 = grad.data()[i * 10..(i + 1) * 10].iter().sum();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut logits = Tensor::zeros(Shape::new(&[1, 4]).unwrap());
        logits.data_mut()[2] = 50.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::zeros(Shape::new(&[1, 4]).unwrap());
        assert!(matches!(
            softmax_cross_entropy(&logits, &[4]).unwrap_err(),
            Error::LabelOutOfRange { .. }
        ));
    }

    /// Independent f64 re-implementation of the loss for the FD oracle.
    fn ce_oracle_f64(logits: &[f64], classes: usize, labels: &[u8]) -> f64 {
        let batch = labels.len();
        let mut total = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            total += sum.ln() - (row[label as usize] - max);
        }
        total / batch as f64
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = tensor::fan_scaled_normal_init(Shape::new(&[3, 5]).unwrap(), 17);
        let labels = [1u8, 4, 0];
        let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let z64: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        assert!((loss as f64 - ce_oracle_f64(&z64, 5, &labels)).abs() < 1e-6);
        let h = 1e-4f64;
        for idx in 0..logits.count() {
            let mut plus = z64.clone();
            plus[idx] += h;
            let mut minus = z64.clone();
            minus[idx] -= h;
            let numeric =
                (ce_oracle_f64(&plus, 5, &labels) - ce_oracle_f64(&minus, 5, &labels)) / (2.0 * h);
            let analytic = grad.data()[idx] as f64;
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "idx {idx}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut p = Tensor::new(Shape::new(&[3]).unwrap(), vec![1.0, -2.0, 3.0]).unwrap();
        let snapshot = p.clone();
        let mut state = AdamState::new(&[3]);
        let zeros = vec![0.0f32; 3];
        state
            .step(&AdamConfig::default(), &mut [&mut p], &[&zeros])
            .unwrap();
        assert_eq!(p, snapshot);
        assert_eq!(state.timestep(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = Tensor::new(Shape::new(&[1]).unwrap(), vec![0.5]).unwrap();
        let mut state = AdamState::new(&[1]);
        let cfg = AdamConfig::default();
        state.step(&cfg, &mut [&mut p], &[&[0.3f32]]).unwrap();
        let moved = 0.5 - p.data()[0];
        assert!((moved - cfg.learning_rate).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adam_matches_independent_scalar_trace() {
        // Oracle: the same recurrence written independently in f64.
        let cfg = AdamConfig::default();
        let grads = [0.3f32, -0.1, 0.25, 0.9, -0.4, 0.0, 0.05, -0.6, 0.33, 0.12];
        let mut w_oracle = 0.7f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut w = Tensor::new(Shape::new(&[1]).unwrap(), vec![0.7]).unwrap();
        let mut state = AdamState::new(&[1]);
        for (t, &g) in grads.iter().enumerate() {
            let gf = g as f64;
            m = 0.9 * m + 0.1 * gf;
            v = 0.999 * v + 0.001 * gf * gf;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w_oracle -= 0.001 * mh / (vh.sqrt() + 1e-8);
            state.step(&cfg, &mut [&mut w], &[&[g]]).unwrap();
            assert!(
                (w.data()[0] as f64 - w_oracle).abs() < 1e-6,
                "step {t}: {} vs {w_oracle}",
                w.data()[0]
            );
        }
    }

    fn toy_dataset(n: usize, width: usize, classes: u8, seed: u64) -> MnistDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * width);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = (rng.next_u64() % classes as u64) as u8;
            for j in 0..width {
                // Class-dependent mean makes the task learnable.
                let base = if j % classes as usize == label as usize { 0.9 } else { 0.1 };
                let noise = (rng.next_u64() % 100) as f32 / 1000.0;
                data.push(base + noise);
            }
            labels.push(label);
        }
        MnistDataset {
            images: Tensor::new(Shape::new(&[n, width]).unwrap(), data).unwrap(),
            labels,
            split: "toy".into(),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(256, 12, 4, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 3,
        };
        let policy = TilingPolicy {
            p: 2,
            lambda: 0,
            ..TilingPolicy::default()
        };
        let run = || {
            let mut m = build_mlp(&[12, 8, 4], ModelMode::Tbn, &policy, 3).unwrap();
            let metrics = train(&mut m, &ds, &ds, &cfg, None).unwrap();
            let losses: Vec<f32> = metrics.epochs.iter().map(|e| e.train_loss).collect();
            let accs: Vec<f32> = metrics.epochs.iter().map(|e| e.test_accuracy).collect();
            (losses, accs)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_learns_toy_task() {
        let ds = toy_dataset(512, 12, 4, 6);
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 1,
        };
        let mut m = build_mlp(&[12, 16, 4], ModelMode::Dense, &TilingPolicy::default(), 1).unwrap();
        let metrics = train(&mut m, &ds, &ds, &cfg, None).unwrap();
        assert!(metrics.final_accuracy().unwrap() > 0.9);
        assert!(metrics.epochs.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn evaluate_counts_by_hand() {
        // Identity-ish model: logits = x, so prediction = argmax pixel.
        let w = Tensor::new(
            Shape::new(&[3, 3]).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let layer = crate::layers::LinearLayer::from_params(
            3,
            3,
            crate::layers::LayerMode::Dense,
            crate::layers::LayerParams::Dense { weights: w },
        );
        let model = Model::new(
            vec![crate::layers::LayerSlot {
                layer: crate::layers::Layer::Linear(layer),
                relu_after: false,
            }],
            crate::layers::ModelMeta {
                lambda: 0,
                seed: 0,
                normalization: crate::layers::Normalization::UnitScale,
            },
        );
        // 5 samples; 3 labeled to match argmax, 2 mislabeled.
        let images = Tensor::new(
            Shape::new(&[5, 3]).unwrap(),
            vec![
                1.0, 0.0, 0.0, // argmax 0
                0.0, 1.0, 0.0, // argmax 1
                0.0, 0.0, 1.0, // argmax 2
                1.0, 0.0, 0.0, // argmax 0
                0.0, 1.0, 0.0, // argmax 1
            ],
        )
        .unwrap();
        let ds = MnistDataset {
            images,
            labels: vec![0, 1, 2, 1, 0],
            split: "fix".into(),
        };
        let acc = evaluate(&model, &ds).unwrap();
        assert!((acc - 0.6).abs() < 1e-6);
        // Evaluation is pure: same answer twice.
        assert_eq!(evaluate(&model, &ds).unwrap(), acc);
    }
}
