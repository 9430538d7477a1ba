//! Dense 32-bit-float tensors with row-major layout.
//!
//! Just enough linear algebra for the rest of the crate: reshape, matmul
//! with a pinned accumulation order, transpose, fan-scaled normal init,
//! and row-wise argmax. No broadcasting, no autodiff, no views.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::parallel;

/// Ordered list of positive dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::ShapeMismatch("shape must have at least one dim".into()));
        }
        let mut count: u64 = 1;
        for &d in dims {
            if d == 0 {
                return Err(Error::ShapeMismatch(format!("zero dimension in {dims:?}")));
            }
            count = count
                .checked_mul(d as u64)
                .ok_or_else(|| Error::ShapeMismatch(format!("element count overflow in {dims:?}")))?;
        }
        let _ = count;
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Total element count `N = d1 * ... * dk`.
    pub fn count(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

/// Row-major f32 tensor. `data.len() == shape.count()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.count();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The two dims of a matrix, or an error for other ranks.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.dims() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::ShapeMismatch(format!(
                "expected a 2-d tensor, got rank {}",
                other.len()
            ))),
        }
    }

    /// Reinterpret the flat data under a new shape. Never reorders data.
    pub fn reshape(&self, new: Shape) -> Result<Tensor> {
        if new.count() != self.count() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} ({} elements) to {} ({} elements)",
                self.shape,
                self.count(),
                new,
                new.count()
            )));
        }
        Ok(Tensor {
            shape: new,
            data: self.data.clone(),
        })
    }

    /// Transposed copy of a 2-d tensor. Pure data movement, no arithmetic.
    pub fn transposed2d(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(Shape::new(&[n, m])?, out)
    }
}

/// `c = a * b` for `a: (m,k)`, `b: (k,n)`.
///
/// Each output element accumulates `a[i][r]*b[r][j]` in ascending `r`,
/// always in f32, so the result is bitwise identical to the naive
/// `(i,j,r)` triple loop. The loop nest iterates `(i,r,j)` for locality
/// and rows are processed in parallel when the `parallel` feature is on;
/// neither changes any per-element accumulation sequence.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims differ: {} vs {}",
            k, kb
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    parallel::for_each_row(&mut out, n, m * n * k, |i, row| {
        matmul_row(&ad[i * k..(i + 1) * k], bd, n, row);
    });
    Tensor::new(Shape::new(&[m, n])?, out)
}

/// Sequential twin of [`matmul`]; bitwise-identical output. Public so the
/// bench suite can compare the two dispatch paths within one build.
pub fn matmul_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims differ: {} vs {}",
            k, kb
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    parallel::for_each_row_seq(&mut out, n, |i, row| {
        matmul_row(&ad[i * k..(i + 1) * k], bd, n, row);
    });
    Tensor::new(Shape::new(&[m, n])?, out)
}

#[inline]
fn matmul_row(arow: &[f32], bd: &[f32], n: usize, row: &mut [f32]) {
    for (r, &av) in arow.iter().enumerate() {
        let brow = &bd[r * n..(r + 1) * n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// Per-row index of the maximum; ties break toward the lowest index.
pub fn argmax_row(t: &Tensor) -> Result<Vec<usize>> {
    let (m, n) = t.dims2()?;
    if n == 0 {
        return Err(Error::ShapeMismatch("argmax over empty rows".into()));
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &t.data()[i * n..(i + 1) * n];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Kaiming-normal init with scale fan: i.i.d. `N(0, 2/fan_in)` where
/// `fan_in = N / first_dim` (input features for linear, `in_ch*kh*kw`
/// for conv).
///
/// The generator is pinned forever: a ChaCha8 stream keyed by `seed`,
/// shaped into normals by the Box-Muller transform. Same `(shape, seed)`
/// gives a bitwise-identical tensor; golden tests rely on this.
pub fn fan_scaled_normal_init(shape: Shape, seed: u64) -> Tensor {
    let n = shape.count();
    let fan_in = n / shape.dims()[0];
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let (z0, z1) = box_muller(&mut rng);
        data.push((z0 * std) as f32);
        if data.len() < n {
            data.push((z1 * std) as f32);
        }
    }
    Tensor { shape, data }
}

/// One Box-Muller step: two standard normals from two uniform draws.
fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // 53-bit uniforms; u1 is shifted off zero so ln(u1) is finite.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}
