//! Dense row-major tensors over a configurable element type.
//!
//! Training runs use `f32`; verification and oracle tests instantiate the
//! same code with `f64`. The [`Scalar`] trait is the only seam between the
//! two.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Element dtype tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_u8(v: u8) -> Result<Dtype> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Floating-point element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense row-major tensor. `data.len()` always equals the product of the
/// extents in `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// 2-D tensor from a closure over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Tensor<T> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Row count, treating 1-D tensors as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count, treating 1-D tensors as one row of `len` columns.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reinterpret the same data under a new shape of equal size.
    pub fn with_shape(mut self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(self.data.len(), shape.iter().product::<usize>());
        self.shape = shape.to_vec();
        self
    }

    /// Elementwise accumulate `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Plain matrix product, used by inference paths and tests.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_kernel(&self.data, &other.data, &mut out.data, m, k, n);
        Ok(out)
    }

    /// Convert elementwise to another scalar type via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by the graph ops and plain-tensor paths.
// ---------------------------------------------------------------------------

/// out += is NOT implied: `out` must be zeroed by the caller. Row-major
/// `a: m x k`, `b: k x n`, `out: m x n`. The k-outer loop keeps the inner
/// loop a contiguous saxpy so it vectorizes.
pub fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

/// `out = a * b^T` with `a: m x k`, `b: n x k`, `out: m x n`. Dot products
/// over contiguous rows of both operands.
pub fn matmul_nt_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out = a^T * b` with `a: k x m`, `b: k x n`, `out: m x n`.
pub fn matmul_tn_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_pi * b_pj;
            }
        }
    }
}

pub fn transpose_kernel<T: Scalar>(x: &[T], out: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
}

/// Euclidean distance between two equal-length slices.
pub fn euclidean<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y.iter()) {
        let d = a - b;
        acc = acc + d * d;
    }
    acc.sqrt()
}

pub fn cosine<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut dot = T::zero();
    let mut nx = T::zero();
    let mut ny = T::zero();
    for (&a, &b) in x.iter().zip(y.iter()) {
        dot = dot + a * b;
        nx = nx + a * a;
        ny = ny + b * b;
    }
    let den = nx.sqrt() * ny.sqrt();
    if den > T::zero() {
        dot / den
    } else {
        T::zero()
    }
}

// ---------------------------------------------------------------------------
// Seeded randomness and initialization.
// ---------------------------------------------------------------------------

/// Derive an independent deterministic RNG from a run seed and a purpose tag.
/// Uses a splitmix64 scramble of `seed ^ tag` so distinct tags give
/// uncorrelated streams; documented here so runs are reproducible across
/// platforms (ChaCha8 is portable).
pub fn rng_stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Uniform(-0.05, 0.05) init used for embedding tables. Sampling happens in
/// f64 and is then cast so f32 and f64 builds see the same stream.
pub fn init_uniform<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-0.05..0.05))).collect();
    Tensor { shape: shape.to_vec(), data }
}

/// Glorot-style fan-scaled uniform init for linear maps of shape
/// `fan_in x fan_out`.
pub fn init_glorot<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor { shape: vec![fan_in, fan_out], data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_extent_product() {
        let err = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let eye = Tensor::<f64>::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let b = Tensor::<f64>::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = eye.matmul(&b).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn transpose_kernels_agree() {
        let mut rng = rng_stream(7, 1);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // a: 3x4, b: 5x4 -> a * b^T : 3x5
        let mut nt = vec![0.0; 15];
        matmul_nt_kernel(&a, &b, &mut nt, 3, 4, 5);
        let mut bt = vec![0.0; 20];
        transpose_kernel(&b, &mut bt, 5, 4);
        let mut plain = vec![0.0; 15];
        matmul_kernel(&a, &bt, &mut plain, 3, 4, 5);
        for (x, y) in nt.iter().zip(plain.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T * a with a viewed as 3x4: (4x3)*(3x4) -> 4x4
        let mut tn = vec![0.0; 16];
        matmul_tn_kernel(&a, &a, &mut tn, 4, 3, 4);
        let mut at = vec![0.0; 12];
        transpose_kernel(&a, &mut at, 3, 4);
        let mut plain2 = vec![0.0; 16];
        matmul_kernel(&at, &a, &mut plain2, 4, 3, 4);
        for (x, y) in tn.iter().zip(plain2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rng_streams_are_deterministic_and_distinct() {
        let mut a1 = rng_stream(42, 1);
        let mut a2 = rng_stream(42, 1);
        let mut b = rng_stream(42, 2);
        let xs1: Vec<u64> = (0..4).map(|_| a1.gen()).collect();
        let xs2: Vec<u64> = (0..4).map(|_| a2.gen()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.gen()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn init_is_identical_across_precisions() {
        let mut r1 = rng_stream(9, 3);
        let mut r2 = rng_stream(9, 3);
        let a: Tensor<f32> = init_uniform(&[4, 4], &mut r1);
        let b: Tensor<f64> = init_uniform(&[4, 4], &mut r2);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
