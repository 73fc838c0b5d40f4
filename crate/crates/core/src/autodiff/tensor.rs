use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use super::AutodiffError;

/// On-disk element type tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Floating-point element type of the engine. Training runs in `f32`; `f64`
/// exists for gradient checking and the scaling-law fits.
pub trait Scalar:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    fn put_le(self, out: &mut Vec<u8>);
    fn take_le(bytes: &[u8]) -> Self;

    /// `c = a b + beta c` over strided row-major views; `a: [m, k]`, `b: [k, n]`.
    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: &mut [Self]);
}

/// A matrix view with explicit row and column strides.
#[derive(Debug, Clone, Copy)]
pub struct Strided<'a, F> {
    pub data: &'a [F],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> Strided<'a, F> {
    /// Row-major `[rows, cols]`.
    pub fn rows(data: &'a [F], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [F], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }
}

fn check_gemm<F>(m: usize, k: usize, n: usize, a: &Strided<'_, F>, b: &Strided<'_, F>, c: &[F]) {
    let last = |s: &Strided<'_, F>, r: usize, cc: usize| (r.max(1) - 1) * s.rs + (cc.max(1) - 1) * s.cs;
    assert!(m * k == 0 || last(a, m, k) < a.data.len(), "gemm: a too short");
    assert!(k * n == 0 || last(b, k, n) < b.data.len(), "gemm: b too short");
    assert!(c.len() >= m * n, "gemm: c too short");
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, &a, &b, c);
        // SAFETY: bounds of every strided access were checked above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0,
                a.data.as_ptr(), a.rs as isize, a.cs as isize,
                b.data.as_ptr(), b.rs as isize, b.cs as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: &mut [Self]) {
        check_gemm(m, k, n, &a, &b, c);
        // SAFETY: bounds of every strided access were checked above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.data.as_ptr(), a.rs as isize, a.cs as isize,
                b.data.as_ptr(), b.rs as isize, b.cs as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, AutodiffError> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                shapes: vec![shape, vec![data.len()]],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, AutodiffError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                shapes: vec![self.shape, shape.to_vec()],
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
