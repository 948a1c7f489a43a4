//! Dense tensors used by the network: contiguous storage, row-major with the
//! last axis fastest, at most four axes (batch x channels x rows x cols).

use std::fmt::{Debug, Display};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar element type for tensor math. `f32` is the training/inference
/// default; `f64` exists for gradient verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense multi-dimensional array. Element `(b, c, r, k)` of a 4-axis tensor
/// lives at offset `((b*C + c)*H + r)*W + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "tensor rank must be 1..=4");
        assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert!(!shape.is_empty() && shape.len() <= 4, "tensor rank must be 1..=4");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape product must equal data length"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The four extents of a 4-axis tensor. Panics on other ranks; callers
    /// validate rank first.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-axis tensor");
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, r: usize, k: usize) -> T {
        let (_, ch, h, w) = self.dims4();
        self.data[((b * ch + c) * h + r) * w + k]
    }

    #[inline]
    pub fn set4(&mut self, b: usize, c: usize, r: usize, k: usize, v: T) {
        let (_, ch, h, w) = self.dims4();
        self.data[((b * ch + c) * h + r) * w + k] = v;
    }

    /// Contiguous `H*W` plane of one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let (_, ch, h, w) = self.dims4();
        let start = (b * ch + c) * h * w;
        &self.data[start..start + h * w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element precision (used to run f32 weights through the
    /// f64 verification path and back).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Integer class labels for a batch of 2D crops, shaped batch x rows x cols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(batch: usize, rows: usize, cols: usize, label: u8) -> Self {
        LabelMap {
            batch,
            rows,
            cols,
            data: vec![label; batch * rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, b: usize, r: usize, k: usize) -> u8 {
        self.data[(b * self.rows + r) * self.cols + k]
    }

    #[inline]
    pub fn set(&mut self, b: usize, r: usize, k: usize, v: u8) {
        self.data[(b * self.rows + r) * self.cols + k] = v;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}
