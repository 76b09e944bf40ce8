//! Dense row-major tensors.
//!
//! Values are held as `f64` regardless of dtype. A tensor tagged [`DType::F32`]
//! keeps every stored value exactly representable in `f32`: values are rounded
//! when the tensor is built, so arithmetic done in `f64` and stored back behaves
//! like single-precision storage.

mod io;

pub use io::{read_tensor, write_tensor, MAGIC};

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Result dtype of combining two operands.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    #[inline]
    pub(crate) fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(shape_err(format!("rank must be 1..=4, got {}", shape.len())));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("dims must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} holds {n} values, data has {}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), data, dtype))
    }

    /// Builds a tensor without validation. Callers guarantee the shape invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            for v in data.iter_mut() {
                *v = dtype.round(*v);
            }
        }
        Self {
            shape,
            dtype,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n], dtype)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Self> {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Result<Self> {
        Self::full(shape, 1.0, dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::from_parts(vec![1], vec![value], dtype)
    }

    pub fn from_fn(shape: &[usize], dtype: DType, f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect(), dtype)
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts(self.shape.clone(), vec![0.0; self.numel()], self.dtype)
    }

    pub fn ones_like(&self) -> Self {
        Self::from_parts(self.shape.clone(), vec![1.0; self.numel()], self.dtype)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Shape padded with leading ones to rank 4.
    pub fn shape4(&self) -> [usize; 4] {
        pad4(&self.shape)
    }

    /// Shape of a tensor that must already be rank 4.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        if self.shape.len() != 4 {
            return Err(shape_err(format!("expected a 4D tensor, got {:?}", self.shape)));
        }
        Ok(self.shape4())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, idx: [usize; 4]) -> f64 {
        let [_, c, h, w] = self.shape4();
        self.data[((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]]
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        if dtype == self.dtype {
            return self.clone();
        }
        Self::from_parts(self.shape.clone(), self.data.to_vec(), dtype)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        if shape.is_empty() || shape.len() > 4 {
            return Err(shape_err(format!("rank must be 1..=4, got {}", shape.len())));
        }
        Ok(Self {
            shape: shape.to_vec(),
            dtype: self.dtype,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.dtype,
        )
    }

    /// Returns `Ok` iff every entry is finite.
    pub fn assert_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFiniteValue { index }),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1usize; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}
