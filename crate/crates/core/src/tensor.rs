//! Dense row-major tensors and the numeric-mode abstraction.
//!
//! Everything downstream is generic over [`Scalar`], which has exactly two
//! implementations: `f64` (verification mode) and `f32` (training mode).
//! The mode is a single switch chosen by the harness config; gradient
//! checking only exists for `f64` because central differences are
//! unreliable in 32-bit arithmetic.

use crate::error::{Result, SacError};
use std::fmt;

/// Which floating-point width a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericMode {
    F32,
    F64,
}

impl fmt::Display for NumericMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericMode::F32 => write!(f, "f32"),
            NumericMode::F64 => write!(f, "f64"),
        }
    }
}

/// Element type of every tensor in the stack.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const MODE: NumericMode;

    fn from_real(v: f64) -> Self;
    fn real(self) -> f64;
}

impl Scalar for f64 {
    const MODE: NumericMode = NumericMode::F64;

    #[inline]
    fn from_real(v: f64) -> Self {
        v
    }
    #[inline]
    fn real(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const MODE: NumericMode = NumericMode::F32;

    #[inline]
    fn from_real(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn real(self) -> f64 {
        self as f64
    }
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
///
/// A scalar is represented by shape `[]` (or `[1]`, both are accepted by
/// reductions and `backward`). `data.len()` always equals the product of
/// the dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(SacError::BadShape {
                op: "Tensor::new",
                shape,
                reason: format!("data length {} does not match shape volume", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![F::zero(); numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Tensor {
            data: vec![value; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| F::from_real(v)).collect())
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<F> {
        if !self.is_scalar() {
            return Err(SacError::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Widen/narrow to another numeric mode. All randomness upstream is
    /// drawn in f64, so converting preserves run-to-run reproducibility.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_real(v.real())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Flat index for a 4-d tensor.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, h: usize, w: usize) -> F {
        self.data[self.idx4(b, c, h, w)]
    }
}
