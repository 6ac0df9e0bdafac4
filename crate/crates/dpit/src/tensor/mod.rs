//! Dense row-major tensors and reverse-mode automatic differentiation.
//!
//! Everything downstream (backbones, encoder, heatmap head) is built from the
//! op set recorded on [`Tape`]. Training runs in f32; gradient checks
//! instantiate the same generic code in f64.

mod grad_check;
mod kernels;
mod tape;

pub use grad_check::{grad_check, sample_coords, CoordCheck, GradCheckReport};
pub use tape::{Tape, ValueId};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type for all numeric code: f32 for training, f64 for checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an f64 literal into the active scalar type.
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Dense tensor with row-major contiguous storage. `grad` is populated by
/// [`Tape::backward`] for nodes that require gradients and always matches
/// `data` in length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {:?} expects {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Gaussian init with the given standard deviation. Samples are drawn in
    /// f64 and narrowed, so the same seed yields the same weights (up to
    /// rounding) in f32 and f64 instantiations.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                lit::<T>(z * std)
            })
            .collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Converts element type, e.g. loading f32 image data into an f64 graph.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| lit::<U>(v.to_f64().unwrap())).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}
