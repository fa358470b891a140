//! Dense multidimensional float tensors and reverse-mode automatic
//! differentiation.
//!
//! The engine is generic over the element type: training runs in `f32`,
//! gradient verification in `f64`. A [`Graph`] records one computation
//! (typically one training step) as an append-only tape; [`Graph::backward`]
//! walks it once in reverse and returns gradients for every tracked leaf.

mod adam;
mod conv;
mod fd;
mod gemm;
mod graph;
mod ops;
mod rng;

pub use adam::{Adam, AdamConfig, AdamState};
pub use fd::{finite_difference_gradient, max_relative_error};
pub use graph::{GradMap, Graph, NodeId, Op};
pub use rng::{hash_str, Rng64};

use crate::error::TensorError;
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element dtype tag used by the checkpoint chunk format.
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
}

/// Float element of a [`Tensor`].
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Builds a tensor from a flat row-major buffer.
    ///
    /// Panics if `product(shape) != data.len()`; that is a programming error,
    /// not a runtime condition.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} expects {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Standard-normal draws from the given stream.
    pub fn randn(shape: &[usize], rng: &mut Rng64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| F::from_f64(rng.normal())).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform draws on [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::from_f64(lo + (hi - lo) * rng.uniform()))
            .collect();
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor<F>, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                msg: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor::from_vec(shape, self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-major strides of this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Axis permutation (copying); output axis `i` takes input axis `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Tensor<F>, TensorError> {
        ops::permute(self, perm)
    }

    /// Sum of elementwise products; both tensors flattened.
    pub fn dot(&self, other: &Tensor<F>) -> F {
        assert_eq!(self.numel(), other.numel());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape of a broadcast pair: shapes are right-aligned, each axis must
/// match or be 1.
pub(crate) fn broadcast_shape(
    a: &[usize],
    b: &[usize],
    op: &'static str,
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::Dimension {
                op,
                msg: format!("cannot broadcast {a:?} with {b:?}"),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if it had `out_rank` axes of
/// sizes `out_shape`; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..rank).rev() {
        if padded[i] == 1 {
            strides[i] = 0;
        } else {
            strides[i] = acc;
        }
        acc *= padded[i];
    }
    strides
}
