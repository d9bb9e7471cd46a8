//! Minimal reverse-mode autodiff over dense tensors, plus the optimizer,
//! finite-difference gradient checker, and checkpoint format built on it.
//!
//! The design is a define-by-run tape: [`graph::Graph`] executes each op as
//! it is recorded and `backward` walks the tape in reverse. Everything is
//! generic over [`Real`] so the same model code runs in f32 for training and
//! in f64 for finite-difference verification. Reductions and matrix products
//! accumulate in f64 regardless of the element type, which keeps results
//! stable under reordering of mathematically equivalent inputs.

pub mod ckpt;
pub mod gradcheck;
pub mod graph;
pub mod opt;

pub use graph::{Graph, NodeId};
pub use opt::{Adam, ParamStore};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element scalar for tensors: f32 or f64.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Default + std::fmt::Debug + Send + Sync + 'static
{
    fn cast(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite cast")
    }
    fn dbl(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor. 2D shapes are `[rows, cols]`; the 3D conv path
/// uses `[channels, depth, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![T::cast(x)] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&x| T::cast(x)));
        }
        Self { shape: vec![r, c], data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// Lossless element-type conversion (f32 -> f64 or the reverse, rounding).
    pub fn map_to<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::cast(x.dbl())).collect(),
        }
    }
}
