//! Dense row-major `f64` tensors with a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major buffer,
//! optionally carrying the id of the tape node that produced it. All math
//! lives in two layers:
//!
//! - [`ops`] — pure forward functions on tensor values,
//! - [`Tape`] — the same operations, recorded so that [`Tape::backward`]
//!   can replay them in reverse and fill a [`GradientStore`].
//!
//! Tensors are immutable once created; a tape is confined to a single
//! inference. Independent tapes can run concurrently.

pub mod ops;
mod tape;

pub use tape::{grad_check, GradientStore, Tape};

use crate::error::{Error, Result};

/// Dense tensor of 64-bit reals, row-major, optionally tracked on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    tape_id: Option<usize>,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()` and
    /// every dimension is positive. Rank-0 tensors hold exactly one value.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, tape_id: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], tape_id: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Tensor {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], tape_id: None }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![], data: vec![value], tape_id: None }
    }

    /// The `n` by `n` identity matrix.
    pub fn identity(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor { shape: vec![n, n], data, tape_id: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Tape node that produced this tensor, if it was recorded.
    pub fn tape_id(&self) -> Option<usize> {
        self.tape_id
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor has more than one element; callers check
    /// shapes first.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Value at a multi-dimensional index (row-major).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (d, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of this tensor without tape tracking.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), tape_id: None }
    }

    pub(crate) fn with_tape_id(mut self, id: usize) -> Tensor {
        self.tape_id = Some(id);
        self
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, tape_id: None }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents so that
/// the flat index of element (o, i, n) is `(o * len + i) * inner + n`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}
