//! Dense rank-4 tensors and reverse-mode automatic differentiation.
//!
//! Every value in this crate is a [`Tensor`]: a dense `(n, c, h, w)` array of
//! `f64` in row-major order. Gradients come from a [`Tape`]: forward
//! operations are recorded as [`Prim`] applications and replayed in reverse
//! by [`Tape::backward`], which accumulates gradients for every reachable
//! [`Parameter`] leaf.
//!
//! The engine is deliberately small: only the primitives needed by the
//! operation catalog, the relaxed cell/grid forward and the segmentation
//! losses exist, all in 64-bit arithmetic, all deterministic.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::finite_diff_check;
pub use params::{Gradients, ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{Axis, Conv2dSpec, ConvT2dSpec, NodeId, Prim, Tape};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),
    #[error("odd spatial size: {0}")]
    OddSpatialSize(String),
    #[error("backward requires a scalar output, got {0:?}")]
    NonScalarOutput(Shape),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

/// Shape of a rank-4 tensor: `(batch, channels, rows, cols)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// The scalar shape `(1, 1, 1, 1)`.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Flat row-major index of `(n, c, h, w)`.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array of `f64`, row-major `(n, c, h, w)`.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// A `(1,1,1,1)` tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "data length {} does not match shape {}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f` at every `(n, c, h, w)` position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = value;
    }

    /// Value of a `(1,1,1,1)` tensor.
    ///
    /// Panics if the tensor is not scalar; callers own that contract.
    pub fn scalar_value(&self) -> f64 {
        assert!(
            self.shape.is_scalar(),
            "scalar_value on non-scalar tensor {}",
            self.shape
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Largest absolute difference to `other`; `inf` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.len(), 120);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), 119);
    }

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 4]).is_ok());
    }

    #[test]
    fn from_fn_matches_get() {
        let t = Tensor::from_fn(Shape::new(2, 2, 3, 3), |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f64
        });
        assert_eq!(t.get(1, 0, 2, 1), 1021.0);
        assert_eq!(t.get(0, 1, 0, 0), 100.0);
    }
}
