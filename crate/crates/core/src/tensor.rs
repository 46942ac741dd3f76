//! Dense row-major tensors.
//!
//! A [`Tensor`] is an owned `(shape, data)` pair. There is no implicit
//! broadcasting: binary operations require identical shapes, and
//! [`Tensor::broadcast_to`] must be called explicitly to repeat a tensor over
//! leading axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision for every numeric computation.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of [`Real`] as recorded in file manifests.
#[cfg(not(feature = "f32"))]
pub const REAL_DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const REAL_DTYPE: &str = "f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting a length mismatch or any non-finite element.
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        assert!(value.is_finite(), "Tensor::full with non-finite value");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: Real) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    /// Constructor for values produced by kernels in this crate, which are
    /// finite-checked at layer boundaries instead of here.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Real>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
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

    pub fn as_slice(&self) -> &[Real] {
        &self.data
    }

    /// Mutable access to the raw elements. Callers writing non-finite values
    /// break the tensor invariant; [`Tensor::check_finite`] re-validates.
    pub fn as_mut_slice(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Real> {
        self.data
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Element at a multi-index (panics when out of bounds).
    pub fn at(&self, index: &[usize]) -> Real {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            assert!(i < extent, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * extent + i;
        }
        self.data[flat]
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        self.clone().into_shape(new_shape)
    }

    pub fn into_shape(mut self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.data.len() {
            return Err(Error::shape("reshape", new_shape, &self.shape));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        let f: fn(Real, Real) -> Real = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
            BinaryOp::Div => |a, b| a / b,
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor::from_parts(self.shape.clone(), data);
        out.check_finite("elementwise")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Div)
    }

    /// Repeats `self` over new leading axes so that its shape matches the
    /// trailing axes of `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        if shape.len() < rank || shape[shape.len() - rank..] != self.shape[..] {
            return Err(Error::shape("broadcast_to", shape, &self.shape));
        }
        let reps = numel(&shape[..shape.len() - rank]);
        let mut data = Vec::with_capacity(reps * self.data.len());
        for _ in 0..reps {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Result<Tensor> {
        let out = Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect());
        out.check_finite("map")?;
        Ok(out)
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Real {
        self.sum() / self.data.len() as Real
    }

    pub fn fill(&mut self, value: Real) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Index of the largest element in each row of a rank-2 tensor; ties
    /// resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.shape.len(), 2, "argmax_rows needs a rank-2 tensor");
        self.data
            .chunks_exact(self.shape[1])
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Row-major matrix kernels over raw slices.
///
/// Each output row is accumulated in a fixed order that does not depend on
/// the number of rows, so batching never changes per-row results.
pub mod linalg {
    use super::Real;

    /// `c[m×n] += a[m×k] · b[k×n]`
    pub fn matmul_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
                if a_ip == 0.0 {
                    continue;
                }
                for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                    *c_ij += a_ip * b_pj;
                }
            }
        }
    }

    /// `c[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
    pub fn matmul_at_b_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * n);
        debug_assert_eq!(c.len(), k * n);
        for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
            for (&a_ip, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
                if a_ip == 0.0 {
                    continue;
                }
                for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                    *c_pj += a_ip * b_ij;
                }
            }
        }
    }

    /// `c[m×k] = a[m×n] · bᵀ` for `b[k×n]`.
    pub fn matmul_a_bt(a: &[Real], b: &[Real], c: &mut [Real], m: usize, n: usize, k: usize) {
        debug_assert_eq!(a.len(), m * n);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * k);
        for (a_row, c_row) in a.chunks_exact(n).zip(c.chunks_exact_mut(k)) {
            for (c_ip, b_row) in c_row.iter_mut().zip(b.chunks_exact(n)) {
                *c_ip = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            }
        }
    }
}
