//! Dense row-major tensors over a generic scalar.
//!
//! A tensor is a shape plus a reference-counted data buffer, optionally
//! attached to a [`Tape`](crate::autodiff::Tape) node. Every constructor and
//! every operation validates that the produced values are finite, so a NaN
//! or infinity surfaces at the operation that created it rather than three
//! ops later.

use std::fmt;
use std::rc::Rc;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::RngStream;

/// Dense row-major tensor.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    node: Option<(Tape<T>, usize)>,
}

impl<T: Float> Tensor<T> {
    /// Builds a tensor from explicit shape and data, validating length and
    /// finiteness.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        check_finite(&data, "from_vec")?;
        Ok(Self::from_parts(shape, Rc::new(data), None))
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::from_parts(shape, Rc::new(vec![T::zero(); n]), None)
    }

    /// One-filled tensor.
    pub fn ones(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::from_parts(shape, Rc::new(vec![T::one(); n]), None)
    }

    /// Constant-filled tensor.
    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = numel(&shape);
        check_finite(std::slice::from_ref(&value), "full")?;
        Ok(Self::from_parts(shape, Rc::new(vec![value; n]), None))
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Result<Self> {
        Self::from_vec(vec![], vec![value])
    }

    /// Tensor of iid `N(0, stddev^2)` entries drawn from `rng`.
    pub fn randn(shape: Vec<usize>, stddev: T, rng: &mut RngStream) -> Self {
        let n = numel(&shape);
        let mut data = vec![T::zero(); n];
        rng.fill_normal(&mut data);
        for v in data.iter_mut() {
            *v = *v * stddev;
        }
        Self::from_parts(shape, Rc::new(data), None)
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Rc<Vec<T>>,
        node: Option<(Tape<T>, usize)>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Element at a full multi-dimensional index (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape.iter()).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Whether this tensor is recorded on a tape.
    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&(Tape<T>, usize)> {
        self.node.as_ref()
    }

    /// Same values, no tape attachment.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access to the underlying buffer, copying if shared.
    ///
    /// Only valid on detached tensors: mutating a buffer a tape node also
    /// references would corrupt saved activations.
    pub(crate) fn data_mut(&mut self) -> &mut Vec<T> {
        assert!(self.node.is_none(), "cannot mutate an attached tensor");
        Rc::make_mut(&mut self.data)
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        let ellipsis = if self.data.len() > 8 { ", .." } else { "" };
        write!(
            f,
            "Tensor {{ shape: {:?}, attached: {}, data: {:?}{} }}",
            self.shape,
            self.node.is_some(),
            preview,
            ellipsis
        )
    }
}

/// Product of the dimensions; the element count of a shape.
pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Errors if any value is NaN or infinite.
pub(crate) fn check_finite<T: Float>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `C = A * B` for row-major `A: n x k`, `B: k x m`.
///
/// The i-k-j loop order streams rows of `B` and accumulates into one row of
/// `C` at a time; `mul_add` maps to an FMA instruction when the target has
/// one.
pub(crate) fn matmul2d<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * m..(i + 1) * m];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                c_row[j] = a_ik.mul_add(b_row[j], c_row[j]);
            }
        }
    }
    c
}

/// `C = A^T * B` for row-major `A: n x k`, `B: n x m`; result is `k x m`.
pub(crate) fn matmul2d_at_b<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    let mut c = vec![T::zero(); k * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * m..(kk + 1) * m];
            for j in 0..m {
                c_row[j] = a_ik.mul_add(b_row[j], c_row[j]);
            }
        }
    }
    c
}

/// `C = A * B^T` for row-major `A: n x k`, `B: m x k`; result is `n x m`.
pub(crate) fn matmul2d_a_bt<T: Float>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * m..(i + 1) * m];
        for (j, c_ij) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc = a_row[kk].mul_add(b_row[kk], acc);
            }
            *c_ij = acc;
        }
    }
    c
}
