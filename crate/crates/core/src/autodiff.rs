//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations on attached tensors record nodes on a [`Tape`]; each node
//! stores exactly the values its backward rule needs (inputs, outputs, or
//! per-row statistics). Node ids increase in creation order, so a single
//! reverse sweep over ids is a valid topological order and gradients
//! accumulate naturally at fan-in points. Gradients are materialized for
//! leaf nodes; [`GradientSet::get`] looks them up by the leaf's node id.
//!
//! Kernels with hand-written backward passes (the attention kernels) plug in
//! through [`CustomGrad`] nodes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{check_finite, matmul2d, matmul2d_a_bt, matmul2d_at_b, numel, Tensor};

/// Epsilon inside layer normalization's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608028654;
const GELU_CUBIC_COEF: f64 = 0.044715;

/// Records the computation graph for one forward pass.
///
/// Cloning a `Tape` clones a handle to the same graph.
#[derive(Debug)]
pub struct Tape<T>(Rc<RefCell<Vec<Node<T>>>>);

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(Vec::new())))
    }

    /// Registers `t`'s values as a differentiable leaf on this tape.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Node {
            parents: Vec::new(),
            op: BackOp::Leaf {
                shape: t.shape().to_vec(),
            },
        });
        Tensor::from_parts(t.shape().to_vec(), t.data_rc(), Some((self.clone(), id)))
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.borrow().is_empty()
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.0.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn ptr_eq(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

struct Node<T> {
    /// One slot per conceptual input; `None` marks a constant input that
    /// receives no gradient.
    parents: Vec<Option<usize>>,
    op: BackOp<T>,
}

impl<T> std::fmt::Debug for Node<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Node {{ parents: {:?} }}", self.parents)
    }
}

/// Hand-written backward rule for a fused kernel.
///
/// `backward` receives the gradient of the loss with respect to the node's
/// output and returns one gradient buffer per input slot, in the same order
/// the inputs were passed at the forward call.
pub trait CustomGrad<T: Float> {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[T]) -> Vec<Vec<T>>;
}

enum BackOp<T> {
    Leaf {
        shape: Vec<usize>,
    },
    /// out = lhs + rhs, rhs broadcast across leading dims.
    Add {
        rhs_numel: usize,
    },
    /// out = lhs - rhs, rhs broadcast across leading dims.
    Sub {
        rhs_numel: usize,
    },
    /// Elementwise product of same-shape tensors.
    Mul {
        lhs: Rc<Vec<T>>,
        rhs: Rc<Vec<T>>,
    },
    AddScalar,
    MulScalar {
        c: T,
    },
    Matmul {
        lhs: Rc<Vec<T>>,
        lhs_shape: Vec<usize>,
        rhs: Rc<Vec<T>>,
        rhs_shape: Vec<usize>,
    },
    Relu {
        input: Rc<Vec<T>>,
    },
    Square {
        input: Rc<Vec<T>>,
    },
    Exp {
        output: Rc<Vec<T>>,
    },
    Gelu {
        input: Rc<Vec<T>>,
        tanh_u: Vec<T>,
    },
    SoftmaxLast {
        output: Rc<Vec<T>>,
        row: usize,
    },
    LayerNorm {
        input: Rc<Vec<T>>,
        gamma: Rc<Vec<T>>,
        mean: Vec<T>,
        rstd: Vec<T>,
        row: usize,
    },
    SumAll {
        input_numel: usize,
    },
    MeanAll {
        input_numel: usize,
    },
    Transpose {
        axis_a: usize,
        axis_b: usize,
        out_shape: Vec<usize>,
    },
    Reshape,
    Concat {
        axis: usize,
        part_shapes: Vec<Vec<usize>>,
    },
    Slice {
        axis: usize,
        start: usize,
        in_shape: Vec<usize>,
    },
    IndexSelect {
        axis: usize,
        indices: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Custom(Box<dyn CustomGrad<T>>),
}

/// Finds the tape shared by all attached inputs, if any.
fn single_tape<T: Float>(op: &'static str, inputs: &[&Tensor<T>]) -> Result<Option<Tape<T>>> {
    let mut found: Option<Tape<T>> = None;
    for t in inputs {
        if let Some((tape, _)) = t.node() {
            match &found {
                None => found = Some(tape.clone()),
                Some(existing) if existing.ptr_eq(tape) => {}
                Some(_) => return Err(Error::TapeMismatch { op }),
            }
        }
    }
    Ok(found)
}

/// Validates the output, then either records a node (if any input is
/// attached) or returns a detached tensor.
fn emit<T: Float>(
    op: &'static str,
    out_shape: Vec<usize>,
    data: Vec<T>,
    inputs: &[&Tensor<T>],
    back: BackOp<T>,
) -> Result<Tensor<T>> {
    check_finite(&data, op)?;
    let data = Rc::new(data);
    match single_tape(op, inputs)? {
        None => Ok(Tensor::from_parts(out_shape, data, None)),
        Some(tape) => {
            let parents = inputs
                .iter()
                .map(|t| t.node().map(|(_, id)| *id))
                .collect();
            let id = tape.push(Node { parents, op: back });
            Ok(Tensor::from_parts(out_shape, data, Some((tape, id))))
        }
    }
}

/// Entry point for fused kernels: emits one node whose backward is supplied
/// by the kernel itself.
pub(crate) fn emit_custom<T: Float>(
    op: &'static str,
    out_shape: Vec<usize>,
    data: Vec<T>,
    inputs: &[&Tensor<T>],
    grad: Box<dyn CustomGrad<T>>,
) -> Result<Tensor<T>> {
    emit(op, out_shape, data, inputs, BackOp::Custom(grad))
}

/// Like [`emit_custom`] but for kernels whose backward rule shares the
/// output buffer, avoiding a copy.
pub(crate) fn emit_custom_shared<T: Float>(
    op: &'static str,
    out_shape: Vec<usize>,
    data: Rc<Vec<T>>,
    inputs: &[&Tensor<T>],
    grad: Box<dyn CustomGrad<T>>,
) -> Result<Tensor<T>> {
    emit_shared(op, out_shape, data, inputs, BackOp::Custom(grad))
}

/// True when `rhs` can broadcast across the leading dims of `lhs`, i.e. its
/// shape is a suffix of `lhs`'s shape.
fn suffix_broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs.len() >= rhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl<T: Float> Tensor<T> {
    /// Registers this tensor as a differentiable leaf on `tape`.
    pub fn attach(&self, tape: &Tape<T>) -> Tensor<T> {
        tape.leaf(self)
    }

    /// Elementwise sum; `rhs` may broadcast across leading dimensions
    /// (its shape must be a suffix of `self`'s shape).
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.add_sub(rhs, "add", false)
    }

    /// Elementwise difference with the same broadcast rule as [`Tensor::add`].
    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.add_sub(rhs, "sub", true)
    }

    fn add_sub(&self, rhs: &Tensor<T>, op: &'static str, negate: bool) -> Result<Tensor<T>> {
        if !suffix_broadcast_ok(self.shape(), rhs.shape()) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let s = rhs.len().max(1);
        let a = self.data();
        let b = rhs.data();
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks(s) {
            for (x, y) in chunk.iter().zip(b.iter()) {
                out.push(if negate { *x - *y } else { *x + *y });
            }
        }
        let back = if negate {
            BackOp::Sub { rhs_numel: s }
        } else {
            BackOp::Add { rhs_numel: s }
        };
        emit(op, self.shape().to_vec(), out, &[self, rhs], back)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let out = self
            .data()
            .iter()
            .zip(rhs.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let back = BackOp::Mul {
            lhs: self.data_rc(),
            rhs: rhs.data_rc(),
        };
        emit("mul", self.shape().to_vec(), out, &[self, rhs], back)
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| x + c).collect();
        emit(
            "add_scalar",
            self.shape().to_vec(),
            out,
            &[self],
            BackOp::AddScalar,
        )
    }

    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| x * c).collect();
        emit(
            "mul_scalar",
            self.shape().to_vec(),
            out,
            &[self],
            BackOp::MulScalar { c },
        )
    }

    /// Matrix product. Supports `[..., n, k] x [k, m]` (shared right-hand
    /// matrix) and `[..., n, k] x [..., k, m]` (batched, equal leading dims).
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, out_shape) = matmul_forward(self.data(), self.shape(), rhs.data(), rhs.shape())?;
        let back = BackOp::Matmul {
            lhs: self.data_rc(),
            lhs_shape: self.shape().to_vec(),
            rhs: rhs.data_rc(),
            rhs_shape: rhs.shape().to_vec(),
        };
        emit("matmul", out_shape, out, &[self, rhs], back)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let out = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let back = BackOp::Relu {
            input: self.data_rc(),
        };
        emit("relu", self.shape().to_vec(), out, &[self], back)
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&x| x * x).collect();
        let back = BackOp::Square {
            input: self.data_rc(),
        };
        emit("square", self.shape().to_vec(), out, &[self], back)
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        let out: Vec<T> = self.data().iter().map(|&x| x.exp()).collect();
        let rc = Rc::new(out);
        let back = BackOp::Exp {
            output: Rc::clone(&rc),
        };
        // Unpack the Rc for emit's finite check without copying.
        emit_shared("exp", self.shape().to_vec(), rc, &[self], back)
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let c0 = T::cast(GELU_SQRT_2_OVER_PI);
        let c1 = T::cast(GELU_CUBIC_COEF);
        let half = T::cast(0.5);
        let mut tanh_u = Vec::with_capacity(self.len());
        let out = self
            .data()
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                let t = u.tanh();
                tanh_u.push(t);
                half * x * (T::one() + t)
            })
            .collect();
        let back = BackOp::Gelu {
            input: self.data_rc(),
            tanh_u,
        };
        emit("gelu", self.shape().to_vec(), out, &[self], back)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_last",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let d = self.shape()[self.rank() - 1];
        let mut out = vec![T::zero(); self.len()];
        for (row_in, row_out) in self.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row_in, row_out);
        }
        let rc = Rc::new(out);
        let back = BackOp::SoftmaxLast {
            output: Rc::clone(&rc),
            row: d,
        };
        emit_shared("softmax_last", self.shape().to_vec(), rc, &[self], back)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let d = self.shape()[self.rank() - 1];
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let eps = T::cast(LAYER_NORM_EPS);
        let rows = self.len() / d;
        let inv_d = T::one() / T::cast(d as f64);
        let mut out = vec![T::zero(); self.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let g = gamma.data();
        let b = beta.data();
        for (row_in, row_out) in self.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row_in.iter().copied().sum::<T>() * inv_d;
            let var = row_in
                .iter()
                .map(|&x| {
                    let c = x - mean;
                    c * c
                })
                .sum::<T>()
                * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let back = BackOp::LayerNorm {
            input: self.data_rc(),
            gamma: gamma.data_rc(),
            mean: means,
            rstd: rstds,
            row: d,
        };
        emit(
            "layer_norm",
            self.shape().to_vec(),
            out,
            &[self, gamma, beta],
            back,
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let s = self.data().iter().copied().sum::<T>();
        let back = BackOp::SumAll {
            input_numel: self.len(),
        };
        emit("sum_all", vec![], vec![s], &[self], back)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = T::cast(self.len() as f64);
        let s = self.data().iter().copied().sum::<T>() / n;
        let back = BackOp::MeanAll {
            input_numel: self.len(),
        };
        emit("mean_all", vec![], vec![s], &[self], back)
    }

    /// Swaps two axes (copying).
    pub fn transpose(&self, axis_a: usize, axis_b: usize) -> Result<Tensor<T>> {
        if axis_a >= self.rank() || axis_b >= self.rank() {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![axis_a, axis_b],
            });
        }
        let (out, out_shape) = swap_axes_copy(self.data(), self.shape(), axis_a, axis_b);
        let back = BackOp::Transpose {
            axis_a,
            axis_b,
            out_shape: out_shape.clone(),
        };
        emit("transpose", out_shape, out, &[self], back)
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel(&new_shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape,
            });
        }
        match self.node() {
            None => Ok(Tensor::from_parts(new_shape, self.data_rc(), None)),
            Some(_) => emit_shared(
                "reshape",
                new_shape,
                self.data_rc(),
                &[self],
                BackOp::Reshape,
            ),
        }
    }

    /// Concatenates tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or(Error::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            let ok = p.rank() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let seg = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * seg..(o + 1) * seg]);
            }
        }
        let back = BackOp::Concat {
            axis,
            part_shapes: parts.iter().map(|p| p.shape().to_vec()).collect(),
        };
        emit("concat", out_shape, out, parts, back)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice_axis",
                lhs: self.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let indices: Vec<usize> = (start..start + len).collect();
        let (out, out_shape) = gather_axis(self.data(), self.shape(), axis, &indices);
        let back = BackOp::Slice {
            axis,
            start,
            in_shape: self.shape().to_vec(),
        };
        emit("slice_axis", out_shape, out, &[self], back)
    }

    /// Gathers the given positions along `axis`, in order.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
        if axis >= self.rank() || indices.iter().any(|&i| i >= self.shape()[axis]) {
            return Err(Error::ShapeMismatch {
                op: "index_select",
                lhs: self.shape().to_vec(),
                rhs: indices.to_vec(),
            });
        }
        let (out, out_shape) = gather_axis(self.data(), self.shape(), axis, indices);
        let back = BackOp::IndexSelect {
            axis,
            indices: indices.to_vec(),
            in_shape: self.shape().to_vec(),
        };
        emit("index_select", out_shape, out, &[self], back)
    }

    /// Runs reverse-mode differentiation from this scalar.
    ///
    /// Returns the gradients of every leaf on the path from the leaves to
    /// this value. Gradients of leaves not on the path are absent (treat as
    /// zero).
    pub fn backward(&self) -> Result<GradientSet<T>> {
        let (tape, loss_id) = match self.node() {
            Some((tape, id)) => (tape.clone(), *id),
            None => return Err(Error::DetachedNode),
        };
        if self.len() != 1 {
            return Err(Error::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        let nodes = tape.0.borrow();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss_id + 1];
        grads[loss_id] = Some(vec![T::one()]);
        let mut leaves: HashMap<usize, Tensor<T>> = HashMap::new();

        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let BackOp::Leaf { shape } = &node.op {
                check_finite(&g, "backward")?;
                leaves.insert(id, Tensor::from_parts(shape.clone(), Rc::new(g), None));
                continue;
            }
            let contribs = backward_step(&node.op, &g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (slot, contrib) in contribs.into_iter().enumerate() {
                if let Some(pid) = node.parents[slot] {
                    accumulate(&mut grads[pid], contrib);
                }
            }
        }
        drop(nodes);
        Ok(GradientSet { tape, leaves })
    }
}

/// Like `emit` but reuses an `Rc` the backward rule also holds, avoiding a
/// copy of the output buffer.
fn emit_shared<T: Float>(
    op: &'static str,
    out_shape: Vec<usize>,
    data: Rc<Vec<T>>,
    inputs: &[&Tensor<T>],
    back: BackOp<T>,
) -> Result<Tensor<T>> {
    check_finite(&data, op)?;
    match single_tape(op, inputs)? {
        None => Ok(Tensor::from_parts(out_shape, data, None)),
        Some(tape) => {
            let parents = inputs
                .iter()
                .map(|t| t.node().map(|(_, id)| *id))
                .collect();
            let id = tape.push(Node { parents, op: back });
            Ok(Tensor::from_parts(out_shape, data, Some((tape, id))))
        }
    }
}

/// Gradients of the leaves reachable from a `backward` call.
pub struct GradientSet<T> {
    tape: Tape<T>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Float> GradientSet<T> {
    /// Gradient with respect to `leaf`, if it was on the differentiated
    /// path. `leaf` must be the attached tensor returned by
    /// [`Tape::leaf`] / [`Tensor::attach`].
    pub fn get(&self, leaf: &Tensor<T>) -> Option<&Tensor<T>> {
        let (tape, id) = leaf.node()?;
        if !tape.ptr_eq(&self.tape) {
            return None;
        }
        self.leaves.get(id)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn accumulate<T: Float>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        None => *slot = Some(contrib),
        Some(existing) => {
            debug_assert_eq!(existing.len(), contrib.len());
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
    }
}

/// Computes the gradient contribution for each input slot of one node.
fn backward_step<T: Float>(op: &BackOp<T>, g: &[T]) -> Vec<Vec<T>> {
    match op {
        BackOp::Leaf { .. } => unreachable!("leaves are handled by the caller"),
        BackOp::Add { rhs_numel } => {
            vec![g.to_vec(), fold_suffix(g, *rhs_numel, false)]
        }
        BackOp::Sub { rhs_numel } => {
            vec![g.to_vec(), fold_suffix(g, *rhs_numel, true)]
        }
        BackOp::Mul { lhs, rhs } => {
            let da = g.iter().zip(rhs.iter()).map(|(&gi, &r)| gi * r).collect();
            let db = g.iter().zip(lhs.iter()).map(|(&gi, &l)| gi * l).collect();
            vec![da, db]
        }
        BackOp::AddScalar => vec![g.to_vec()],
        BackOp::MulScalar { c } => vec![g.iter().map(|&gi| gi * *c).collect()],
        BackOp::Matmul {
            lhs,
            lhs_shape,
            rhs,
            rhs_shape,
        } => matmul_backward(lhs, lhs_shape, rhs, rhs_shape, g),
        BackOp::Relu { input } => {
            vec![g
                .iter()
                .zip(input.iter())
                .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                .collect()]
        }
        BackOp::Square { input } => {
            let two = T::cast(2.0);
            vec![g
                .iter()
                .zip(input.iter())
                .map(|(&gi, &x)| two * x * gi)
                .collect()]
        }
        BackOp::Exp { output } => {
            vec![g.iter().zip(output.iter()).map(|(&gi, &y)| gi * y).collect()]
        }
        BackOp::Gelu { input, tanh_u } => {
            let c0 = T::cast(GELU_SQRT_2_OVER_PI);
            let c1 = T::cast(GELU_CUBIC_COEF);
            let half = T::cast(0.5);
            let three = T::cast(3.0);
            vec![g
                .iter()
                .zip(input.iter().zip(tanh_u.iter()))
                .map(|(&gi, (&x, &t))| {
                    let sech2 = T::one() - t * t;
                    let du = c0 * (T::one() + three * c1 * x * x);
                    let d = half * (T::one() + t) + half * x * sech2 * du;
                    gi * d
                })
                .collect()]
        }
        BackOp::SoftmaxLast { output, row } => {
            let d = *row;
            let mut dx = vec![T::zero(); g.len()];
            for ((g_row, p_row), dx_row) in
                g.chunks(d).zip(output.chunks(d)).zip(dx.chunks_mut(d))
            {
                let dot = g_row
                    .iter()
                    .zip(p_row.iter())
                    .map(|(&gi, &p)| gi * p)
                    .sum::<T>();
                for j in 0..d {
                    dx_row[j] = p_row[j] * (g_row[j] - dot);
                }
            }
            vec![dx]
        }
        BackOp::LayerNorm {
            input,
            gamma,
            mean,
            rstd,
            row,
        } => layer_norm_backward(input, gamma, mean, rstd, *row, g),
        BackOp::SumAll { input_numel } => {
            vec![vec![g[0]; *input_numel]]
        }
        BackOp::MeanAll { input_numel } => {
            let scale = g[0] / T::cast(*input_numel as f64);
            vec![vec![scale; *input_numel]]
        }
        BackOp::Transpose {
            axis_a,
            axis_b,
            out_shape,
        } => {
            let (dx, _) = swap_axes_copy(g, out_shape, *axis_a, *axis_b);
            vec![dx]
        }
        BackOp::Reshape => vec![g.to_vec()],
        BackOp::Concat { axis, part_shapes } => {
            let outer: usize = part_shapes[0][..*axis].iter().product();
            let inner: usize = part_shapes[0][*axis + 1..].iter().product();
            let total_axis: usize = part_shapes.iter().map(|s| s[*axis]).sum();
            let mut grads: Vec<Vec<T>> = part_shapes
                .iter()
                .map(|s| Vec::with_capacity(numel(s)))
                .collect();
            for o in 0..outer {
                let mut offset = o * total_axis * inner;
                for (p, s) in grads.iter_mut().zip(part_shapes) {
                    let seg = s[*axis] * inner;
                    p.extend_from_slice(&g[offset..offset + seg]);
                    offset += seg;
                }
            }
            grads
        }
        BackOp::Slice {
            axis,
            start,
            in_shape,
        } => {
            let out_axis = g.len()
                / (in_shape[..*axis].iter().product::<usize>()
                    * in_shape[*axis + 1..].iter().product::<usize>())
                .max(1);
            let indices: Vec<usize> = (*start..*start + out_axis).collect();
            vec![scatter_add_axis(g, in_shape, *axis, &indices)]
        }
        BackOp::IndexSelect {
            axis,
            indices,
            in_shape,
        } => {
            vec![scatter_add_axis(g, in_shape, *axis, indices)]
        }
        BackOp::Custom(custom) => custom.backward(g),
    }
}

/// Sums `g` over leading dims down to a suffix of `rhs_numel` elements,
/// optionally negating (for subtraction's right operand).
fn fold_suffix<T: Float>(g: &[T], rhs_numel: usize, negate: bool) -> Vec<T> {
    let mut out = vec![T::zero(); rhs_numel];
    for chunk in g.chunks(rhs_numel) {
        for (o, &c) in out.iter_mut().zip(chunk.iter()) {
            *o += c;
        }
    }
    if negate {
        for o in out.iter_mut() {
            *o = -*o;
        }
    }
    out
}

pub(crate) fn softmax_row<T: Float>(row_in: &[T], row_out: &mut [T]) {
    let mut max = row_in[0];
    for &x in &row_in[1..] {
        max = max.max(x);
    }
    let mut sum = T::zero();
    for (o, &x) in row_out.iter_mut().zip(row_in.iter()) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in row_out.iter_mut() {
        *o = *o * inv;
    }
}

fn matmul_forward<T: Float>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
) -> Result<(Vec<T>, Vec<usize>)> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a_shape.to_vec(),
        rhs: b_shape.to_vec(),
    };
    if a_shape.len() < 2 {
        return Err(mismatch());
    }
    let n = a_shape[a_shape.len() - 2];
    let k = a_shape[a_shape.len() - 1];
    if b_shape.len() == 2 {
        // Shared right-hand matrix: flatten leading dims of `a`.
        if b_shape[0] != k {
            return Err(mismatch());
        }
        let m = b_shape[1];
        let rows = a.len() / k;
        let out = matmul2d(a, b, rows, k, m);
        let mut out_shape = a_shape.to_vec();
        *out_shape.last_mut().unwrap() = m;
        Ok((out, out_shape))
    } else if b_shape.len() == a_shape.len() {
        // Batched: equal leading dims.
        if a_shape[..a_shape.len() - 2] != b_shape[..b_shape.len() - 2] || b_shape[b_shape.len() - 2] != k
        {
            return Err(mismatch());
        }
        let m = b_shape[b_shape.len() - 1];
        let batches: usize = a_shape[..a_shape.len() - 2].iter().product();
        let mut out = Vec::with_capacity(batches * n * m);
        for bi in 0..batches {
            let a_b = &a[bi * n * k..(bi + 1) * n * k];
            let b_b = &b[bi * k * m..(bi + 1) * k * m];
            out.extend(matmul2d(a_b, b_b, n, k, m));
        }
        let mut out_shape = a_shape.to_vec();
        *out_shape.last_mut().unwrap() = m;
        Ok((out, out_shape))
    } else {
        Err(mismatch())
    }
}

fn matmul_backward<T: Float>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    g: &[T],
) -> Vec<Vec<T>> {
    let k = a_shape[a_shape.len() - 1];
    if b_shape.len() == 2 {
        let m = b_shape[1];
        let rows = a.len() / k;
        // dA = g B^T, dB = A^T g, with `a` and `g` flattened to 2-D.
        let da = matmul2d_a_bt(g, b, rows, m, k);
        let db = matmul2d_at_b(a, g, rows, k, m);
        vec![da, db]
    } else {
        let n = a_shape[a_shape.len() - 2];
        let m = b_shape[b_shape.len() - 1];
        let batches: usize = a_shape[..a_shape.len() - 2].iter().product();
        let mut da = Vec::with_capacity(a.len());
        let mut db = Vec::with_capacity(b.len());
        for bi in 0..batches {
            let a_b = &a[bi * n * k..(bi + 1) * n * k];
            let b_b = &b[bi * k * m..(bi + 1) * k * m];
            let g_b = &g[bi * n * m..(bi + 1) * n * m];
            da.extend(matmul2d_a_bt(g_b, b_b, n, m, k));
            db.extend(matmul2d_at_b(a_b, g_b, n, k, m));
        }
        vec![da, db]
    }
}

fn layer_norm_backward<T: Float>(
    input: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    d: usize,
    g: &[T],
) -> Vec<Vec<T>> {
    let inv_d = T::one() / T::cast(d as f64);
    let mut dx = vec![T::zero(); input.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for (r, (x_row, g_row)) in input.chunks(d).zip(g.chunks(d)).enumerate() {
        let mu = mean[r];
        let rs = rstd[r];
        // dxhat = g * gamma; dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (x_row[j] - mu) * rs;
            let dxhat = g_row[j] * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[j] += g_row[j] * xhat;
            dbeta[j] += g_row[j];
        }
        let m1 = sum_dxhat * inv_d;
        let m2 = sum_dxhat_xhat * inv_d;
        let dx_row = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (x_row[j] - mu) * rs;
            let dxhat = g_row[j] * gamma[j];
            dx_row[j] = rs * (dxhat - m1 - xhat * m2);
        }
    }
    vec![dx, dgamma, dbeta]
}

/// Copies `data` with axes `a` and `b` swapped; returns the new buffer and
/// shape.
fn swap_axes_copy<T: Float>(
    data: &[T],
    shape: &[usize],
    a: usize,
    b: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    if a == b {
        return (data.to_vec(), out_shape);
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    // View the input as [outer, A, mid, B, inner] and emit [outer, B, mid, A, inner].
    let outer: usize = shape[..lo].iter().product();
    let dim_a = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let dim_b = shape[hi];
    let inner: usize = shape[hi + 1..].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for ia in 0..dim_a {
            for im in 0..mid {
                for ib in 0..dim_b {
                    let src = ((((o * dim_a + ia) * mid) + im) * dim_b + ib) * inner;
                    let dst = ((((o * dim_b + ib) * mid) + im) * dim_a + ia) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    (out, out_shape)
}

/// Gathers `indices` along `axis`; returns the new buffer and shape.
fn gather_axis<T: Float>(
    data: &[T],
    shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = indices.len();
    let mut out = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for &ix in indices {
            let src = (o * dim + ix) * inner;
            out.extend_from_slice(&data[src..src + inner]);
        }
    }
    (out, out_shape)
}

/// Adjoint of `gather_axis`: scatter-adds rows of `g` back into a zero
/// buffer of the input shape (accumulating on repeated indices).
fn scatter_add_axis<T: Float>(
    g: &[T],
    in_shape: &[usize],
    axis: usize,
    indices: &[usize],
) -> Vec<T> {
    let outer: usize = in_shape[..axis].iter().product();
    let dim = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); numel(in_shape)];
    let mut src = 0;
    for o in 0..outer {
        for &ix in indices {
            let dst = (o * dim + ix) * inner;
            for j in 0..inner {
                out[dst + j] += g[src + j];
            }
            src += inner;
        }
    }
    out
}
