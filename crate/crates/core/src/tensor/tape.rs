//! Reverse-mode autodiff on a linear tape.
//!
//! Operations append nodes to a [`Tape`]; [`Tensor`] is a cheap handle into
//! it. Inputs always precede outputs on the tape, so one reverse sweep over
//! node ids replays the chain rule with each node visited exactly once. The
//! tape is single-threaded by contract; forward-only work that wants
//! parallelism builds an independent tape per worker.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::data::TensorData;
use super::kernels;

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Conv2d { input: usize, kernel: usize, bias: Option<usize> },
    ChannelAffine { x: usize, gamma: usize, beta: usize },
    Softmax { x: usize, axis: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AffineScalar { x: usize, mul: T },
    Abs { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Log { x: usize },
    Exp { x: usize },
    Clamp { x: usize, lo: T, hi: T },
    Sum { x: usize },
    Mean { x: usize },
    SumAxis { x: usize, axis: usize },
    L2Normalize { x: usize, axis: usize },
    Reshape { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Softmax { .. } => "softmax",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AffineScalar { .. } => "affine_scalar",
            Op::Abs { .. } => "abs",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
        }
    }

    fn axis(&self) -> Option<usize> {
        match self {
            Op::Softmax { axis, .. }
            | Op::SumAxis { axis, .. }
            | Op::L2Normalize { axis, .. }
            | Op::Concat { axis, .. } => Some(*axis),
            _ => None,
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug, Default)]
struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Recorded operation metadata, for instrumentation and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub axis: Option<usize>,
}

/// The gradient tape. Cloning shares the underlying record.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar>(Rc<RefCell<TapeInner<T>>>);

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            backward_done: false,
        })))
    }

    /// Insert a value as a tape leaf.
    pub fn leaf(&self, value: &TensorData<T>, requires_grad: bool) -> Tensor<T> {
        self.push(
            value.shape().to_vec(),
            value.data().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    /// Insert a value that never receives gradient.
    pub fn constant(&self, value: &TensorData<T>) -> Tensor<T> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One record per executed operation, in execution order.
    pub fn op_records(&self) -> Vec<OpRecord> {
        self.0
            .borrow()
            .nodes
            .iter()
            .map(|n| OpRecord {
                name: n.op.name(),
                shape: n.shape.clone(),
                axis: n.op.axis(),
            })
            .collect()
    }

    /// Clear all gradients and re-arm backward.
    pub fn reset_grads(&self) {
        let mut inner = self.0.borrow_mut();
        for n in &mut inner.nodes {
            n.grad = None;
        }
        inner.backward_done = false;
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Tensor<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            op,
            requires_grad,
            grad: None,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    id: usize,
    shape: Vec<usize>,
}

/// Leading-1 broadcast analysis: `b` must equal `a`, or one operand (after
/// left-padding with 1s) must be all-1 extents followed by the other's
/// trailing extents. The smaller operand then tiles over the output.
fn broadcast_out(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    fn pad(s: &[usize], r: usize) -> Vec<usize> {
        let mut v = vec![1; r - s.len()];
        v.extend_from_slice(s);
        v
    }
    fn tiles_over(small: &[usize], big: &[usize]) -> bool {
        let q = small.iter().position(|&e| e != 1).unwrap_or(small.len());
        small[q..] == big[q..]
    }
    let r = a.len().max(b.len());
    let (pa, pb) = (pad(a, r), pad(b, r));
    if pa == pb {
        Some(if a.len() >= b.len() { a.to_vec() } else { b.to_vec() })
    } else if tiles_over(&pa, &pb) {
        Some(b.to_vec())
    } else if tiles_over(&pb, &pa) {
        Some(a.to_vec())
    } else {
        None
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.0.borrow().nodes[self.id].requires_grad
    }

    /// Copy of the node's value.
    pub fn value(&self) -> TensorData<T> {
        let inner = self.tape.0.borrow();
        let n = &inner.nodes[self.id];
        TensorData::new(n.shape.clone(), n.data.clone()).expect("node invariant")
    }

    pub fn scalar_value(&self) -> Result<T> {
        let inner = self.tape.0.borrow();
        let n = &inner.nodes[self.id];
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "scalar_value on tensor of shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    /// Gradient populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<TensorData<T>> {
        let inner = self.tape.0.borrow();
        let n = &inner.nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| TensorData::new(n.shape.clone(), g.clone()).expect("grad invariant"))
    }

    fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        let inner = self.tape.0.borrow();
        f(&inner.nodes[self.id].data)
    }

    fn check_same_tape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if !self.tape.same_as(&other.tape) {
            return Err(Error::Contract(format!("{op}: operands on different tapes")));
        }
        Ok(())
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_tape(rhs, "matmul")?;
        let (ls, rs) = (&self.shape, &rhs.shape);
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.clone(),
                rhs: rs.clone(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![T::zero(); m * n];
        self.with_data(|a| rhs.with_data(|b| kernels::matmul(a, b, m, k, n, &mut out)));
        Ok(self.tape.push(
            vec![m, n],
            out,
            Op::Matmul { a: self.id, b: rhs.id },
            self.requires_grad() || rhs.requires_grad(),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::Contract(format!(
                "transpose needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        self.with_data(|x| kernels::transpose(x, r, c, &mut out));
        Ok(self
            .tape
            .push(vec![c, r], out, Op::Transpose { x: self.id }, self.requires_grad()))
    }

    /// Same-padded cross-correlation. Input `[C,H,W]` or `[N,C,H,W]`,
    /// kernel `[O,C,k,k]` with odd k, optional bias `[O]`.
    pub fn conv2d(&self, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.check_same_tape(kernel, "conv2d")?;
        if let Some(b) = bias {
            self.check_same_tape(b, "conv2d")?;
        }
        let ks = &kernel.shape;
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: ks.clone(),
            });
        }
        let k = ks[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size must be odd, got {k}")));
        }
        let (n, cin, h, w, batched) = match self.shape.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape.clone(),
                    rhs: ks.clone(),
                })
            }
        };
        if ks[1] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: ks.clone(),
            });
        }
        let cout = ks[0];
        if let Some(b) = bias {
            if b.shape != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: b.shape.clone(),
                });
            }
        }
        let mut out = vec![T::zero(); n * cout * h * w];
        self.with_data(|inp| {
            kernel.with_data(|kd| match bias {
                Some(b) => b.with_data(|bd| {
                    kernels::conv2d(inp, n, cin, h, w, kd, cout, k, Some(bd), &mut out)
                }),
                None => kernels::conv2d(inp, n, cin, h, w, kd, cout, k, None, &mut out),
            })
        });
        let out_shape = if batched {
            vec![n, cout, h, w]
        } else {
            vec![cout, h, w]
        };
        let requires = self.requires_grad()
            || kernel.requires_grad()
            || bias.map_or(false, |b| b.requires_grad());
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
            },
            requires,
        ))
    }

    /// Per-channel affine `y[..,c,h,w] = gamma[c] * x[..,c,h,w] + beta[c]`.
    pub fn channel_affine(&self, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_tape(gamma, "channel_affine")?;
        self.check_same_tape(beta, "channel_affine")?;
        let c = match self.shape.as_slice() {
            [c, _, _] => *c,
            [_, c, _, _] => *c,
            _ => {
                return Err(Error::Contract(format!(
                    "channel_affine needs rank 3 or 4, got {:?}",
                    self.shape
                )))
            }
        };
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let plane: usize = self.shape[self.shape.len() - 2..].iter().product();
        let mut out = vec![T::zero(); self.numel()];
        self.with_data(|x| {
            gamma.with_data(|g| {
                beta.with_data(|b| {
                    for (i, &xv) in x.iter().enumerate() {
                        let ch = (i / plane) % c;
                        out[i] = g[ch] * xv + b[ch];
                    }
                })
            })
        });
        Ok(self.tape.push(
            self.shape.clone(),
            out,
            Op::ChannelAffine {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
            self.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        ))
    }

    // ── shape ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        let data = self.with_data(|x| x.to_vec());
        Ok(self
            .tape
            .push(shape, data, Op::Reshape { x: self.id }, self.requires_grad()))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".to_string()))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            first.check_same_tape(p, "concat")?;
            if p.shape.len() != rank
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let stride: usize = out_shape[axis + 1..].iter().product();
        let out_block = axis_total * stride;
        let mut out = vec![T::zero(); outer * out_block];
        let mut offset = 0;
        for p in parts {
            let block = p.shape[axis] * stride;
            p.with_data(|x| {
                for o in 0..outer {
                    out[o * out_block + offset..o * out_block + offset + block]
                        .copy_from_slice(&x[o * block..(o + 1) * block]);
                }
            });
            offset += block;
        }
        let requires = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            requires,
        ))
    }

    // ── elementwise binary (leading-1 broadcast) ───────────────────

    fn binary(
        &self,
        rhs: &Tensor<T>,
        op_name: &'static str,
        make_op: impl FnOnce(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check_same_tape(rhs, op_name)?;
        let out_shape = broadcast_out(&self.shape, &rhs.shape).ok_or(Error::ShapeMismatch {
            op: op_name,
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        })?;
        let numel: usize = out_shape.iter().product();
        let (la, lb) = (self.numel(), rhs.numel());
        let mut out = vec![T::zero(); numel];
        self.with_data(|a| {
            rhs.with_data(|b| {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = f(a[i % la], b[i % lb]);
                }
            })
        });
        Ok(self.tape.push(
            out_shape,
            out,
            make_op(self.id, rhs.id),
            self.requires_grad() || rhs.requires_grad(),
        ))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    // ── elementwise unary ───────────────────────────────────────────

    fn unary(
        &self,
        op: Op<T>,
        f: impl Fn(T) -> T,
    ) -> Tensor<T> {
        let data = self.with_data(|x| x.iter().map(|&v| f(v)).collect());
        self.tape
            .push(self.shape.clone(), data, op, self.requires_grad())
    }

    /// `mul * x + add` with scalar constants.
    pub fn affine(&self, mul: T, add: T) -> Tensor<T> {
        self.unary(Op::AffineScalar { x: self.id, mul }, |v| mul * v + add)
    }

    /// Scalar multiplication.
    pub fn scale(&self, c: T) -> Tensor<T> {
        self.affine(c, T::zero())
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(Op::Abs { x: self.id }, |v| v.abs())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(Op::Relu { x: self.id }, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(Op::Sigmoid { x: self.id }, |v| {
            T::one() / (T::one() + (-v).exp())
        })
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        let bad = self.with_data(|x| x.iter().any(|&v| v <= T::zero()));
        if bad {
            return Err(Error::Domain(
                "log of non-positive value".to_string(),
            ));
        }
        Ok(self.unary(Op::Log { x: self.id }, |v| v.ln()))
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        let out = self.unary(Op::Exp { x: self.id }, |v| v.exp());
        let finite = out.with_data(|x| x.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite { op: "exp" });
        }
        Ok(out)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |v| {
            if v < lo {
                lo
            } else if v > hi {
                hi
            } else {
                v
            }
        })
    }

    // ── reductions and normalizations ───────────────────────────────

    pub fn sum(&self) -> Tensor<T> {
        let s = self.with_data(|x| {
            let mut acc = T::zero();
            for &v in x {
                acc += v;
            }
            acc
        });
        self.tape
            .push(vec![1], vec![s], Op::Sum { x: self.id }, self.requires_grad())
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        let s = self.with_data(|x| {
            let mut acc = T::zero();
            for &v in x {
                acc += v;
            }
            acc / n
        });
        self.tape
            .push(vec![1], vec![s], Op::Mean { x: self.id }, self.requires_grad())
    }

    /// Sum along `axis`, keeping it as extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Contract(format!(
                "sum_axis axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let it = kernels::axis_iter(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = 1;
        let mut out = vec![T::zero(); it.outer * it.inner];
        self.with_data(|x| {
            let mut lane = 0;
            kernels::for_each_lane(&it, |base, stride| {
                let mut s = T::zero();
                for j in 0..it.len {
                    s += x[base + j * stride];
                }
                // lanes are visited in row-major order of (outer, inner)
                out[lane] = s;
                lane += 1;
            });
        });
        Ok(self.tape.push(
            out_shape,
            out,
            Op::SumAxis { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let mut out = vec![T::zero(); self.numel()];
        self.with_data(|x| kernels::softmax(x, &self.shape, axis, &mut out));
        Ok(self.tape.push(
            self.shape.clone(),
            out,
            Op::Softmax { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    /// Unit L2 norm along `axis`; zero lanes stay zero (eps guard 1e-12).
    pub fn l2_normalize(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Contract(format!(
                "l2_normalize axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let eps = T::from_f64(1e-12);
        let mut out = vec![T::zero(); self.numel()];
        self.with_data(|x| kernels::l2_normalize(x, &self.shape, axis, eps, &mut out));
        Ok(self.tape.push(
            self.shape.clone(),
            out,
            Op::L2Normalize { x: self.id, axis },
            self.requires_grad(),
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` node reachable from it. A second call without
    /// [`Tape::reset_grads`] is a state error.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.0.borrow_mut();
        if inner.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".to_string(),
            ));
        }
        if inner.nodes.is_empty() {
            return Err(Error::Contract("backward on empty tape".to_string()));
        }
        if inner.nodes[self.id].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[self.id].shape
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![T::one()]);

        for id in (0..=self.id).rev() {
            if grads[id].is_none() || !inner.nodes[id].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let gy = upper[0].as_ref().expect("checked above");
            let nodes = &inner.nodes;
            let needs = |i: usize| nodes[i].requires_grad;
            let numel = |i: usize| nodes[i].data.len();
            let ensure = |g: &mut [Option<Vec<T>>], i: usize| {
                if g[i].is_none() {
                    g[i] = Some(vec![T::zero(); numel(i)]);
                }
            };
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let (na, nb) = (needs(*a), needs(*b));
                    if na {
                        ensure(lower, *a);
                    }
                    if nb {
                        ensure(lower, *b);
                    }
                    // split_at_mut so both grads can be borrowed when a != b;
                    // a == b (x @ x) falls back to two passes
                    if *a == *b {
                        if na {
                            let mut tmp = vec![T::zero(); numel(*a)];
                            kernels::matmul_backward(
                                &nodes[*a].data,
                                &nodes[*b].data,
                                gy,
                                m,
                                k,
                                n,
                                Some(&mut tmp),
                                None,
                            );
                            kernels::matmul_backward(
                                &nodes[*a].data,
                                &nodes[*b].data,
                                gy,
                                m,
                                k,
                                n,
                                None,
                                Some(&mut tmp),
                            );
                            kernels::axpy(T::one(), &tmp, lower[*a].as_mut().unwrap());
                        }
                    } else {
                        let (da, db) = if na && nb {
                            let (x, y) = if a < b {
                                let (l, r) = lower.split_at_mut(*b);
                                (l[*a].as_mut(), r[0].as_mut())
                            } else {
                                let (l, r) = lower.split_at_mut(*a);
                                (r[0].as_mut(), l[*b].as_mut())
                            };
                            (x, y)
                        } else if na {
                            (lower[*a].as_mut(), None)
                        } else if nb {
                            (None, lower[*b].as_mut())
                        } else {
                            (None, None)
                        };
                        kernels::matmul_backward(
                            &nodes[*a].data,
                            &nodes[*b].data,
                            gy,
                            m,
                            k,
                            n,
                            da.map(|v| v.as_mut_slice()),
                            db.map(|v| v.as_mut_slice()),
                        );
                    }
                }
                Op::Transpose { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let (r, c) = (nodes[id].shape[0], nodes[id].shape[1]);
                        let dx = lower[*x].as_mut().unwrap();
                        for i in 0..r {
                            for j in 0..c {
                                dx[j * r + i] += gy[i * c + j];
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernel, bias } => {
                    let (n, cin, h, w) = match nodes[*input].shape.as_slice() {
                        [c, h, w] => (1, *c, *h, *w),
                        [n, c, h, w] => (*n, *c, *h, *w),
                        _ => unreachable!("validated on construction"),
                    };
                    let cout = nodes[*kernel].shape[0];
                    let k = nodes[*kernel].shape[2];
                    let (ni, nk) = (needs(*input), needs(*kernel));
                    let nb = bias.map_or(false, |b| needs(b));
                    if ni {
                        ensure(lower, *input);
                    }
                    if nk {
                        ensure(lower, *kernel);
                    }
                    if let Some(b) = bias {
                        if nb {
                            ensure(lower, *b);
                        }
                    }
                    // buffers are accumulated separately then merged to keep
                    // the borrow checker out of the inner loops
                    let mut din = if ni { Some(vec![T::zero(); numel(*input)]) } else { None };
                    let mut dk = if nk { Some(vec![T::zero(); numel(*kernel)]) } else { None };
                    let mut db = if nb { Some(vec![T::zero(); cout]) } else { None };
                    kernels::conv2d_backward(
                        &nodes[*input].data,
                        n,
                        cin,
                        h,
                        w,
                        &nodes[*kernel].data,
                        cout,
                        k,
                        gy,
                        din.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(d) = din {
                        kernels::axpy(T::one(), &d, lower[*input].as_mut().unwrap());
                    }
                    if let Some(d) = dk {
                        kernels::axpy(T::one(), &d, lower[*kernel].as_mut().unwrap());
                    }
                    if let (Some(d), Some(b)) = (db, *bias) {
                        kernels::axpy(T::one(), &d, lower[b].as_mut().unwrap());
                    }
                }
                Op::ChannelAffine { x, gamma, beta } => {
                    let shape = &nodes[id].shape;
                    let c = shape[shape.len() - 3];
                    let plane: usize = shape[shape.len() - 2..].iter().product();
                    let xd = &nodes[*x].data;
                    let gd = &nodes[*gamma].data;
                    if needs(*x) {
                        ensure(lower, *x);
                        let dx = lower[*x].as_mut().unwrap();
                        for (i, &g) in gy.iter().enumerate() {
                            dx[i] += gd[(i / plane) % c] * g;
                        }
                    }
                    if needs(*gamma) {
                        ensure(lower, *gamma);
                        let dg = lower[*gamma].as_mut().unwrap();
                        for (i, &g) in gy.iter().enumerate() {
                            dg[(i / plane) % c] += g * xd[i];
                        }
                    }
                    if needs(*beta) {
                        ensure(lower, *beta);
                        let db = lower[*beta].as_mut().unwrap();
                        for (i, &g) in gy.iter().enumerate() {
                            db[(i / plane) % c] += g;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        kernels::softmax_backward(
                            &nodes[id].data,
                            gy,
                            &nodes[id].shape,
                            *axis,
                            lower[*x].as_mut().unwrap(),
                        );
                    }
                }
                Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                    let neg_b = matches!(nodes[id].op, Op::Sub { .. });
                    let is_mul = matches!(nodes[id].op, Op::Mul { .. });
                    let (la, lb) = (numel(*a), numel(*b));
                    let ad = &nodes[*a].data;
                    let bd = &nodes[*b].data;
                    if needs(*a) {
                        ensure(lower, *a);
                        let da = lower[*a].as_mut().unwrap();
                        for (i, &g) in gy.iter().enumerate() {
                            da[i % la] += if is_mul { g * bd[i % lb] } else { g };
                        }
                    }
                    if needs(*b) {
                        ensure(lower, *b);
                        let db = lower[*b].as_mut().unwrap();
                        for (i, &g) in gy.iter().enumerate() {
                            let contrib = if is_mul {
                                g * ad[i % la]
                            } else if neg_b {
                                -g
                            } else {
                                g
                            };
                            db[i % lb] += contrib;
                        }
                    }
                }
                Op::AffineScalar { x, mul } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let dx = lower[*x].as_mut().unwrap();
                        for (d, &g) in dx.iter_mut().zip(gy) {
                            *d += *mul * g;
                        }
                    }
                }
                Op::Abs { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let xd = &nodes[*x].data;
                        let dx = lower[*x].as_mut().unwrap();
                        for i in 0..dx.len() {
                            // subgradient 0 at exactly 0
                            let s = if xd[i] > T::zero() {
                                T::one()
                            } else if xd[i] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            dx[i] += s * gy[i];
                        }
                    }
                }
                Op::Relu { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let xd = &nodes[*x].data;
                        let dx = lower[*x].as_mut().unwrap();
                        for i in 0..dx.len() {
                            if xd[i] > T::zero() {
                                dx[i] += gy[i];
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let yd = &nodes[id].data;
                        let dx = lower[*x].as_mut().unwrap();
                        for i in 0..dx.len() {
                            dx[i] += yd[i] * (T::one() - yd[i]) * gy[i];
                        }
                    }
                }
                Op::Log { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let xd = &nodes[*x].data;
                        let dx = lower[*x].as_mut().unwrap();
                        for i in 0..dx.len() {
                            dx[i] += gy[i] / xd[i];
                        }
                    }
                }
                Op::Exp { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let yd = &nodes[id].data;
                        let dx = lower[*x].as_mut().unwrap();
                        for i in 0..dx.len() {
                            dx[i] += yd[i] * gy[i];
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let xd = &nodes[*x].data;
                        let dx = lower[*x].as_mut().unwrap();
                        for i in 0..dx.len() {
                            if xd[i] > *lo && xd[i] < *hi {
                                dx[i] += gy[i];
                            }
                        }
                    }
                }
                Op::Sum { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let g = gy[0];
                        for d in lower[*x].as_mut().unwrap() {
                            *d += g;
                        }
                    }
                }
                Op::Mean { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let dx = lower[*x].as_mut().unwrap();
                        let g = gy[0] / T::from_f64(dx.len() as f64);
                        for d in dx {
                            *d += g;
                        }
                    }
                }
                Op::SumAxis { x, axis } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        let it = kernels::axis_iter(&nodes[*x].shape, *axis);
                        let dx = lower[*x].as_mut().unwrap();
                        let mut lane = 0;
                        kernels::for_each_lane(&it, |base, stride| {
                            let g = gy[lane];
                            for j in 0..it.len {
                                dx[base + j * stride] += g;
                            }
                            lane += 1;
                        });
                    }
                }
                Op::L2Normalize { x, axis } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        kernels::l2_normalize_backward(
                            &nodes[*x].data,
                            &nodes[id].data,
                            gy,
                            &nodes[*x].shape,
                            *axis,
                            T::from_f64(1e-12),
                            lower[*x].as_mut().unwrap(),
                        );
                    }
                }
                Op::Reshape { x } => {
                    if needs(*x) {
                        ensure(lower, *x);
                        kernels::axpy(T::one(), gy, lower[*x].as_mut().unwrap());
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = &nodes[id].shape;
                    let outer: usize = out_shape[..*axis].iter().product();
                    let stride: usize = out_shape[*axis + 1..].iter().product();
                    let out_block = out_shape[*axis] * stride;
                    let mut offset = 0;
                    for &p in parts {
                        let block = nodes[p].shape[*axis] * stride;
                        if needs(p) {
                            ensure(lower, p);
                            let dp = lower[p].as_mut().unwrap();
                            for o in 0..outer {
                                kernels::axpy(
                                    T::one(),
                                    &gy[o * out_block + offset..o * out_block + offset + block],
                                    &mut dp[o * block..(o + 1) * block],
                                );
                            }
                        }
                        offset += block;
                    }
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if inner.nodes[id].requires_grad {
                inner.nodes[id].grad = g;
            }
        }
        inner.backward_done = true;
        Ok(())
    }
}
