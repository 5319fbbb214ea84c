use std::cell::RefCell;
use std::fmt;

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::ops::{self, Conv2dGeometry, Op};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward rule for an operation defined outside this crate.
///
/// Returns one gradient per input (in the order the inputs were passed to
/// [`Tape::custom`]); `None` marks an input that receives no gradient.
pub trait CustomBackward<F: Scalar> {
    fn backward(&self, grad_out: &[F], inputs: &[&Tensor<F>], output: &Tensor<F>) -> Vec<Option<Vec<F>>>;
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

struct Inner<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Records operations for one forward/backward pass.
///
/// A tape is single-use: after [`Tape::backward`] its records are dropped and
/// both further operations and a second backward return
/// [`TensorError::TapeConsumed`].
pub struct Tape<F: Scalar> {
    inner: RefCell<Inner<F>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, param: Option<ParamId>, leaf_grad: bool) -> Var<'_, F> {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "operation recorded on a consumed tape");
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            other => other.inputs().iter().any(|&i| inner.nodes[i].requires_grad),
        };
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn input(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, None, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, None, false)
    }

    /// A parameter leaf; its gradient is reported under `id`.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        let requires_grad = store.requires_grad(id);
        self.push(store.value(id).clone(), Op::Leaf, Some(id), requires_grad)
    }

    /// Records an externally defined op. `value` is its already computed output.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, F>],
        value: Tensor<F>,
        backward: Box<dyn CustomBackward<F>>,
    ) -> Var<'t, F> {
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push(value, Op::Custom { inputs: ids, backward }, None, false)
    }

    fn value_of(&self, id: usize) -> Tensor<F> {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if inner.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_value = &inner.nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);
        let mut leaves = Vec::new();
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push((id, node.param, g));
                continue;
            }
            let input_ids = node.op.inputs();
            let input_vals: Vec<&Tensor<F>> = input_ids.iter().map(|&i| &inner.nodes[i].value).collect();
            let input_grads = node.op.backward(&g, &node.value, &input_vals);
            for (&i, ig) in input_ids.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !inner.nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(ig) {
                            *a = *a + v;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }
        inner.nodes.clear();
        inner.consumed = true;
        leaves.reverse();
        Ok(Gradients { leaves })
    }
}

/// Gradients of a loss with respect to every leaf that required one.
pub struct Gradients<F> {
    leaves: Vec<(usize, Option<ParamId>, Vec<F>)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, var: Var<'_, F>) -> Option<&[F]> {
        self.leaves.iter().find(|(id, _, _)| *id == var.id).map(|(_, _, g)| g.as_slice())
    }

    /// Parameter gradients; a parameter used several times appears once per use.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.leaves.iter().filter_map(|(_, p, g)| p.map(|p| (p, g.as_slice())))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, a, b);
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return invalid(op, format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn check_live<F: Scalar>(tape: &Tape<F>) -> Result<()> {
    if tape.inner.borrow().consumed {
        return Err(TensorError::TapeConsumed);
    }
    Ok(())
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn record(&self, value: Vec<F>, shape: &[usize], op: Op<F>) -> Result<Var<'t, F>> {
        check_live(self.tape)?;
        let value = Tensor::from_vec(value, shape)?;
        Ok(self.tape.push(value, op, None, false))
    }

    fn binary(
        &self,
        other: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.record(data, a.shape(), op)
    }

    /// `self @ other`. Supports [m,k]@[k,n], [b,m,k]@[k,n] and [b,m,k]@[b,k,n].
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_impl(other, false)
    }

    /// `self @ otherᵀ` (transposing the last two axes of `other`).
    pub fn matmul_t(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, F>, trans_b: bool) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let (dims, shape) = ops::matmul_dims(a.shape(), b.shape(), trans_b)?;
        let data = ops::matmul_forward(dims, a.data(), b.data());
        self.record(data, &shape, Op::MatMul { a: self.id, b: other.id, dims })
    }

    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", |x, y| x + y, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(self, s: F) -> Var<'t, F> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * s).collect();
        self.record(data, a.shape(), Op::Scale { a: self.id, s }).expect("shape preserved")
    }

    pub fn add_scalar(self, s: F) -> Var<'t, F> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x + s).collect();
        self.record(data, a.shape(), Op::AddScalar { a: self.id }).expect("shape preserved")
    }

    /// Adds a vector of length `shape[-1]` to every row (explicit row broadcast).
    pub fn add_row(self, row: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, r) = (self.value(), row.value());
        if r.shape().len() != 1 || a.shape().last() != Some(&r.numel()) {
            return shape_err("add_row", a.shape(), r.shape());
        }
        let d = r.numel();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_exact_mut(d) {
            for (x, &y) in chunk.iter_mut().zip(r.data()) {
                *x = *x + y;
            }
        }
        self.record(data, a.shape(), Op::AddRow { a: self.id, row: row.id })
    }

    /// Multiplies every row elementwise by a vector of length `shape[-1]`.
    pub fn mul_row(self, row: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, r) = (self.value(), row.value());
        if r.shape().len() != 1 || a.shape().last() != Some(&r.numel()) {
            return shape_err("mul_row", a.shape(), r.shape());
        }
        let d = r.numel();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_exact_mut(d) {
            for (x, &y) in chunk.iter_mut().zip(r.data()) {
                *x = *x * y;
            }
        }
        self.record(data, a.shape(), Op::MulRow { a: self.id, row: row.id })
    }

    /// Swaps two axes.
    pub fn transpose(self, d0: usize, d1: usize) -> Result<Var<'t, F>> {
        let a = self.value();
        check_axis("transpose", a.shape(), d0)?;
        check_axis("transpose", a.shape(), d1)?;
        let mut axes: Vec<usize> = (0..a.shape().len()).collect();
        axes.swap(d0, d1);
        self.permute(&axes)
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, F>> {
        let a = self.value();
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..a.shape().len()).collect::<Vec<_>>() {
            return invalid("permute", format!("{axes:?} is not a permutation of the axes of {:?}", a.shape()));
        }
        let data = ops::permute_data(a.data(), a.shape(), axes);
        let shape = ops::permute_shape(a.shape(), axes);
        self.record(data, &shape, Op::Permute { a: self.id, axes: axes.to_vec() })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        check_live(self.tape)?;
        let a = self.value().reshape(shape)?;
        Ok(self.tape.push(a, Op::Reshape { a: self.id }, None, false))
    }

    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let Some(first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let values: Vec<Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = ops::axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        first.record(data, &out_shape, Op::Concat { parts: ids, axis })
    }

    /// Stacks `times` copies along a new leading axis.
    pub fn repeat(self, times: usize) -> Var<'t, F> {
        let a = self.value();
        let mut shape = vec![times];
        shape.extend_from_slice(a.shape());
        let mut data = Vec::with_capacity(a.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(a.data());
        }
        self.record(data, &shape, Op::Repeat { a: self.id, times }).expect("shape consistent")
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, F>> {
        let a = self.value();
        check_axis("softmax", a.shape(), axis)?;
        let data = ops::softmax_forward(a.data(), a.shape(), axis);
        self.record(data, a.shape(), Op::Softmax { a: self.id, axis })
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(self, axis: usize) -> Result<Var<'t, F>> {
        let a = self.value();
        check_axis("layer_norm", a.shape(), axis)?;
        let (data, rstd) = ops::layer_norm_forward(a.data(), a.shape(), axis);
        let normed = data.clone();
        self.record(data, a.shape(), Op::LayerNorm { a: self.id, axis, normed, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, F> {
        let a = self.value();
        let data = a.data().iter().map(|&x| ops::gelu(x)).collect();
        self.record(data, a.shape(), Op::Gelu { a: self.id }).expect("shape preserved")
    }

    pub fn relu(self) -> Var<'t, F> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.max(F::zero())).collect();
        self.record(data, a.shape(), Op::Relu { a: self.id }).expect("shape preserved")
    }

    pub fn sum(self) -> Var<'t, F> {
        let a = self.value();
        let total = a.data().iter().copied().sum();
        self.record(vec![total], &[], Op::Sum { a: self.id }).expect("scalar")
    }

    pub fn mean(self) -> Var<'t, F> {
        let a = self.value();
        let total: F = a.data().iter().copied().sum();
        let mean = total / F::from_f64(a.numel().max(1) as f64);
        self.record(vec![mean], &[], Op::Mean { a: self.id }).expect("scalar")
    }

    /// Mean absolute difference.
    pub fn l1_loss(self, target: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), target.value());
        same_shape("l1_loss", a.shape(), b.shape())?;
        let total: F = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let v = total / F::from_f64(a.numel() as f64);
        self.record(vec![v], &[], Op::L1Loss { a: self.id, b: target.id })
    }

    /// Mean squared difference.
    pub fn mse_loss(self, target: Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), target.value());
        same_shape("mse_loss", a.shape(), b.shape())?;
        let total: F = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = total / F::from_f64(a.numel() as f64);
        self.record(vec![v], &[], Op::MseLoss { a: self.id, b: target.id })
    }

    /// Fused multi-head scaled dot-product attention. `self` holds queries
    /// `[batch, len_q, width]`; `keys` and `values` are `[batch, len_kv, width]`.
    /// Heads are contiguous slices of the width.
    pub fn attention(self, keys: Var<'t, F>, values: Var<'t, F>, heads: usize) -> Result<Var<'t, F>> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let (qs, ks) = (q.shape(), k.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
            return shape_err("attention", qs, ks);
        }
        same_shape("attention", ks, v.shape())?;
        if heads == 0 || qs[2] % heads != 0 {
            return invalid("attention", format!("width {} is not divisible into {heads} heads", qs[2]));
        }
        let dims = ops::AttnDims { batch: qs[0], len_q: qs[1], len_kv: ks[1], width: qs[2], heads };
        let (out, probs) = ops::attention_forward(&dims, q.data(), k.data(), v.data());
        let shape = qs.to_vec();
        self.record(out, &shape, Op::Attention { q: self.id, k: keys.id, v: values.id, dims, probs })
    }

    /// Extracts convolution patches from an NHWC tensor: result is
    /// `[batch * out_h * out_w, kernel * kernel * channels]`.
    pub fn im2col(self, geom: Conv2dGeometry) -> Result<Var<'t, F>> {
        let a = self.value();
        ops::check_conv_geometry(a.shape(), &geom)?;
        let data = ops::im2col(a.data(), &geom);
        let shape = [geom.batch * geom.out_height() * geom.out_width(), geom.patch_len()];
        self.record(data, &shape, Op::Im2Col { a: self.id, geom })
    }
}
