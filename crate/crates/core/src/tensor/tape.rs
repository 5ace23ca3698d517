//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! stored in execution order, so inputs always precede outputs and a single
//! reverse sweep in [`Tape::backward`] visits each node once.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, MatmulPlan};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

enum Op<F> {
    Leaf,
    MatMul(usize, usize, MatmulPlan),
    Conv2d { input: usize, kernels: usize, geom: ConvGeom },
    MaxPool { input: usize, argmax: Vec<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    BiasAdd { x: usize, bias: usize, axis: usize },
    Elu(usize),
    Sigmoid(usize),
    Softmax(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, inv_std: Vec<F> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat { inputs: Vec<usize>, axis: usize },
    Sum(usize),
    Mean(usize),
    Bce { p: usize, target: Vec<F> },
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
    /// True when some leaf upstream of this node requires a gradient.
    tracked: bool,
}

/// Recording of executed operations for one forward pass.
///
/// A tape is single-threaded; run independent forward passes on separate
/// tapes to parallelise over a batch.
#[derive(Default)]
pub struct Tape<F: Scalar = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar = f32> {
    tape: &'t Tape<F>,
    id: usize,
}

/// Gradients of the loss with respect to each `requires_grad` leaf.
#[derive(Debug, Default)]
pub struct Gradients<F: Scalar = f32> {
    by_id: HashMap<usize, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: &Var<'_, F>) -> Option<&Tensor<F>> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<'_, F>) -> Option<Tensor<F>> {
        self.by_id.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), false)
    }

    /// A trainable leaf sharing storage with the caller's tensor.
    pub fn param(&self, value: Arc<Tensor<F>>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// A trainable leaf that owns its value.
    pub fn variable(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(Arc::new(value), true)
    }

    fn leaf(&self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad, tracked: requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = inputs.iter().any(|&i| nodes[i].tracked);
        nodes.push(Node { value: Arc::new(value), op, requires_grad: false, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Back-propagates from a scalar loss and clears the tape.
    ///
    /// Returns `d loss / d leaf` for every leaf created with
    /// [`Tape::param`] or [`Tape::variable`]. Leaves the loss does not
    /// depend on receive zeros.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if loss.id >= nodes.len() {
            return Err(Error::Contract("loss does not belong to the current tape".into()));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), F::one()));
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                if nodes[id].requires_grad {
                    out.by_id.insert(id, Tensor::zeros(nodes[id].value.shape()));
                }
                continue;
            };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if node.requires_grad {
                out.by_id.insert(id, g);
                continue;
            }
            propagate(&nodes, node, g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate().skip(loss.id + 1) {
            if node.requires_grad {
                out.by_id.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], nodes: &[Node<F>], id: usize, g: Tensor<F>) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn propagate<F: Scalar>(nodes: &[Node<F>], node: &Node<F>, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
    let val = |i: usize| &*nodes[i].value;
    let tracked = |i: usize| nodes[i].tracked;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b, plan) => {
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let (av, bv) = (val(*a), val(*b));
            if tracked(*a) {
                let mut da = vec![F::zero(); av.len()];
                for (bi, &(ia, ib)) in plan.batch_map.iter().enumerate() {
                    kernels::gemm_nt(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[ib * k * n..(ib + 1) * k * n],
                        &mut da[ia * m * k..(ia + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, nodes, *a, Tensor::from_parts(av.shape().to_vec(), da));
            }
            if tracked(*b) {
                let mut db = vec![F::zero(); bv.len()];
                for (bi, &(ia, ib)) in plan.batch_map.iter().enumerate() {
                    kernels::gemm_tn(
                        &av.data()[ia * m * k..(ia + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &mut db[ib * k * n..(ib + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, nodes, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
        }
        Op::Conv2d { input, kernels: kid, geom } => {
            if tracked(*kid) {
                let dk = kernels::conv2d_grad_kernels(val(*input).data(), g.data(), geom);
                accumulate(grads, nodes, *kid, Tensor::from_parts(val(*kid).shape().to_vec(), dk));
            }
            if tracked(*input) {
                let di = kernels::conv2d_grad_input(val(*kid).data(), g.data(), geom);
                accumulate(grads, nodes, *input, Tensor::from_parts(val(*input).shape().to_vec(), di));
            }
        }
        Op::MaxPool { input, argmax } => {
            let mut di = Tensor::zeros(val(*input).shape());
            let d = di.data_mut();
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                d[src] = d[src] + gv;
            }
            accumulate(grads, nodes, *input, di);
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *b, g.clone());
            accumulate(grads, nodes, *a, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *b, g.map(|v| -v));
            accumulate(grads, nodes, *a, g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if tracked(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, nodes, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            if tracked(*b) {
                let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                accumulate(grads, nodes, *b, Tensor::from_parts(g.shape().to_vec(), d));
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(grads, nodes, *x, g.map(|v| v * c));
        }
        Op::BiasAdd { x, bias, axis } => {
            if tracked(*bias) {
                let (outer, len, inner) = kernels::axis_split(g.shape(), *axis);
                let mut db = vec![F::zero(); len];
                for o in 0..outer {
                    for (j, slot) in db.iter_mut().enumerate() {
                        let start = (o * len + j) * inner;
                        *slot = *slot + g.data()[start..start + inner].iter().copied().sum();
                    }
                }
                accumulate(grads, nodes, *bias, Tensor::from_parts(val(*bias).shape().to_vec(), db));
            }
            accumulate(grads, nodes, *x, g);
        }
        Op::Elu(x) => {
            let alpha = F::of(kernels::ELU_ALPHA);
            let xv = val(*x);
            let d = g
                .data()
                .iter()
                .zip(xv.data())
                .zip(node.value.data())
                .map(|((&gv, &xi), &yi)| if xi > F::zero() { gv } else { gv * (yi + alpha) })
                .collect();
            accumulate(grads, nodes, *x, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::Sigmoid(x) => {
            let d = g
                .data()
                .iter()
                .zip(node.value.data())
                .map(|(&gv, &y)| gv * y * (F::one() - y))
                .collect();
            accumulate(grads, nodes, *x, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::Softmax(x, axis) => {
            accumulate(grads, nodes, *x, kernels::softmax_backward(&node.value, &g, *axis));
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gv = val(*gamma);
            let r = kernels::layer_norm_backward(g.data(), xhat, inv_std, gv.data());
            accumulate(grads, nodes, *gamma, Tensor::from_parts(gv.shape().to_vec(), r.dgamma));
            accumulate(grads, nodes, *beta, Tensor::from_parts(val(*beta).shape().to_vec(), r.dbeta));
            accumulate(grads, nodes, *x, Tensor::from_parts(val(*x).shape().to_vec(), r.dx));
        }
        Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            accumulate(grads, nodes, *x, Tensor::from_parts(shape, g.into_data()));
        }
        Op::Permute(x, axes) => {
            accumulate(grads, nodes, *x, kernels::permute(&g, &kernels::inverse_axes(axes)));
        }
        Op::Concat { inputs, axis } => {
            let extents: Vec<usize> = inputs.iter().map(|&i| val(i).shape()[*axis]).collect();
            for (&i, part) in inputs.iter().zip(kernels::split(&g, *axis, &extents)) {
                accumulate(grads, nodes, i, part);
            }
        }
        Op::Sum(x) => {
            let gv = g.item();
            accumulate(grads, nodes, *x, Tensor::full(val(*x).shape(), gv));
        }
        Op::Mean(x) => {
            let xv = val(*x);
            let gv = g.item() / F::of(xv.len() as f64);
            accumulate(grads, nodes, *x, Tensor::full(xv.shape(), gv));
        }
        Op::Bce { p, target } => {
            let pv = val(*p);
            let eps = F::of(kernels::BCE_EPS);
            let scale = g.item() / F::of(pv.len() as f64);
            let d = pv
                .data()
                .iter()
                .zip(target)
                .map(|(&pi, &yi)| {
                    if pi < eps || pi > F::one() - eps {
                        F::zero()
                    } else {
                        -scale * (yi / pi - (F::one() - yi) / (F::one() - pi))
                    }
                })
                .collect();
            accumulate(grads, nodes, *p, Tensor::from_parts(pv.shape().to_vec(), d));
        }
    }
}

fn same_shape<F: Scalar>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// The recorded value. Valid until the tape is cleared by `backward`.
    pub fn value(&self) -> Arc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(&self, value: Tensor<F>, op: Op<F>) -> Var<'t, F> {
        self.tape.push(value, op, &[self.id])
    }

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        let plan = kernels::matmul_plan(a.shape(), b.shape())?;
        let out = kernels::matmul_forward(&a, &b, &plan);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id, plan), &[self.id, other.id]))
    }

    /// 2-D cross-correlation of a `[C_in,H,W]` input with `[C_out,C_in,kh,kw]`
    /// kernels. No kernel flip.
    pub fn conv2d(&self, kernels: &Var<'t, F>, stride: usize, padding: usize) -> Result<Var<'t, F>> {
        let (x, k) = (self.value(), kernels.value());
        let geom = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(x.data(), k.data(), &geom);
        let out = Tensor::from_parts(vec![geom.c_out, geom.oh, geom.ow], out);
        Ok(self.tape.push(
            out,
            Op::Conv2d { input: self.id, kernels: kernels.id, geom },
            &[self.id, kernels.id],
        ))
    }

    /// Non-overlapping max pooling over the two spatial axes of `[C,H,W]`.
    pub fn max_pool(&self, size: usize) -> Result<Var<'t, F>> {
        let (out, argmax) = kernels::maxpool_forward(&self.value(), size)?;
        Ok(self.unary(out, Op::MaxPool { input: self.id, argmax }))
    }

    fn zip_with(
        &self,
        other: &Var<'t, F>,
        name: &str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var<'t, F>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(Tensor::from_parts(a.shape().to_vec(), d), op, &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        self.unary(self.value().map(|v| v * c), Op::Scale(self.id, c))
    }

    /// Adds a vector along `axis`, broadcasting over all other axes.
    pub fn bias_add(&self, bias: &Var<'t, F>, axis: usize) -> Result<Var<'t, F>> {
        let (x, b) = (self.value(), bias.value());
        if axis >= x.ndim() || b.ndim() != 1 || b.len() != x.shape()[axis] {
            return dim_err(format!(
                "bias {:?} does not match axis {axis} of {:?}",
                b.shape(),
                x.shape()
            ));
        }
        let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
        let mut d = x.data().to_vec();
        for o in 0..outer {
            for j in 0..len {
                let start = (o * len + j) * inner;
                for v in &mut d[start..start + inner] {
                    *v = *v + b.data()[j];
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), d),
            Op::BiasAdd { x: self.id, bias: bias.id, axis },
            &[self.id, bias.id],
        ))
    }

    /// Affine map `x W + b` over the last axis.
    pub fn dense(&self, weights: &Var<'t, F>, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
        let x = self.shape();
        let w = weights.shape();
        if w.len() != 2 || x.last() != Some(&w[0]) {
            return dim_err(format!("dense: input {x:?} incompatible with weights {w:?}"));
        }
        let lifted = if x.len() == 1 { self.reshape(&[1, x[0]])? } else { *self };
        let y = lifted.matmul(weights)?;
        let axis = y.shape().len() - 1;
        let y = y.bias_add(bias, axis)?;
        if x.len() == 1 {
            y.reshape(&[w[1]])
        } else {
            Ok(y)
        }
    }

    /// `x` for `x > 0`, `alpha (e^x - 1)` otherwise, with `alpha = 1`.
    pub fn elu(&self) -> Var<'t, F> {
        let alpha = F::of(kernels::ELU_ALPHA);
        let out = self.value().map(|v| if v > F::zero() { v } else { alpha * (v.exp() - F::one()) });
        self.unary(out, Op::Elu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        let out = self.value().map(|v| {
            if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            }
        });
        self.unary(out, Op::Sigmoid(self.id))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        if axis >= x.ndim() {
            return dim_err(format!("softmax axis {axis} out of range for {:?}", x.shape()));
        }
        Ok(self.unary(kernels::softmax_forward(&x, axis), Op::Softmax(self.id, axis)))
    }

    /// Normalises each row over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, F>, beta: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let n = *x.shape().last().ok_or_else(|| Error::Dimension("layer_norm of a scalar".into()))?;
        if g.shape() != [n] || b.shape() != [n] {
            return dim_err(format!(
                "layer_norm affine {:?}/{:?} does not match last axis of {:?}",
                g.shape(),
                b.shape(),
                x.shape()
            ));
        }
        let (out, xhat, inv_std) = kernels::layer_norm_forward(&x, g.data(), b.data());
        Ok(self.tape.push(
            out,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std },
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let x = (*self.value()).clone().reshaped(shape)?;
        Ok(self.unary(x, Op::Reshape(self.id)))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        if axes.len() != x.ndim() || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true)) {
            return dim_err(format!("invalid permutation {axes:?} for {:?}", x.shape()));
        }
        Ok(self.unary(kernels::permute(&x, axes), Op::Permute(self.id, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, F>> {
        let n = self.shape().len();
        if n < 2 {
            return dim_err("transpose needs rank >= 2");
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len() && (0..s.len()).all(|d| d == axis || s[d] == base[d]);
            if !ok {
                return dim_err(format!("concat: {s:?} incompatible with {base:?} along axis {axis}"));
            }
        }
        let refs: Vec<&Tensor<F>> = values.iter().map(|v| &**v).collect();
        let out = kernels::concat(&refs, axis);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(out, Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, F> {
        let x = self.value();
        let s: F = x.data().iter().copied().sum();
        self.unary(Tensor::scalar(s / F::of(x.len() as f64)), Op::Mean(self.id))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets, with
    /// probabilities clamped to `[eps, 1 - eps]`.
    pub fn binary_cross_entropy(&self, target: &Tensor<F>) -> Result<Var<'t, F>> {
        let p = self.value();
        same_shape("binary_cross_entropy", &p, target)?;
        let eps = F::of(kernels::BCE_EPS);
        let total: F = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pi, &yi)| {
                let pc = pi.max(eps).min(F::one() - eps);
                -(yi * pc.ln() + (F::one() - yi) * (F::one() - pc).ln())
            })
            .sum();
        let loss = total / F::of(p.len() as f64);
        Ok(self.unary(Tensor::scalar(loss), Op::Bce { p: self.id, target: target.data().to_vec() }))
    }
}
