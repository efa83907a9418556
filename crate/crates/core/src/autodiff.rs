//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! linear tape. [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products into the leaves. The tape is rebuilt for every
//! forward pass; nothing is cached between steps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_tn_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var),
    SumAxis(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<T>),
    MaskedFill(Var, Rc<Vec<bool>>),
    Clamp(Var, T, T),
    Opaque(String, Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// One recorded forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradients of registered parameters, by parameter index, accumulated
    /// over every leaf that refers to the same parameter.
    pub fn params(&self, count: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = vec![None; count];
        for &(node, pid) in &self.params {
            if pid >= count {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out[pid] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Panics in debug builds when an op produces NaN/Inf (masked fills excepted).
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        if self.check_finite && !matches!(op, Op::MaskedFill(..)) {
            debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not tied to a parameter slot.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf for parameter slot `id`.
    pub fn param(&mut self, id: usize, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).broadcast_to(shape)?;
        Ok(self.push(v, Op::BroadcastTo(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice(axis, start, end)?;
        Ok(self.push(v, Op::Slice(a, axis, start), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a).sum_axis(axis)?;
        Ok(self.push(v, Op::SumAxis(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::of_usize(t.len()));
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `x * sigmoid(x)`, composed from recorded primitives.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_last();
        self.push(v, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).log_softmax_last();
        self.push(v, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let (v, inv_std) = self.value(a).layer_norm_last(eps);
        self.push(v, Op::LayerNorm(a, inv_std), &[a])
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: Rc<Vec<bool>>, fill: T) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(Error::Shape(format!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                t.shape()
            )));
        }
        let data = t.data().iter().zip(mask.iter()).map(|(&x, &m)| if m { fill } else { x }).collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(v, Op::MaskedFill(a, mask), &[a]))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Records a forward-only result. Differentiating through it fails with
    /// [`Error::UnsupportedOp`].
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor<T>) -> Var {
        self.push(value, Op::Opaque(name.to_string(), inputs.to_vec()), inputs)
    }

    /// `x · W + b` for rank ≥ 2 `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|p| (i, p)))
            .collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, params, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = g.sum_to_shape(self.shape(*a))?;
                let gb = g.sum_to_shape(self.shape(*b))?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = g.sum_to_shape(self.shape(*a))?;
                let gb = g.map(|x| -x).sum_to_shape(self.shape(*b))?;
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = g.mul(vb)?.sum_to_shape(va.shape())?;
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = g.mul(va)?.sum_to_shape(vb.shape())?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul(&vb.transpose()?)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = if vb.rank() == 2 && va.rank() > 2 {
                        let k = va.shape()[va.rank() - 1];
                        let n = g.shape()[g.rank() - 1];
                        let mut out = vec![T::zero(); k * n];
                        matmul_tn_into(va.data(), g.data(), k, va.len() / k, n, &mut out);
                        Tensor::new(vec![k, n], out)?
                    } else {
                        va.transpose()?.matmul(g)?
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?);
            }
            Op::Reshape(a) => {
                let ga = g.reshape(self.shape(*a))?;
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastTo(a) | Op::SumAxis(a) => {
                let shape = self.shape(*a).to_vec();
                let ga = if matches!(self.nodes[idx].op, Op::SumAxis(_)) {
                    g.broadcast_to(&shape)?
                } else {
                    g.sum_to_shape(&shape)?
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let ext = self.shape(*p)[*axis];
                    if self.nodes[p.0].requires_grad {
                        let gp = g.slice(*axis, start, start + ext)?;
                        self.accumulate(grads, *p, gp);
                    }
                    start += ext;
                }
            }
            Op::Slice(a, axis, start) => {
                let src = self.shape(*a);
                let ext = g.shape()[*axis];
                let mut parts: Vec<Tensor<T>> = Vec::with_capacity(3);
                if *start > 0 {
                    let mut s = src.to_vec();
                    s[*axis] = *start;
                    parts.push(Tensor::zeros(&s));
                }
                parts.push(g.clone());
                let tail = src[*axis] - start - ext;
                if tail > 0 {
                    let mut s = src.to_vec();
                    s[*axis] = tail;
                    parts.push(Tensor::zeros(&s));
                }
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                self.accumulate(grads, *a, Tensor::concat(&refs, *axis)?);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.shape(*a), g.item());
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let ga = Tensor::full(shape, g.item() / T::of_usize(crate::tensor::numel(shape)));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.mul(out)?),
            Op::Log(a) => {
                let ga = g.zip_broadcast(self.value(*a), |gi, x| gi / x)?;
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_broadcast(out, |gi, y| gi * (T::one() - y * y))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_broadcast(out, |gi, y| gi * y * (T::one() - y))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let w = *out.shape().last().unwrap();
                let mut ga = g.clone();
                for r in 0..out.len() / w {
                    let p = out.row(r);
                    let gr = g.row(r);
                    let dot: T = p.iter().zip(gr).map(|(&pi, &gi)| pi * gi).sum();
                    for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                        *x = p[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let w = *out.shape().last().unwrap();
                let mut ga = g.clone();
                for r in 0..out.len() / w {
                    let lp = out.row(r);
                    let gr = g.row(r);
                    let gs: T = gr.iter().copied().sum();
                    for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                        *x = gr[j] - lp[j].exp() * gs;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let w = *out.shape().last().unwrap();
                let wf = T::of_usize(w);
                let mut ga = g.clone();
                for (r, &is) in inv_std.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mg = gr.iter().copied().sum::<T>() / wf;
                    let mgy = gr.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<T>() / wf;
                    for (j, x) in ga.row_mut(r).iter_mut().enumerate() {
                        *x = is * (gr[j] - mg - y[j] * mgy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MaskedFill(a, mask) => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&x, &m)| if m { T::zero() } else { x })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_broadcast(self.value(*a), |gi, x| {
                    if x < *lo || x > *hi {
                        T::zero()
                    } else {
                        gi
                    }
                })?;
                self.accumulate(grads, *a, ga);
            }
            Op::Opaque(name, inputs) => {
                if inputs.iter().any(|v| self.nodes[v.0].requires_grad) {
                    return Err(Error::UnsupportedOp(name.clone()));
                }
            }
        }
        Ok(())
    }
}
