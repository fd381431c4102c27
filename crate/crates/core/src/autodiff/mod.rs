//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order, which is also a
//! topological order, so [`Tape::backward`] is a single reverse sweep.
//! Handles ([`Var`]) are plain indices into the tape that produced them.

mod conv;
mod gradcheck;
mod mixture;

use std::cell::{Ref, RefCell};

pub use gradcheck::{GradCheck, GradCheckReport};
pub use mixture::MixtureTargets;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Softplus,
    Sigmoid,
    Abs,
    Log,
    Square,
    Exp,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Var, Unary),
    /// Swish with the sigmoid of its input kept from the forward pass.
    Swish(Var, Vec<T>),
    Scale(Var, T),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    SumOver(Var, Vec<usize>),
    LogSumExp(Var, usize),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Broadcast(Var),
    Reshape(Var),
    Conv2d(conv::ConvRecord<T>),
    /// Fused op with its local gradients computed during the forward pass.
    Fused(Vec<(Var, Vec<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Drops every recorded node; previously issued handles become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a parameter whose gradient will be reported.
    pub fn param(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant input.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data[0]
    }

    fn map_unary(&self, x: Var, kind: Unary, f: impl Fn(T) -> T) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let data = n.value.data.iter().map(|&v| f(v)).collect();
            (
                Tensor {
                    shape: n.value.shape.clone(),
                    data,
                },
                n.requires_grad,
            )
        };
        self.push(value, Op::Unary(x, kind), rg)
    }

    pub fn swish(&self, x: Var) -> Var {
        let (value, sig, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let sig: Vec<T> = n.value.data.iter().map(|&v| sigmoid(v)).collect();
            let data = n.value.data.iter().zip(&sig).map(|(&v, &s)| v * s).collect();
            (
                Tensor {
                    shape: n.value.shape.clone(),
                    data,
                },
                sig,
                n.requires_grad,
            )
        };
        self.push(value, Op::Swish(x, sig), rg)
    }

    /// `max(x, 0) + ln(1 + exp(-|x|))`.
    pub fn softplus(&self, x: Var) -> Var {
        self.map_unary(x, Unary::Softplus, softplus)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.map_unary(x, Unary::Sigmoid, sigmoid)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.map_unary(x, Unary::Abs, T::abs)
    }

    pub fn log(&self, x: Var) -> Var {
        self.map_unary(x, Unary::Log, T::ln)
    }

    pub fn square(&self, x: Var) -> Var {
        self.map_unary(x, Unary::Square, |v| v * v)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.map_unary(x, Unary::Exp, T::exp)
    }

    pub fn scalar_mul(&self, x: Var, c: T) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let data = n.value.data.iter().map(|&v| v * c).collect();
            (
                Tensor {
                    shape: n.value.shape.clone(),
                    data,
                },
                n.requires_grad,
            )
        };
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let data = n.value.data.iter().map(|&v| v + c).collect();
            (
                Tensor {
                    shape: n.value.shape.clone(),
                    data,
                },
                n.requires_grad,
            )
        };
        self.push(value, Op::AddScalar(x), rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape != tb.shape {
                return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape, tb.shape)));
            }
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Sums over the listed axes, removing them from the shape.
    pub fn sum_over(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if let Some(&a) = axes.iter().find(|&&a| a >= t.shape.len()) {
                return Err(shape_err("sum_over", format!("axis {a} for shape {:?}", t.shape)));
            }
            let (out_shape, map) = reduce_map(&t.shape, axes);
            let mut data = vec![T::zero(); out_shape.iter().product()];
            for (i, &v) in t.data.iter().enumerate() {
                data[map(i)] += v;
            }
            Tensor {
                shape: out_shape,
                data,
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::SumOver(x, axes.to_vec()), rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let rank = self.nodes.borrow()[x.0].value.shape.len();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum_over(x, &axes).expect("all axes are in range")
    }

    /// `ln sum exp` along one axis, shifted by the per-slice maximum.
    pub fn logsumexp_over(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if axis >= t.shape.len() {
                return Err(shape_err("logsumexp_over", format!("axis {axis} for shape {:?}", t.shape)));
            }
            let (outer, len, inner) = split_axis(&t.shape, axis);
            let mut out_shape = t.shape.clone();
            out_shape.remove(axis);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| t.data[(o * len + k) * inner + i];
                    let max = (0..len).map(at).fold(T::neg_infinity(), T::max);
                    data[o * inner + i] = if max.is_finite() {
                        max + (0..len).map(|k| (at(k) - max).exp()).sum::<T>().ln()
                    } else {
                        max
                    };
                }
            }
            Tensor {
                shape: out_shape,
                data,
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::LogSumExp(x, axis), rg))
    }

    /// Picks flat elements of `x` into a tensor of `shape`.
    pub fn gather(&self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if shape.iter().product::<usize>() != indices.len() {
                return Err(shape_err(
                    "gather",
                    format!("{} indices for shape {shape:?}", indices.len()),
                ));
            }
            if let Some(&i) = indices.iter().find(|&&i| i >= t.data.len()) {
                return Err(shape_err("gather", format!("index {i} >= {}", t.data.len())));
            }
            Tensor {
                shape,
                data: indices.iter().map(|&i| t.data[i]).collect(),
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::Gather(x, indices), rg))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
            let tail = nodes[first.0].value.shape.get(1..).unwrap_or(&[]).to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.shape.is_empty() || t.shape[1..] != tail[..] {
                    return Err(shape_err("concat", format!("{:?} vs trailing {tail:?}", t.shape)));
                }
                rows += t.shape[0];
                data.extend_from_slice(&t.data);
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor { shape, data }
        };
        let rg = self.requires(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Repeats a single-element tensor into `shape`.
    pub fn broadcast(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.data.len() != 1 {
                return Err(shape_err("broadcast", format!("source shape {:?} is not a scalar", t.shape)));
            }
            let n = shape.iter().product();
            Tensor {
                shape,
                data: vec![t.data[0]; n],
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::Broadcast(x), rg))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if shape.iter().product::<usize>() != t.data.len() {
                return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape)));
            }
            Tensor {
                shape,
                data: t.data.clone(),
            }
        };
        let rg = self.requires(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if loss.0 >= nodes.len() {
            return Err(shape_err("backward", format!("{loss:?} is not on this tape")));
        }
        if nodes[loss.0].value.data.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss.0].value.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.data.len()]);
    f(g);
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Unary(x, kind) => {
            let xv = &nodes[x.0].value.data;
            let yv = &node.value.data;
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    let d = match kind {
                        Unary::Softplus => sigmoid(xv[i]),
                        Unary::Sigmoid => yv[i] * (T::one() - yv[i]),
                        Unary::Abs => {
                            if xv[i] > T::zero() {
                                T::one()
                            } else if xv[i] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Log => xv[i].recip(),
                        Unary::Square => T::lit(2.0) * xv[i],
                        Unary::Exp => yv[i],
                    };
                    gx[i] += g[i] * d;
                }
            });
        }
        Op::Swish(x, sig) => {
            let xv = &nodes[x.0].value.data;
            accumulate(nodes, grads, *x, |gx| {
                for ((a, (&v, &s)), &gi) in gx.iter_mut().zip(xv.iter().zip(sig)).zip(g) {
                    *a += gi * (s + v * s * (T::one() - s));
                }
            });
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, |gx| {
            for (a, &b) in gx.iter_mut().zip(g) {
                *a += b * *c;
            }
        }),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, |gx| {
            for (a, &b) in gx.iter_mut().zip(g) {
                *a += b;
            }
        }),
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            accumulate(nodes, grads, *a, |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for (x, &y) in gb.iter_mut().zip(g) {
                    *x += sign * y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bv[i];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        Op::SumOver(x, axes) => {
            let (_, map) = reduce_map(&nodes[x.0].value.shape, axes);
            accumulate(nodes, grads, *x, |gx| {
                for (i, a) in gx.iter_mut().enumerate() {
                    *a += g[map(i)];
                }
            });
        }
        Op::LogSumExp(x, axis) => {
            let t = &nodes[x.0].value;
            let (outer, len, inner) = split_axis(&t.shape, *axis);
            let y = &node.value.data;
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let yo = y[o * inner + i];
                        if !yo.is_finite() {
                            continue;
                        }
                        for k in 0..len {
                            let idx = (o * len + k) * inner + i;
                            gx[idx] += g[o * inner + i] * (t.data[idx] - yo).exp();
                        }
                    }
                }
            });
        }
        Op::Gather(x, idx) => accumulate(nodes, grads, *x, |gx| {
            for (&i, &v) in idx.iter().zip(g) {
                gx[i] += v;
            }
        }),
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.data.len();
                accumulate(nodes, grads, *p, |gp| {
                    for (a, &b) in gp.iter_mut().zip(&g[offset..offset + n]) {
                        *a += b;
                    }
                });
                offset += n;
            }
        }
        Op::Broadcast(x) => accumulate(nodes, grads, *x, |gx| {
            gx[0] += g.iter().copied().sum::<T>();
        }),
        Op::Conv2d(rec) => conv::backward(nodes, rec, g, grads),
        Op::Fused(locals) => {
            let up = g[0];
            for (v, local) in locals {
                accumulate(nodes, grads, *v, |gv| {
                    for (a, &b) in gv.iter_mut().zip(local) {
                        *a += up * b;
                    }
                });
            }
        }
    }
}

/// `(outer, len, inner)` extents around `axis` for a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output shape of a reduction and a map from input to output flat index.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, impl Fn(usize) -> usize) {
    let in_strides = strides(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let dims: Vec<(usize, usize, usize)> = kept
        .iter()
        .zip(&out_strides)
        .map(|(&a, &os)| (in_strides[a], shape[a], os))
        .collect();
    let map = move |i: usize| dims.iter().map(|&(is, n, os)| (i / is) % n * os).sum();
    (out_shape, map)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
