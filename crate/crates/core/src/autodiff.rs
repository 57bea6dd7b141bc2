//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward evaluation. Parameters
//! enter the tape by copy from a [`ParamStore`]; [`Tape::backward`] returns
//! their gradients as a [`Grads`] set that the caller folds back into the
//! store. One tape per evaluation keeps independent forward passes free of
//! shared mutable state.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{numel, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Sigmoid(Var),
    Silu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mse(Var, Var),
    Narrow { src: Var, offset: usize },
    Reshape(Var),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Sigmoid(_) => "sigmoid",
            Op::Silu(_) => "silu",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse_loss",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the parameters bound on a tape,
/// indexed like the originating [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    per_param: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn len(&self) -> usize {
        self.per_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.is_empty()
    }

    /// Gradient of parameter `index`; `None` when the loss does not reach it.
    pub fn get(&self, index: usize) -> Option<&[f64]> {
        self.per_param.get(index).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut [f64]> {
        self.per_param.get_mut(index).and_then(|g| g.as_deref_mut())
    }

    /// Elementwise `self += other`, in parameter order.
    pub fn add_assign(&mut self, other: &Grads) {
        if self.per_param.len() < other.per_param.len() {
            self.per_param.resize(other.per_param.len(), None);
        }
        for (mine, theirs) in self.per_param.iter_mut().zip(&other.per_param) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.per_param.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Record of one forward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_slots: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite output from {}",
            op.name()
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copy of a recorded value as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// First element of a value; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    /// Records parameter `index` of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let t = store.tensor(index);
        self.param_slots = self.param_slots.max(store.len());
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(index), true)
    }

    /// Records every parameter of `store`, in store order.
    pub fn bind(&mut self, store: &ParamStore) -> Vec<Var> {
        (0..store.len()).map(|i| self.param(store, i)).collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Same-padded cross-correlation of a `Cin×H×W` input with a
    /// `Cout×Cin×k×k` kernel (odd `k`) plus a per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let is = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if is.len() != 3 {
            return Err(Error::dim("conv2d", format!("input must be C×H×W, got {is:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::dim(
                "conv2d",
                format!("weight must be Cout×Cin×k×k with odd k, got {ws:?}"),
            ));
        }
        if ws[1] != is[0] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, weight expects {}", is[0], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::dim(
                "conv2d",
                format!("bias must be [{}], got {bs:?}", ws[0]),
            ));
        }
        let geom = ConvGeom {
            cin: is[0],
            cout: ws[0],
            h: is[1],
            w: is[2],
            k: ws[2],
        };
        let out = conv::forward(geom, self.value(input), self.value(weight), self.value(bias));
        let rg = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        Ok(self.push(
            vec![geom.cout, geom.h, geom.w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| math::sigmoid(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, out, Op::Sigmoid(x), rg)
    }

    /// `x·σ(x)`, the smooth ramp used inside encoder blocks.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * math::sigmoid(v)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, out, Op::Silu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.requires_grad(x));
        self.push(shape, out, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = self.value(pred).len() as f64;
        let s: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        Ok(self.push(vec![1], vec![s / n], Op::Mse(pred, target), rg))
    }

    /// Rows `[start, start + len)` of the leading dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        let lead = shape[0];
        if len == 0 || start + len > lead {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} outside leading dim {lead}", start + len),
            ));
        }
        let stride = numel(shape) / lead;
        let mut new_shape = shape.to_vec();
        new_shape[0] = len;
        let out = self.value(x)[start * stride..(start + len) * stride].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(
            new_shape,
            out,
            Op::Narrow {
                src: x,
                offset: start * stride,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Joins values along the leading dimension; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not stack with trailing dims {tail:?}"),
                ));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
            rg |= self.requires_grad(p);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Grads {
            per_param: vec![None; self.param_slots],
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => match &mut out.per_param[*p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                },
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let mut gi = self.take_buf(&mut grads, *input);
                    let mut gw = self.take_buf(&mut grads, *weight);
                    let mut gb = self.take_buf(&mut grads, *bias);
                    conv::backward(
                        *geom,
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        gi.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    grads[input.0] = gi.or(grads[input.0].take());
                    grads[weight.0] = gw.or(grads[weight.0].take());
                    grads[bias.0] = gb.or(grads[bias.0].take());
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    self.accumulate(&mut grads, *x, |buf| {
                        for ((b, gv), yv) in buf.iter_mut().zip(&g).zip(y) {
                            *b += gv * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Silu(x) => {
                    let xs = self.value(*x);
                    self.accumulate(&mut grads, *x, |buf| {
                        for ((b, gv), &xv) in buf.iter_mut().zip(&g).zip(xs) {
                            let s = math::sigmoid(xv);
                            *b += gv * s * (1.0 + xv * (1.0 - s));
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        self.accumulate(&mut grads, v, |buf| {
                            buf.iter_mut().zip(&g).for_each(|(x, gv)| *x += gv)
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accumulate(&mut grads, *a, |buf| {
                        for ((x, gv), o) in buf.iter_mut().zip(&g).zip(vb) {
                            *x += gv * o;
                        }
                    });
                    self.accumulate(&mut grads, *b, |buf| {
                        for ((x, gv), o) in buf.iter_mut().zip(&g).zip(va) {
                            *x += gv * o;
                        }
                    });
                }
                Op::Scale(x, f) => {
                    self.accumulate(&mut grads, *x, |buf| {
                        buf.iter_mut().zip(&g).for_each(|(b, gv)| *b += gv * f)
                    });
                }
                Op::Sum(x) => {
                    self.accumulate(&mut grads, *x, |buf| buf.iter_mut().for_each(|b| *b += g[0]));
                }
                Op::Mse(p, t) => {
                    let (vp, vt) = (self.value(*p), self.value(*t));
                    let k = 2.0 * g[0] / vp.len() as f64;
                    self.accumulate(&mut grads, *p, |buf| {
                        for ((b, x), y) in buf.iter_mut().zip(vp).zip(vt) {
                            *b += k * (x - y);
                        }
                    });
                    self.accumulate(&mut grads, *t, |buf| {
                        for ((b, x), y) in buf.iter_mut().zip(vp).zip(vt) {
                            *b -= k * (x - y);
                        }
                    });
                }
                Op::Narrow { src, offset } => {
                    let off = *offset;
                    self.accumulate(&mut grads, *src, |buf| {
                        buf[off..off + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(b, gv)| *b += gv)
                    });
                }
                Op::Reshape(x) => {
                    self.accumulate(&mut grads, *x, |buf| {
                        buf.iter_mut().zip(&g).for_each(|(b, gv)| *b += gv)
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let slice = &g[off..off + n];
                        self.accumulate(&mut grads, p, |buf| {
                            buf.iter_mut().zip(slice).for_each(|(b, gv)| *b += gv)
                        });
                        off += n;
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let len = self.value(v).len();
        f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
    }

    fn take_buf(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.requires_grad(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; len]))
    }
}

/// Back-propagates `loss` and adds the resulting gradients into `store`.
/// Calling it repeatedly without [`ParamStore::zero_grad`] accumulates.
pub fn backward(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    let grads = tape.backward(loss)?;
    store.accumulate(&grads)
}
