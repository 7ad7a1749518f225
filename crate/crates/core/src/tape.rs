//! Reverse-mode differentiation by recording every forward op on a tape and
//! replaying the records backwards.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, ResizeMode};
use crate::param::{Param, ParamId};
use crate::tensor::{Element, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool(Var),
    Resize(Var, ResizeMode),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Lerp(Var, Var, Var),
    Concat(Vec<Var>),
    Sum(Var),
    Bce { logits: Var, target: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed ops. Parameters are registered once per tape,
/// so a layer reused across unrolled steps accumulates one combined gradient.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    marks: HashMap<ParamId, Var>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            marks: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Records `v` as the latest value produced by the layer owning `key`,
    /// for reading intermediate maps after a full forward pass.
    pub fn mark(&mut self, key: ParamId, v: Var) {
        self.marks.insert(key, v);
    }

    pub fn marked(&self, key: ParamId) -> Option<Var> {
        self.marks.get(&key).copied()
    }

    /// A value gradients never flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf, true);
        self.params.insert(p.id(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let value = kernels::avg_pool(self.value(x), kernel, stride, padding)?;
        let rg = self.needs(x);
        Ok(self.push(
            value,
            Op::AvgPool {
                x,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = kernels::global_avg_pool(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize, mode: ResizeMode) -> Result<Var> {
        let value = kernels::resize(self.value(x), h, w, mode)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Resize(x, mode), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = kernels::relu(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = kernels::sigmoid(self.value(x));
        let rg = self.needs(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `s * a + (1 - s) * b`.
    pub fn lerp(&mut self, s: Var, a: Var, b: Var) -> Result<Var> {
        let value = kernels::lerp(self.value(s), self.value(a), self.value(b))?;
        let rg = self.needs(s) || self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Lerp(s, a, b), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat_channels(&values)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy of `logits` against a fixed target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = kernels::bce_with_logits(self.value(logits), target)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::usage(format!(
                "backward needs a 1x1x1x1 loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut emit = |v: Var, contribution: Tensor<T>| {
                if !self.needs(v) {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc
                        .add_assign(&contribution)
                        .expect("gradient shape matches its node"),
                    None => grads[v.0] = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, geom } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        b.is_some(),
                        *geom,
                        &g,
                        [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))],
                    );
                    if let Some(gx) = cg.input {
                        emit(*x, gx);
                    }
                    if let Some(gw) = cg.weight {
                        emit(*w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, cg.bias) {
                        let shape = self.shape(*b);
                        emit(*b, Tensor::from_vec(shape, gb.into_data()).expect("bias length"));
                    }
                }
                Op::AvgPool {
                    x,
                    kernel,
                    stride,
                    padding,
                } => {
                    let gx = kernels::avg_pool_backward(self.shape(*x), *kernel, *stride, *padding, &g);
                    emit(*x, gx);
                }
                Op::GlobalAvgPool(x) => {
                    emit(*x, kernels::global_avg_pool_backward(self.shape(*x), &g));
                }
                Op::Resize(x, mode) => {
                    emit(*x, kernels::resize_backward(self.shape(*x), *mode, &g));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = Tensor::from_fn(g.shape(), |i| {
                        if xv.data()[i] > T::zero() {
                            g.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    emit(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(g.shape(), |i| {
                        let s = y.data()[i];
                        g.data()[i] * s * (T::one() - s)
                    });
                    emit(*x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        emit(*a, kernels::reduce_to(&g, self.shape(*a)));
                    }
                    if self.needs(*b) {
                        emit(*b, kernels::reduce_to(&g, self.shape(*b)));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        emit(*a, scatter_product(&g, bv, av.shape()));
                    }
                    if self.needs(*b) {
                        emit(*b, scatter_product(&g, av, bv.shape()));
                    }
                }
                Op::Lerp(s, a, b) => {
                    let (sv, av, bv) = (self.value(*s), self.value(*a), self.value(*b));
                    let os = g.shape();
                    let shapes = [sv.shape(), av.shape(), bv.shape()];
                    let mut gs = self.needs(*s).then(|| Tensor::zeros(sv.shape()));
                    let mut ga = self.needs(*a).then(|| Tensor::zeros(av.shape()));
                    let mut gb = self.needs(*b).then(|| Tensor::zeros(bv.shape()));
                    kernels::for_each_broadcast(os, shapes, |i, [is, ia, ib]| {
                        let gi = g.data()[i];
                        let w = sv.data()[is];
                        if let Some(gs) = gs.as_mut() {
                            let d = &mut gs.data_mut()[is];
                            *d = *d + gi * (av.data()[ia] - bv.data()[ib]);
                        }
                        if let Some(ga) = ga.as_mut() {
                            let d = &mut ga.data_mut()[ia];
                            *d = *d + gi * w;
                        }
                        if let Some(gb) = gb.as_mut() {
                            let d = &mut gb.data_mut()[ib];
                            *d = *d + gi * (T::one() - w);
                        }
                    });
                    if let Some(t) = gs {
                        emit(*s, t);
                    }
                    if let Some(t) = ga {
                        emit(*a, t);
                    }
                    if let Some(t) = gb {
                        emit(*b, t);
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.shape(*p).c;
                        if self.needs(*p) {
                            emit(*p, g.channels(start, c).expect("concat slice in range"));
                        }
                        start += c;
                    }
                }
                Op::Sum(x) => {
                    emit(*x, Tensor::full(self.shape(*x), g.data()[0]));
                }
                Op::Bce { logits, target } => {
                    let z = self.value(*logits);
                    let scale = g.data()[0] / T::of(z.len() as f64);
                    let gz = Tensor::from_fn(z.shape(), |i| {
                        (kernels::sigmoid_scalar(z.data()[i]) - target.data()[i]) * scale
                    });
                    emit(*logits, gz);
                }
            }
        }

        let by_param = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Ok(Gradients {
            by_var: grads,
            by_param,
        })
    }
}

/// Gradient of `a * b` with respect to the operand of shape `target`, given the
/// other operand `other`.
fn scatter_product<T: Element>(g: &Tensor<T>, other: &Tensor<T>, target: Shape) -> Tensor<T> {
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    kernels::for_each_broadcast(g.shape(), [other.shape(), target], |i, [io, it]| {
        od[it] = od[it] + g.data()[i] * other.data()[io];
    });
    out
}

/// Result of one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    by_var: Vec<Option<Tensor<T>>>,
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn for_param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }
}
