//! Append-only operation tape with reverse-mode differentiation.
//!
//! A tape is built fresh for each forward pass. Leaves are either parameters
//! (gradient requested) or constants; every other node records the op and
//! its input handles. [`Tape::backward`] walks the nodes once in reverse
//! recording order.

use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::gemm;
use super::tensor::{numel, split_axis, strides, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

/// Primitive operations. Binary elementwise ops broadcast when the shapes
/// are equal, one side holds a single element, or one shape is a trailing
/// suffix of the other. Any other expansion goes through [`Op::BroadcastTo`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n]`.
    MatMul,
    Exp,
    Tanh,
    Relu,
    /// `x^p` for a fixed real exponent.
    Power(f64),
    Scale(f64),
    Shift(f64),
    SumAll,
    MeanAll,
    /// Mean over one axis, keeping it with extent 1.
    MeanAxis(usize),
    /// Biased (divide-by-N) variance over one axis, keeping it with extent 1.
    VarAxis(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat(usize),
    Reshape(Vec<usize>),
    /// Expand extent-1 axes (after left-padding the rank) to a target shape.
    BroadcastTo(Vec<usize>),
    /// Output axis `i` is input axis `perm[i]`.
    Permute(Vec<usize>),
    IndexSelect {
        axis: usize,
        indices: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Exp => "exp",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Power(_) => "power",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::MeanAxis(_) => "mean_axis",
            Op::VarAxis(_) => "var_axis",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast",
            Op::Permute(_) => "permute",
            Op::IndexSelect { .. } => "index_select",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the parameter leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` for constants and non-leaves.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    /// Copy of `v` as a constant leaf: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.try_value(v)?.clone();
        Ok(self.constant(value))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(())
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    /// Value of a node. Panics on a handle from another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        self.try_value(v).expect("variable belongs to this tape")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Apply a primitive and record it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if op == Op::Leaf {
            return Err(Error::Contract("leaves are created with param/constant".into()));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
        let out = forward(&op, &values)?;
        if !out.is_finite() {
            return Err(Error::Numeric(op.name().into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let idx = inputs.iter().map(|v| v.index).collect();
        Ok(self.push(out, op, idx, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn power(&mut self, a: Var, p: f64) -> Result<Var> {
        self.apply(Op::Power(p), &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Shift(c), &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MeanAll, &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MeanAxis(axis), &[a])
    }
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::VarAxis(axis), &[a])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), parts)
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::BroadcastTo(shape.to_vec()), &[a])
    }
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(perm.to_vec()), &[a])
    }
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.apply(
            Op::IndexSelect {
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    /// Reverse-mode pass from a single-element `loss`.
    ///
    /// Every parameter leaf gets a gradient; leaves the loss does not depend
    /// on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.index];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let contributions = backward_rule(&node.op, &inputs, &node.value, &g, &wants);
            for (k, contribution) in contributions.into_iter().enumerate() {
                let Some(c) = contribution else { continue };
                let j = node.inputs[k];
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op == Op::Leaf && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let data = match grads.get_mut(i).and_then(|g| g.take()) {
                    Some(d) => d,
                    None => vec![0.0; node.value.numel()],
                };
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("backward".into()));
                }
                out.push(Some(Tensor::from_parts(shape, data)));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }
}

/// `tanh` through one `exp`; about twice as fast as libm here and within an ulp or two.
fn fast_tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && (na > 1 || a.len() >= b.len()) {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::dim(op, a, b))
}

/// `f(a[i % |a|], b[i % |b|])` over `n` outputs, where each operand length divides `n`.
fn zip_broadcast(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if a.len() == n && b.len() == n {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if a.len() == n {
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else if b.len() == n {
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    } else {
        out.extend((0..n).map(|i| f(a[i % a.len()], b[i % b.len()])));
    }
    out
}

/// Sum a length-`n` buffer down to `small` elements by folding repeats.
fn reduce_repeats(g: Vec<f64>, small: usize) -> Vec<f64> {
    if g.len() == small {
        return g;
    }
    let mut out = vec![0.0; small];
    for chunk in g.chunks(small) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

/// For every output element of a broadcast, the flat index of its source element.
fn broadcast_sources(input: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if input.len() > target.len() {
        return Err(Error::dim("broadcast", input, target));
    }
    let pad = target.len() - input.len();
    let mut padded = vec![1; pad];
    padded.extend_from_slice(input);
    for (&i, &t) in padded.iter().zip(target) {
        if i != t && i != 1 {
            return Err(Error::dim("broadcast", input, target));
        }
    }
    let in_strides = strides(&padded);
    let eff: Vec<usize> = padded
        .iter()
        .zip(&in_strides)
        .map(|(&e, &s)| if e == 1 { 0 } else { s })
        .collect();
    Ok(gather_map(target, &eff))
}

/// Flat source index for every element of `out_shape`, given per-axis source strides.
fn gather_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            src += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

fn permute_map(input: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; input.len()];
    if perm.len() != input.len() {
        return Err(Error::dim("permute", input, perm));
    }
    for &p in perm {
        if p >= input.len() || seen[p] {
            return Err(Error::dim("permute", input, perm));
        }
        seen[p] = true;
    }
    let in_strides = strides(input);
    let out_shape: Vec<usize> = perm.iter().map(|&p| input[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let map = gather_map(&out_shape, &src_strides);
    Ok((out_shape, map))
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, shape, &[axis]));
    }
    Ok(())
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul => Some(2),
        Op::Concat(_) => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if inputs.len() != n {
            return Err(Error::Contract(format!(
                "{} takes {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    }
    let out = match op {
        Op::Leaf => unreachable!("leaves are not applied"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let shape = binary_shape(op.name(), a.shape(), b.shape())?;
            let n = numel(&shape);
            let data = match op {
                Op::Add => zip_broadcast(a.data(), b.data(), n, |x, y| x + y),
                Op::Sub => zip_broadcast(a.data(), b.data(), n, |x, y| x - y),
                Op::Mul => zip_broadcast(a.data(), b.data(), n, |x, y| x * y),
                _ => zip_broadcast(a.data(), b.data(), n, |x, y| x / y),
            };
            Tensor::from_parts(shape, data)
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            Tensor::from_parts(vec![m, n], c)
        }
        Op::Exp => unary(inputs[0], f64::exp),
        Op::Tanh => unary(inputs[0], fast_tanh),
        Op::Relu => unary(inputs[0], |v| v.max(0.0)),
        Op::Power(p) => unary(inputs[0], |v| v.powf(*p)),
        Op::Scale(c) => unary(inputs[0], |v| v * c),
        Op::Shift(c) => unary(inputs[0], |v| v + c),
        Op::SumAll => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::MeanAll => {
            let x = inputs[0];
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        Op::MeanAxis(axis) | Op::VarAxis(axis) => {
            let x = inputs[0];
            check_axis(op.name(), x.shape(), *axis)?;
            let mean = axis_mean(x, *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = 1;
            if matches!(op, Op::MeanAxis(_)) {
                Tensor::from_parts(shape, mean)
            } else {
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut var = vec![0.0; outer * inner];
                let d = x.data();
                for o in 0..outer {
                    for j in 0..len {
                        let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for i in 0..inner {
                            let c = row[i] - mean[o * inner + i];
                            var[o * inner + i] += c * c;
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= len as f64);
                Tensor::from_parts(shape, var)
            }
        }
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            check_axis("slice", x.shape(), *axis)?;
            if start >= end || *end > x.shape()[*axis] {
                return Err(Error::dim("slice", x.shape(), &[*axis, *start, *end]));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut data = Vec::with_capacity(outer * width);
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                data.extend_from_slice(&x.data()[base..base + width]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::from_parts(shape, data)
        }
        Op::Concat(axis) => {
            let first = inputs
                .first()
                .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
            check_axis("concat", first.shape(), *axis)?;
            let mut shape = first.shape().to_vec();
            shape[*axis] = 0;
            for t in inputs {
                let ok = t.rank() == first.rank()
                    && t
                        .shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .all(|(i, (x, y))| i == *axis || x == y);
                if !ok {
                    return Err(Error::dim("concat", first.shape(), t.shape()));
                }
                shape[*axis] += t.shape()[*axis];
            }
            let (outer, _, inner) = split_axis(&shape, *axis);
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for t in inputs {
                    let w = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::from_parts(shape, data)
        }
        Op::Reshape(shape) => inputs[0].reshape(shape.clone())?,
        Op::BroadcastTo(target) => {
            let x = inputs[0];
            let map = broadcast_sources(x.shape(), target)?;
            let d = x.data();
            Tensor::from_parts(target.clone(), map.iter().map(|&s| d[s]).collect())
        }
        Op::Permute(perm) => {
            let x = inputs[0];
            let (shape, map) = permute_map(x.shape(), perm)?;
            let d = x.data();
            Tensor::from_parts(shape, map.iter().map(|&s| d[s]).collect())
        }
        Op::IndexSelect { axis, indices } => {
            let x = inputs[0];
            check_axis("index_select", x.shape(), *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            if indices.is_empty() || indices.iter().any(|&i| i >= len) {
                return Err(Error::dim("index_select", x.shape(), indices));
            }
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &k in indices {
                    let base = (o * len + k) * inner;
                    data.extend_from_slice(&x.data()[base..base + inner]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = indices.len();
            Tensor::from_parts(shape, data)
        }
    };
    Ok(out)
}

fn axis_mean(x: &Tensor, axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut mean = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
            mean[o * inner..(o + 1) * inner]
                .iter_mut()
                .zip(row)
                .for_each(|(m, v)| *m += v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= len as f64);
    mean
}

/// Input gradients of one node, `None` where the input does not need one.
fn backward_rule(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let want = |k: usize| wants[k];
    match op {
        Op::Leaf => Vec::new(),
        Op::Add | Op::Sub => {
            let (na, nb) = (inputs[0].numel(), inputs[1].numel());
            let ga = want(0).then(|| reduce_repeats(g.to_vec(), na));
            let gb = want(1).then(|| {
                let mut r = reduce_repeats(g.to_vec(), nb);
                if *op == Op::Sub {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                r
            });
            vec![ga, gb]
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let n = g.len();
            let ga = want(0).then(|| reduce_repeats(zip_broadcast(g, b, n, |x, y| x * y), a.len()));
            let gb = want(1).then(|| reduce_repeats(zip_broadcast(g, a, n, |x, y| x * y), b.len()));
            vec![ga, gb]
        }
        Op::Div => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let n = g.len();
            let ga = want(0).then(|| reduce_repeats(zip_broadcast(g, b, n, |x, y| x / y), a.len()));
            let gb = want(1).then(|| {
                // d(a/b)/db = -out / b
                let g_out: Vec<f64> = g.iter().zip(out.data()).map(|(x, o)| -x * o).collect();
                reduce_repeats(zip_broadcast(&g_out, b, n, |x, y| x / y), b.len())
            });
            vec![ga, gb]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = want(0).then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                ga
            });
            let gb = want(1).then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }
        Op::Exp => vec![Some(g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
        Op::Tanh => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        )],
        Op::Relu => vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Power(p) => vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .map(|(g, x)| g * p * x.powf(p - 1.0))
                .collect(),
        )],
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::Shift(_) | Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::SumAll => vec![Some(vec![g[0]; inputs[0].numel()])],
        Op::MeanAll => {
            let n = inputs[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::MeanAxis(axis) => {
            let (outer, len, inner) = split_axis(inputs[0].shape(), *axis);
            let mut gi = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let row = &g[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    gi.extend(row.iter().map(|v| v / len as f64));
                }
            }
            vec![Some(gi)]
        }
        Op::VarAxis(axis) => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mean = axis_mean(x, *axis);
            let d = x.data();
            let scale = 2.0 / len as f64;
            let mut gi = Vec::with_capacity(d.len());
            for o in 0..outer {
                for j in 0..len {
                    let base = (o * len + j) * inner;
                    for i in 0..inner {
                        gi.push(g[o * inner + i] * scale * (d[base + i] - mean[o * inner + i]));
                    }
                }
            }
            vec![Some(gi)]
        }
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut gi = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                gi[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(gi)]
        }
        Op::Concat(axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let ext = t.shape()[*axis];
                    let off = offset;
                    offset += ext;
                    want(k).then(|| {
                        let w = ext * inner;
                        let mut gi = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            gi.extend_from_slice(&g[base..base + w]);
                        }
                        gi
                    })
                })
                .collect()
        }
        Op::BroadcastTo(target) => {
            let x = inputs[0];
            let map = broadcast_sources(x.shape(), target).expect("validated in forward");
            let mut gi = vec![0.0; x.numel()];
            for (&s, v) in map.iter().zip(g) {
                gi[s] += v;
            }
            vec![Some(gi)]
        }
        Op::Permute(perm) => {
            let x = inputs[0];
            let (_, map) = permute_map(x.shape(), perm).expect("validated in forward");
            let mut gi = vec![0.0; x.numel()];
            for (&s, v) in map.iter().zip(g) {
                gi[s] = *v;
            }
            vec![Some(gi)]
        }
        Op::IndexSelect { axis, indices } => {
            let x = inputs[0];
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut gi = vec![0.0; x.numel()];
            for o in 0..outer {
                for (slot, &k) in indices.iter().enumerate() {
                    let src = (o * indices.len() + slot) * inner;
                    let dst = (o * len + k) * inner;
                    gi[dst..dst + inner]
                        .iter_mut()
                        .zip(&g[src..src + inner])
                        .for_each(|(a, b)| *a += b);
                }
            }
            vec![Some(gi)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.005;
            assert!((fast_tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        }
        assert_eq!(fast_tanh(0.0), 0.0);
        assert_eq!(fast_tanh(1e300), 1.0);
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mean_over_time_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.value(m).shape(), &[1, 1]);
        assert_eq!(tape.value(m).data(), &[2.5]);
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let y = tape.exp(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        match tape.add(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
        let m = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.matmul(a, m).is_ok());
    }

    #[test]
    fn division_by_zero_is_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.div(a, b), Err(Error::Numeric(_))));
    }

    #[test]
    fn trailing_and_scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let row = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let s = tape.constant(Tensor::scalar(2.0));
        let r = tape.add(a, row).unwrap();
        assert_eq!(tape.value(r).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let p = tape.mul(s, a).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 3]);
        assert_eq!(tape.value(p).data()[5], 10.0);
        let col = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        assert!(tape.add(a, col).is_err());
        let bc = tape.broadcast_to(col, &[2, 3]).unwrap();
        assert_eq!(tape.value(bc).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_p() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        let q = tape.param(t(&[2], &[3.0, 4.0]));
        let l = tape.sum(q).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.constant(Tensor::ones(vec![1]));
        let _ = b.constant(Tensor::ones(vec![1]));
        assert!(matches!(b.exp(x), Err(Error::Contract(_))));
    }

    #[test]
    fn permute_and_index_select() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.permute(x, &[0, 2, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 3, 2]);
        assert_eq!(tape.value(p).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let r = tape.index_select(x, 2, &[2, 1, 0]).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}
