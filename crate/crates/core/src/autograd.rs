//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. `backward` walks
//! the records in exact reverse order and accumulates gradients, so a value
//! that feeds several consumers receives the sum of their contributions.
//! Trainable weights live in a [`ParamStore`] outside the tape; a graph
//! borrows their current values when [`Graph::param`] is called and
//! [`Graph::accumulate_param_grads`] pushes gradients back.

use crate::error::{MedcError, Result};
use crate::tensor::{
    axis_blocks, broadcast_index_map, broadcast_shape, numel, reduce_to_shape, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Tensor,
}

/// Owned set of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let grad = Tensor::zeros(tensor.shape());
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LogSumExp(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    branches: u64,
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_axis(t: &Tensor, axis: usize, op: &str) -> Result<()> {
    if axis >= t.rank() {
        return Err(MedcError::Shape(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Sum over `axis`, dropping it.
fn sum_axis_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                out[o * inner + i] += src[o * n * inner + k * inner + i];
            }
        }
    }
    Tensor::new(removed_axis(x.shape(), axis), out).expect("reduced shape")
}

/// Inverse of `sum_axis_values`: repeat `g` along a re-inserted `axis` of extent `n`.
fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, n, inner) = axis_blocks(shape, axis);
    let src = g.data();
    let mut out = vec![0.0; numel(shape)];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                out[o * n * inner + k * inner + i] = src[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("expanded shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Record a discrete choice made while building the graph (ReLU side,
    /// active clamp bound, argmax pick). Two evaluations with equal
    /// signatures lie on the same smooth piece of the objective.
    pub fn note_branch(&mut self, choice: u64) {
        self.branches = (self.branches ^ choice.wrapping_add(0x9e37_79b9_7f4a_7c15)).wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).tensor.clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .map_err(|e| MedcError::Shape(format!("{name}: {e}")))?;
        let ma = broadcast_index_map(ta.shape(), &shape);
        let mb = broadcast_index_map(tb.shape(), &shape);
        let (da, db) = (ta.data(), tb.data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let pattern: Vec<u64> = self.nodes[a.0].value.data().iter().map(|&x| (x > 0.0) as u64).collect();
        pattern.into_iter().for_each(|b| self.note_branch(b));
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, stable_softplus, Op::Softplus(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let regions: Vec<u64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| if x < lo { 0 } else if x > hi { 2 } else { 1 })
            .collect();
        regions.into_iter().for_each(|r| self.note_branch(r));
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.value(a), axis, "sum_axis")?;
        let value = sum_axis_values(self.value(a), axis);
        Ok(self.push(value, Op::SumAxis(a, axis), &[a]))
    }

    /// Arithmetic mean along `axis`, removing it.
    pub fn mean_pool_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t, axis, "mean_pool_axis")?;
        let n = t.shape()[axis];
        if n == 0 {
            return Err(MedcError::Shape(format!(
                "mean_pool_axis: axis {axis} of shape {:?} is empty",
                t.shape()
            )));
        }
        let value = sum_axis_values(t, axis).map(|v| v / n as f64);
        Ok(self.push(value, Op::MeanAxis(a, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(MedcError::Shape("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(value, Op::MeanAll(a), &[a]))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(MedcError::Shape(format!(
                "dot: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax_along(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t, axis, "softmax_along")?;
        if t.shape()[axis] == 0 {
            return Err(MedcError::Shape(format!(
                "softmax_along: axis {axis} of shape {:?} is empty",
                t.shape()
            )));
        }
        let value = softmax_values(t, axis);
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    /// `ln Σ exp` along `axis`, removing it.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t, axis, "logsumexp")?;
        if t.shape()[axis] == 0 {
            return Err(MedcError::Shape("logsumexp over an empty axis".into()));
        }
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|k| (src[at(k)] - max).exp()).sum();
                out[o * inner + i] = max + s.ln();
            }
        }
        let value = Tensor::new(removed_axis(t.shape(), axis), out)?;
        Ok(self.push(value, Op::LogSumExp(a, axis), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if numel(shape) != t.len() {
            return Err(MedcError::Shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                t.shape()
            )));
        }
        let value = t.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MedcError::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(MedcError::Shape(format!("concat: axis {axis} out of range")));
        }
        let mut extent = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(MedcError::Shape(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Keep indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        check_axis(t, axis, "slice")?;
        if start > end || end > t.shape()[axis] {
            return Err(MedcError::Shape(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_blocks(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice(a, axis, start), &[a]))
    }

    /// Gather entries along axis 0 (indices may repeat).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(MedcError::Shape("select_rows on a scalar".into()));
        }
        let rows = t.shape()[0];
        let width = t.len() / rows.max(1);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(MedcError::Shape(format!(
                "select_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), &[a]))
    }

    /// Reverse pass from a single-element `target`. Gradients are stored on
    /// the graph (see [`Graph::grad`]); previous results are discarded.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).len() != 1 {
            return Err(MedcError::Shape(format!(
                "backward needs a scalar target, got shape {:?}",
                self.shape(target)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(Tensor::full(self.shape(target), 1.0));

        for idx in (0..=target.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Add gradients reaching parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let zip_map = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g, val(a).shape())),
                (*b, reduce_to_shape(g, val(b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to_shape(g, val(a).shape())),
                (*b, reduce_to_shape(&g.map(|v| -v), val(b).shape())),
            ],
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let ma = broadcast_index_map(ta.shape(), y.shape());
                let mb = broadcast_index_map(tb.shape(), y.shape());
                let (da, db) = (ta.data(), tb.data());
                let is_div = matches!(node.op, Op::Div(..));
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for (k, &gv) in g.data().iter().enumerate() {
                    let (x, z) = (da[ma[k]], db[mb[k]]);
                    if is_div {
                        ga.push(gv / z);
                        gb.push(-gv * x / (z * z));
                    } else {
                        ga.push(gv * z);
                        gb.push(gv * x);
                    }
                }
                let ga = Tensor::new(y.shape().to_vec(), ga).expect("shape");
                let gb = Tensor::new(y.shape().to_vec(), gb).expect("shape");
                vec![
                    (*a, reduce_to_shape(&ga, ta.shape())),
                    (*b, reduce_to_shape(&gb, tb.shape())),
                ]
            }
            Op::MatMul(a, b) => {
                let ga = g
                    .matmul(&val(b).transpose().expect("matrix"))
                    .expect("matmul grad shape");
                let gb = val(a)
                    .transpose()
                    .expect("matrix")
                    .matmul(g)
                    .expect("matmul grad shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose().expect("matrix"))],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => vec![(*a, zip_map(val(a), &|x, gv| if x > 0.0 { gv } else { 0.0 }))],
            Op::Sigmoid(a) => vec![(*a, zip_map(y, &|s, gv| gv * s * (1.0 - s)))],
            Op::Log(a) => vec![(*a, zip_map(val(a), &|x, gv| gv / x))],
            Op::Exp(a) => vec![(*a, zip_map(y, &|e, gv| gv * e))],
            Op::Square(a) => vec![(*a, zip_map(val(a), &|x, gv| 2.0 * x * gv))],
            Op::Sqrt(a) => vec![(*a, zip_map(y, &|s, gv| gv / (2.0 * s)))],
            Op::Softplus(a) => vec![(*a, zip_map(val(a), &|x, gv| gv * sigmoid(x)))],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                zip_map(val(a), &|x, gv| if x >= *lo && x <= *hi { gv } else { 0.0 }),
            )],
            Op::SumAxis(a, axis) => vec![(*a, expand_axis(g, val(a).shape(), *axis, 1.0))],
            Op::MeanAxis(a, axis) => {
                let n = val(a).shape()[*axis] as f64;
                vec![(*a, expand_axis(g, val(a).shape(), *axis, 1.0 / n))]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::MeanAll(a) => {
                let n = val(a).len() as f64;
                vec![(*a, Tensor::full(val(a).shape(), g.item() / n))]
            }
            Op::Softmax(a, axis) => {
                // dx = y * (g - Σ_axis g·y)
                let gy = zip_map(y, &|s, gv| s * gv);
                let dotted = sum_axis_values(&gy, *axis);
                let back = expand_axis(&dotted, y.shape(), *axis, 1.0);
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .zip(back.data())
                    .map(|((&s, &gv), &d)| s * (gv - d))
                    .collect();
                vec![(*a, Tensor::new(y.shape().to_vec(), data).expect("shape"))]
            }
            Op::LogSumExp(a, axis) => {
                let x = val(a);
                let sm = softmax_values(x, *axis);
                let ge = expand_axis(g, x.shape(), *axis, 1.0);
                let data = sm.data().iter().zip(ge.data()).map(|(s, gv)| s * gv).collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data).expect("shape"))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(a).shape()).expect("same size"))],
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_blocks(y.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let shape = val(p).shape();
                    let n = shape[*axis];
                    let mut data = Vec::with_capacity(numel(shape));
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    out.push((*p, Tensor::new(shape.to_vec(), data).expect("shape")));
                    offset += n;
                }
                out
            }
            Op::Slice(a, axis, start) => {
                let shape = val(a).shape();
                let (outer, n, inner) = axis_blocks(shape, *axis);
                let m = y.shape()[*axis];
                let mut full = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * m * inner;
                    full.data_mut()[dst..dst + m * inner]
                        .copy_from_slice(&g.data()[src..src + m * inner]);
                }
                vec![(*a, full)]
            }
            Op::SelectRows(a, indices) => {
                let shape = val(a).shape();
                let width = numel(&shape[1..]);
                let mut full = Tensor::zeros(shape);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut full.data_mut()[i * width..(i + 1) * width];
                    for (d, s) in dst.iter_mut().zip(&g.data()[r * width..(r + 1) * width]) {
                        *d += s;
                    }
                }
                vec![(*a, full)]
            }
        }
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat entry index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Entries whose ±h evaluations took a different ReLU/clamp/argmax
    /// branch than the base point. Finite differences across a kink do not
    /// estimate the derivative, so these are left out of `max_rel_err`.
    pub entries_straddling_kinks: usize,
}

fn eval_with_branches<F>(f: &F, store: &ParamStore) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(MedcError::Shape(format!(
            "objective must be scalar, got shape {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(MedcError::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok((v, g.branch_signature()))
}

/// Evaluate a scalar objective on a fresh graph.
pub fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    Ok(eval_with_branches(f, store)?.0)
}

/// Compare reverse-mode gradients of `f` with central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every entry of every parameter.
///
/// Relative error per entry is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn gradient_check<F>(f: F, store: &mut ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.value(out).is_finite() {
        return Err(MedcError::NonFinite("objective at base point".into()));
    }
    let base = g.branch_signature();
    g.backward(out)?;
    g.accumulate_param_grads(store);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
        entries_straddling_kinks: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for k in 0..store.get(id).tensor.len() {
            let orig = store.get(id).tensor.data()[k];
            store.get_mut(id).tensor.data_mut()[k] = orig + h;
            let plus = eval_with_branches(&f, store);
            store.get_mut(id).tensor.data_mut()[k] = orig - h;
            let minus = eval_with_branches(&f, store);
            store.get_mut(id).tensor.data_mut()[k] = orig;
            let ((fp, bp), (fm, bm)) = (plus?, minus?);
            report.entries_checked += 1;
            if bp != base || bm != base {
                report.entries_straddling_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = store.get(id).grad.data()[k];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
