//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every builder call on [`Graph`] evaluates its operation immediately and
//! appends a node, so insertion order is a topological order. [`Graph::backward`]
//! walks the nodes once in reverse. Any non-finite value produced in either
//! direction is an error.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Broadcast(NodeId),
    MeanAxis(NodeId, usize),
    Sum(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    StopGradient,
    Rebase(NodeId),
    Concat(Vec<NodeId>, usize),
    /// Rows `[start, start + len)` of a matrix.
    SliceRows(NodeId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Broadcast(..) => "broadcast",
            Op::MeanAxis(..) => "mean_axis",
            Op::Sum(..) => "sum",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::StopGradient => "stop_gradient",
            Op::Rebase(..) => "rebase",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    // false when no trainable leaf reaches this node
    live: bool,
}

/// A single forward pass. Not shared between threads; build one per client.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, Tensor>,
    bound: BTreeMap<String, NodeId>,
}

/// Gradients of a scalar loss with respect to every node in a graph.
///
/// Nodes the loss does not depend on (including anything behind a
/// stop-gradient) report an all-zero tensor.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// `None` when no gradient reached the node.
    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn broadcast_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => (0, 0),
    }
}

fn broadcast_value(src: &Tensor, target: &[usize]) -> Result<Tensor> {
    if src.shape() == target {
        return Ok(src.clone());
    }
    if src.len() == 1 {
        return Ok(Tensor::full(target, src.item()));
    }
    if target.len() != 2 || src.rank() > 2 {
        return Err(Error::shape("broadcast", src.shape(), target));
    }
    let (sr, sc) = broadcast_dims(src.shape());
    let (tr, tc) = (target[0], target[1]);
    if !(sr == tr || sr == 1) || !(sc == tc || sc == 1) {
        return Err(Error::shape("broadcast", src.shape(), target));
    }
    let s = src.data();
    let mut out = Vec::with_capacity(tr * tc);
    for i in 0..tr {
        let si = if sr == 1 { 0 } else { i };
        for j in 0..tc {
            let sj = if sc == 1 { 0 } else { j };
            out.push(s[si * sc + sj]);
        }
    }
    Tensor::matrix(tr, tc, out)
}

/// Sums a broadcast gradient back down to the source shape.
fn unbroadcast(grad: &Tensor, src_shape: &[usize]) -> Tensor {
    if grad.shape() == src_shape {
        return grad.clone();
    }
    let n: usize = src_shape.iter().product();
    if n == 1 {
        return Tensor::full(src_shape, grad.sum());
    }
    let (sr, sc) = broadcast_dims(src_shape);
    let (tr, tc) = (grad.shape()[0], grad.shape()[1]);
    let mut out = vec![0.0; sr * sc];
    let g = grad.data();
    for i in 0..tr {
        let si = if sr == 1 { 0 } else { i };
        for j in 0..tc {
            let sj = if sc == 1 { 0 } else { j };
            out[si * sc + sj] += g[i * tc + j];
        }
    }
    Tensor::new(src_shape.to_vec(), out).expect("unbroadcast shape")
}

fn mean_axis_value(x: &Tensor, axis: usize) -> Result<Tensor> {
    if x.rank() != 2 || axis > 1 {
        return Err(Error::shape("mean_axis", x.shape(), &[axis]));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let d = x.data();
    if axis == 0 {
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Tensor::matrix(1, c, out)
    } else {
        let inv = 1.0 / c as f64;
        let out = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() * inv).collect();
        Tensor::matrix(r, 1, out)
    }
}

fn concat_value(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyList("concat"))?;
    if first.rank() != 2 || axis > 1 {
        return Err(Error::shape("concat", first.shape(), &[axis]));
    }
    if axis == 0 {
        return Tensor::vstack(parts);
    }
    let rows = first.shape()[0];
    for p in parts {
        if p.rank() != 2 || p.shape()[0] != rows {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(rows, cols, out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose named placeholders are resolved from `inputs`.
    pub fn with_inputs(inputs: BTreeMap<String, Tensor>) -> Self {
        Graph {
            inputs,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        let live = match &op {
            Op::Leaf => true,
            Op::StopGradient => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                self.is_live(*a) || self.is_live(*b)
            }
            Op::Concat(parts, _) => parts.iter().any(|&p| self.is_live(p)),
            Op::Transpose(a)
            | Op::Broadcast(a)
            | Op::MeanAxis(a, _)
            | Op::Sum(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Rebase(a)
            | Op::SliceRows(a, _) => self.is_live(*a),
        };
        self.push_with(op, value, live)
    }

    fn push_with(&mut self, op: Op, value: Tensor, live: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { op, value, live });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn is_live(&self, id: NodeId) -> bool {
        self.nodes[id.0].live
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Leaf node: a parameter, a constant, or a data tensor.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    /// Leaf that never receives a gradient (data, fixed masks).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push_with(Op::Leaf, value, false)
    }

    /// Named placeholder bound from the graph's input map. Repeated lookups
    /// of the same name return the same node.
    pub fn input(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self
            .inputs
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        let id = self.leaf(value)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), op.name(), f)?;
        self.push(op, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        self.push(Op::Transpose(a), v)
    }

    /// Broadcasts a scalar, a `[1, w]`/`[w]` row or an `[n, 1]` column to `shape`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = broadcast_value(self.value(a), shape)?;
        self.push(Op::Broadcast(a), v)
    }

    /// Mean over `axis` of a matrix, keeping the reduced dimension as size 1.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = mean_axis_value(self.value(a), axis)?;
        self.push(Op::MeanAxis(a, axis), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    /// Identity on the forward value; contributes no gradient to `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.push(Op::StopGradient, v)
    }

    /// `live + stop_gradient(value - live)` as a single node: the forward value
    /// is exactly `value`, the backward pass is the identity onto `live`.
    pub fn rebase(&mut self, live: NodeId, value: Tensor) -> Result<NodeId> {
        if value.shape() != self.shape(live) {
            return Err(Error::shape("rebase", self.shape(live), value.shape()));
        }
        self.push(Op::Rebase(live), value)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concat_value(&values, axis)?;
        self.push(Op::Concat(parts.to_vec(), axis), v)
    }

    /// Rows `[start, start + len)` of a matrix node.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", &[rows, cols], &[start + len, cols]));
        }
        let v = slice_axis(self.value(a), 0, start, len)?;
        self.push(Op::SliceRows(a, start), v)
    }

    /// Reverse pass from a scalar `loss`, seeded with 1.0.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let live = |id: NodeId| self.nodes[id.0].live;
            let accumulate = |grads: &mut [Option<Tensor>], id: NodeId, g: Tensor| {
                if self.nodes[id.0].live {
                    accumulate(grads, id, g);
                }
            };
            if !g.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    if live(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?);
                    }
                    if live(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?);
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if live(*a) {
                        accumulate(&mut grads, *a, g.zip_map(bv, "div", |x, y| x / y)?);
                    }
                    if live(*b) {
                        let gb = g
                            .zip_map(&node.value, "div", |x, q| x * q)?
                            .zip_map(bv, "div", |x, y| -x / y)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMul(a, b) => {
                    if live(*a) {
                        accumulate(&mut grads, *a, g.matmul_nt(self.value(*b))?);
                    }
                    if live(*b) {
                        accumulate(&mut grads, *b, self.value(*a).matmul_tn(&g)?);
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.value(*a).dims2()?;
                    let mut full = Tensor::zeros(&[rows, cols]);
                    full.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, full);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?),
                Op::Broadcast(a) => {
                    let src = self.shape(*a);
                    accumulate(&mut grads, *a, unbroadcast(&g, src));
                }
                Op::MeanAxis(a, axis) => {
                    let shape = self.shape(*a).to_vec();
                    let n = shape[*axis] as f64;
                    let spread = broadcast_value(&g.scale(1.0 / n), &shape)?;
                    accumulate(&mut grads, *a, spread);
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::full(shape, g.item()));
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(*a), "square", |x, v| 2.0 * v * x)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, "sqrt", |x, s| 0.5 * x / s)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::AddScalar(a) | Op::Rebase(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu", |x, v| if v > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, "exp", |x, e| x * e)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(self.value(*a), "ln", |x, v| x / v)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.shape(p).to_vec();
                        let piece = slice_axis(&g, *axis, offset, shape[*axis])?;
                        offset += shape[*axis];
                        accumulate(&mut grads, p, piece);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(1.0, &g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}

fn slice_axis(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    if axis == 0 {
        let data = t.data()[start * c..(start + len) * c].to_vec();
        Tensor::matrix(len, c, data)
    } else {
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Tensor::matrix(r, len, data)
    }
}

/// Evaluates a graph built by `build` against named `inputs` and returns
/// the values of the nodes it names as outputs.
pub fn forward<F>(inputs: BTreeMap<String, Tensor>, build: F) -> Result<BTreeMap<String, Tensor>>
where
    F: FnOnce(&mut Graph) -> Result<Vec<(String, NodeId)>>,
{
    let mut graph = Graph::with_inputs(inputs);
    let outputs = build(&mut graph)?;
    Ok(outputs
        .into_iter()
        .map(|(name, id)| (name, graph.value(id).clone()))
        .collect())
}

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub passed: bool,
}

/// Central-difference gradient check of a scalar loss with respect to one
/// tensor argument.
///
/// `build` receives a fresh graph and the node holding the (possibly
/// perturbed) argument, and returns the loss node. The relative error of
/// entry `i` is `|a_i - n_i| / max(|a_i|, |n_i|, floor)` where `floor` is
/// `1e-6 * max(1, max_j |a_j|)`; entries far below the gradient's overall
/// scale are judged on an absolute basis since central differences cannot
/// resolve them below the loss's roundoff level.
pub fn finite_diff_check<F>(at: &Tensor, step: f64, tol: f64, build: F) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    let eval = |x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.leaf(x.clone())?;
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let p = g.leaf(at.clone())?;
    let loss = build(&mut g, p)?;
    let analytic = g.backward(loss)?.get(p);

    let mut numeric = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (up - down) / (2.0 * step);
    }

    let scale = analytic.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale;
    let mut max_rel_err = 0.0f64;
    let mut max_abs_err = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / a.abs().max(n.abs()).max(floor));
    }
    Ok(FiniteDiffReport {
        max_rel_err,
        max_abs_err,
        passed: max_rel_err <= tol,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> NodeId {
        g.leaf(Tensor::vector(v.to_vec())).unwrap()
    }

    #[test]
    fn forward_add_and_identity_matmul() {
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), Tensor::vector(vec![1.0, 2.0]));
        inputs.insert("y".to_string(), Tensor::vector(vec![3.0, 4.0]));
        let out = forward(inputs, |g| {
            let x = g.input("x")?;
            let y = g.input("y")?;
            Ok(vec![("sum".into(), g.add(x, y)?)])
        })
        .unwrap();
        assert_eq!(out["sum"].data(), &[4.0, 6.0]);

        let mut g = Graph::new();
        let eye = g.leaf(Tensor::eye(2)).unwrap();
        let v = g.leaf(Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap()).unwrap();
        let r = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(r).data(), &[5.0, 7.0]);
    }

    #[test]
    fn unbound_input_and_shape_errors() {
        let mut g = Graph::new();
        assert!(matches!(g.input("missing"), Err(Error::UnboundInput(_))));
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn nan_is_an_error() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[-1.0]);
        assert!(matches!(g.sqrt(a), Err(Error::NonFinite("sqrt"))));
        let z = vec_leaf(&mut g, &[0.0]);
        assert!(matches!(g.ln(z), Err(Error::NonFinite("ln"))));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[2.0]);
        let y = vec_leaf(&mut g, &[3.0]);
        let sx = g.stop_gradient(x).unwrap();
        let p = g.mul(sx, y).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0]);
        assert_eq!(grads.get(y).data(), &[2.0]);
    }

    #[test]
    fn stop_gradient_only_live_branch_differentiates() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.5]);
        let nx = g.neg(x).unwrap();
        let s = g.stop_gradient(nx).unwrap();
        let y = g.add(x, s).unwrap();
        let loss = g.sum(y).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        assert_eq!(g.backward(loss).unwrap().get(x).data(), &[1.0]);

        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.3, -2.0]);
        let sq = g.square(x).unwrap();
        let s = g.stop_gradient(sq).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get_ref(x).is_none());
        assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn rebase_forward_is_exact_and_backward_is_identity() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.1, 0.7]);
        let target = Tensor::vector(vec![0.3, -4.0]);
        let r = g.rebase(x, target.clone()).unwrap();
        assert_eq!(g.value(r), &target);
        let sq = g.square(r).unwrap();
        let loss = g.sum(sq).unwrap();
        // d/dx sum(r^2) = 2 r, evaluated at the rebased value
        assert_eq!(g.backward(loss).unwrap().get(x).data(), &[0.6, -8.0]);
    }

    #[test]
    fn broadcast_and_mean_axis_backward() {
        let mut g = Graph::new();
        let row = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = g.broadcast(row, &[3, 2]).unwrap();
        let loss = g.sum(b).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(row).data(), &[3.0, 3.0]);

        let mut g = Graph::new();
        let m = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let mean = g.mean_axis(m, 1).unwrap();
        assert_eq!(g.value(mean).data(), &[1.5, 3.5]);
        let loss = g.sum(mean).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(m).data(), &[0.5; 4]);
    }

    #[test]
    fn concat_routes_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = g.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let w = g.leaf(Tensor::matrix(1, 3, vec![10.0, 20.0, 30.0]).unwrap()).unwrap();
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).data(), &[10.0, 20.0]);
        assert_eq!(grads.get(b).data(), &[30.0]);
    }

    #[test]
    fn finite_diff_constant_loss() {
        let at = Tensor::vector(vec![0.5, -0.5]);
        let report = finite_diff_check(&at, 1e-5, 1e-9, |g, p| {
            let s = g.stop_gradient(p)?;
            let z = g.scale(s, 0.0)?;
            let c = g.add_scalar(z, 3.0)?;
            g.sum(c)
        })
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.analytic.data(), &[0.0, 0.0]);
        assert_eq!(report.numeric.data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let at = Tensor::vector(vec![0.5]);
        assert!(finite_diff_check(&at, 0.0, 1e-6, |g, p| g.sum(p)).is_err());
    }
}
