//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse creation order is a valid topological order
//! for the backward sweep and every node is visited exactly once.

use std::collections::HashMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities inside the binary cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    Sigmoid { x: NodeId },
    Silu { x: NodeId },
    Log { x: NodeId },
    Softmax { x: NodeId },
    Reduce { x: NodeId, axis: usize, scale: f64 },
    SumAll { x: NodeId },
    Concat { xs: Vec<NodeId>, axis: usize },
    Expand { x: NodeId, axis: usize },
    Reshape { x: NodeId },
    Lookup { table: NodeId, ids: Vec<usize> },
    Bce { pred: NodeId, target: Vec<f64>, weight: Vec<f64> },
    StraightThrough { soft: NodeId },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, NodeId>,
    params: Vec<(String, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: Vec::new(),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a trainable parameter; repeated binds of one name share a node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = self.input(params.get(name)?.clone());
        self.bound.insert(name.to_string(), id);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// Binds a parameter as a constant (no gradient is tracked).
    pub fn frozen(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = self.constant(params.get(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward root w.r.t. `id`, if one reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        if node.grad.is_empty() && !node.value.is_empty() {
            return None;
        }
        Tensor::new(node.value.shape().to_vec(), node.grad.clone()).ok()
    }

    /// Gradients of every trainable parameter bound with [`Graph::param`],
    /// zero-filled where the root did not depend on a parameter.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let node = &self.nodes[id.0];
                let grad = if node.grad.is_empty() {
                    Tensor::zeros(node.value.shape())
                } else {
                    Tensor::new(node.value.shape().to_vec(), node.grad.clone())
                        .expect("grad shape tracks value shape")
                };
                (name.clone(), grad)
            })
            .collect()
    }

    // ------------------------------------------------------------------
    // Forward operations
    // ------------------------------------------------------------------

    /// `x[.., K] · w[K, N]`, batching over all leading dimensions of `x`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.is_empty() || bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (k, n) = (bsh[0], bsh[1]);
        let rows = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for r in 0..rows {
                let orow = &mut out[r * n..(r + 1) * n];
                for (kk, &x) in av[r * k..(r + 1) * k].iter().enumerate() {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    for (o, &w) in orow.iter_mut().zip(brow) {
                        *o += x * w;
                    }
                }
            }
        }
        let mut shape = ash;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Fully connected layer `x·W + b`, bias broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Batched product `a[B,M,K] · b[B,K,N]`, or `a · bᵀ` with `b[B,N,K]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "bmm",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(bad());
        }
        let (batch, m, k) = (ash[0], ash[1], ash[2]);
        let n = if trans_b { bsh[1] } else { bsh[2] };
        let bk = if trans_b { bsh[2] } else { bsh[1] };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bb in 0..batch {
                let a0 = bb * m * k;
                let b0 = bb * k * n;
                let o0 = bb * m * n;
                for i in 0..m {
                    let arow = &av[a0 + i * k..a0 + (i + 1) * k];
                    let orow = &mut out[o0 + i * n..o0 + (i + 1) * n];
                    if trans_b {
                        for (j, o) in orow.iter_mut().enumerate() {
                            let brow = &bv[b0 + j * k..b0 + (j + 1) * k];
                            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    } else {
                        for (kk, &x) in arow.iter().enumerate() {
                            let brow = &bv[b0 + kk * n..b0 + (kk + 1) * n];
                            for (o, &y) in orow.iter_mut().zip(brow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a, b, trans_b },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    fn map(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub { a, b }, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    /// Adds `bias[N]` to every row of `x[.., N]`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if xs.is_empty() || bs.len() != 1 || bs[0] != *xs.last().unwrap() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let n = bs[0];
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(bias).data();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(xs, out)?, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.map(x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Sigmoid { x }, sigmoid)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Silu { x }, |v| v * sigmoid(v))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Log { x }, f64::ln)
    }

    /// Softmax over the last axis (each "row"), stabilized by max-subtraction.
    /// Entries equal to `-inf` receive zero probability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(Error::Shape {
            op: "softmax_rows",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        if cols == 0 {
            return Err(Error::Invalid("softmax over an empty axis".into()));
        }
        let xv = self.value(x).data();
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::NaN("softmax_rows"));
        }
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Invalid("softmax row with every entry masked".into()));
            }
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x }, rg))
    }

    fn reduce(&mut self, x: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "reduce",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = if mean { 1.0 / len.max(1) as f64 } else { 1.0 };
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xv[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Reduce { x, axis, scale }, rg))
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn reduce_mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, axis, true)
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, axis, false)
    }

    /// Sum of every entry as a rank-0 tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::SumAll { x }, rg)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &id in xs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in xs {
                let len = self.shape(id)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(id).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&id| self.rg(id));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Inserts a new axis of size `n` at `axis`, repeating `x` along it.
    pub fn expand(&mut self, x: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::Shape {
                op: "expand",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &xv[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(chunk);
            }
        }
        let mut oshape = shape;
        oshape.insert(axis, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Expand { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Gathers rows of `table[V, D]`; output shape is `ids_shape ++ [D]`.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize], ids_shape: &[usize]) -> Result<NodeId> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embed_lookup",
                lhs: tshape,
                rhs: ids_shape.to_vec(),
            });
        }
        let (vocab, dim) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Index {
                what: "embedding table",
                id: bad,
                size: vocab,
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted binary cross-entropy summed over all entries. Predictions are
    /// clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, pred: NodeId, target: &[f64], weight: &[f64]) -> Result<NodeId> {
        let pv = self.value(pred).data();
        if pv.len() != target.len() || pv.len() != weight.len() {
            return Err(Error::Shape {
                op: "bce",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len(), weight.len()],
            });
        }
        let mut clamped = 0usize;
        let mut total = 0.0;
        for ((&p, &y), &w) in pv.iter().zip(target).zip(weight) {
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                clamped += 1;
            }
            total += w * bce_term(p, y);
        }
        if clamped > 0 {
            log::debug!("bce: clamped {clamped} predictions to [{PROB_EPS}, 1-{PROB_EPS}]");
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            rg,
        ))
    }

    /// One-hot of `hard[r]` in the forward pass, identity gradient to `soft`.
    pub fn straight_through(&mut self, soft: NodeId, hard: &[usize]) -> Result<NodeId> {
        let shape = self.shape(soft).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        let rows = self.value(soft).len() / cols.max(1);
        if hard.len() != rows || hard.iter().any(|&h| h >= cols) {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: shape,
                rhs: vec![hard.len()],
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (r, &h) in hard.iter().enumerate() {
            out[r * cols + h] = 1.0;
        }
        let rg = self.rg(soft);
        Ok(self.push(Tensor::new(shape, out)?, Op::StraightThrough { soft }, rg))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates gradients from the scalar `root` to every node it depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(root).to_vec(),
                rhs: vec![],
            });
        }
        for node in &mut self.nodes {
            node.grad.clear();
        }
        self.nodes[root.0].grad = vec![1.0];
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].grad);
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = grad;
            for (parent, g) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let slot = &mut self.nodes[parent.0].grad;
                if slot.is_empty() {
                    *slot = g;
                } else {
                    for (s, v) in slot.iter_mut().zip(g) {
                        *s += v;
                    }
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, go: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let shp = |id: NodeId| self.nodes[id.0].value.shape();
        let need = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let (k, n) = (shp(b)[0], shp(b)[1]);
                let rows = av.len() / k.max(1);
                if need(a) {
                    let mut ga = vec![0.0; av.len()];
                    for r in 0..rows {
                        let grow = &go[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            ga[r * k + kk] = grow.iter().zip(brow).map(|(g, w)| g * w).sum();
                        }
                    }
                    res.push((a, ga));
                }
                if need(b) {
                    let mut gb = vec![0.0; bv.len()];
                    for r in 0..rows {
                        let grow = &go[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let x = av[r * k + kk];
                            for (g, &d) in gb[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *g += x * d;
                            }
                        }
                    }
                    res.push((b, gb));
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let (batch, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = node.value.shape()[2];
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bb in 0..batch {
                    let (a0, b0, o0) = (bb * m * k, bb * k * n, bb * m * n);
                    for i2 in 0..m {
                        for j in 0..n {
                            let g = go[o0 + i2 * n + j];
                            for kk in 0..k {
                                let bidx = if trans_b { b0 + j * k + kk } else { b0 + kk * n + j };
                                ga[a0 + i2 * k + kk] += g * bv[bidx];
                                gb[bidx] += g * av[a0 + i2 * k + kk];
                            }
                        }
                    }
                }
                if need(a) {
                    res.push((a, ga));
                }
                if need(b) {
                    res.push((b, gb));
                }
            }
            &Op::Add { a, b } => {
                res.push((a, go.to_vec()));
                res.push((b, go.to_vec()));
            }
            &Op::Sub { a, b } => {
                res.push((a, go.to_vec()));
                res.push((b, go.iter().map(|g| -g).collect()));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                if need(a) {
                    res.push((a, go.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if need(b) {
                    res.push((b, go.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::AddBias { x, bias } => {
                let n = shp(bias)[0];
                let mut gb = vec![0.0; n];
                for row in go.chunks(n.max(1)) {
                    for (s, g) in gb.iter_mut().zip(row) {
                        *s += g;
                    }
                }
                res.push((x, go.to_vec()));
                res.push((bias, gb));
            }
            &Op::Scale { x, c } => res.push((x, go.iter().map(|g| g * c).collect())),
            &Op::Sigmoid { x } => {
                res.push((x, go.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            &Op::Silu { x } => {
                let xv = val(x);
                let gx = go
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                res.push((x, gx));
            }
            &Op::Log { x } => {
                res.push((x, go.iter().zip(val(x)).map(|(g, v)| g / v).collect()));
            }
            &Op::Softmax { x } => {
                let cols = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; out.len()];
                for ((y, g), d) in out.chunks(cols).zip(go.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.iter_mut().zip(y).zip(g) {
                        *dv = yv * (gv - dot);
                    }
                }
                res.push((x, gx));
            }
            &Op::Reduce { x, axis, scale } => {
                let (outer, len, inner) = split_axis(shp(x), axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &go[o * inner..(o + 1) * inner];
                    for a in 0..len {
                        let dst = &mut gx[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                res.push((x, gx));
            }
            &Op::SumAll { x } => res.push((x, vec![go[0]; val(x).len()])),
            Op::Concat { xs, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &id in xs {
                    let len = shp(id)[*axis];
                    let mut gx = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&go[start..start + len * inner]);
                    }
                    offset += len;
                    if need(id) {
                        res.push((id, gx));
                    }
                }
            }
            &Op::Expand { x, axis } => {
                let n = node.value.shape()[axis];
                let xs = shp(x);
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis..].iter().product();
                let mut gx = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut gx[o * inner..(o + 1) * inner];
                    for r in 0..n {
                        let src = &go[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                res.push((x, gx));
            }
            &Op::Reshape { x } => res.push((x, go.to_vec())),
            Op::Lookup { table, ids } => {
                let dim = shp(*table)[1];
                let mut gt = vec![0.0; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &s) in gt[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&go[r * dim..(r + 1) * dim])
                    {
                        *d += s;
                    }
                }
                res.push((*table, gt));
            }
            Op::Bce {
                pred,
                target,
                weight,
            } => {
                let gp = val(*pred)
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&p, &y), &w)| {
                        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        go[0] * w * (p - y) / (p * (1.0 - p))
                    })
                    .collect();
                res.push((*pred, gp));
            }
            &Op::StraightThrough { soft } => res.push((soft, go.to_vec())),
        }
        res
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one prediction, with the prediction clamped.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_scalar() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.constant(t(&[1, 1], &[1.0]));
        let w = g.constant(t(&[1, 1], &[3.0]));
        let b = g.constant(t(&[1], &[1.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(x, w).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[1, 1], &[-123.4]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);

        let x = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-300 + 1e-15 && v[1] >= 0.0 && v[1] < 1e-300);
        assert!(v.iter().all(|p| p.is_finite()));

        let x = g.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax_rows(x), Err(Error::NaN(_))));
    }

    #[test]
    fn sigmoid_mean_lookup() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);

        let x = g.constant(t(&[1, 2], &[2.0, 4.0]));
        let y = g.reduce_mean(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let table = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.embed_lookup(table, &[0], &[1]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        assert!(matches!(
            g.embed_lookup(table, &[5], &[1]),
            Err(Error::Index { id: 5, .. })
        ));
    }

    #[test]
    fn diamond_accumulates_over_both_paths() {
        // f = sum((x*x) + x) → df/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[3.0, -1.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.add(sq, x).unwrap();
        let f = g.sum_all(s);
        g.backward(f).unwrap();
        assert_eq!(g.grad(f).unwrap().data(), &[1.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn concat_expand_reshape_roundtrip_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let e = g.expand(a, 1, 3).unwrap();
        assert_eq!(g.shape(e), &[2, 3, 1]);
        assert_eq!(g.value(e).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let e0 = g.expand(a, 0, 2).unwrap();
        assert_eq!(g.value(e0).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn straight_through_forward_is_one_hot() {
        let mut g = Graph::new();
        let s = g.input(t(&[1, 3], &[0.2, 0.5, 0.3]));
        let h = g.straight_through(s, &[1]).unwrap();
        assert_eq!(g.value(h).data(), &[0.0, 1.0, 0.0]);
        let c = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let p = g.mul(h, c).unwrap();
        let f = g.sum_all(p);
        g.backward(f).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1], &[0.5]));
        let l = g.bce(p, &[1.0], &[1.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
