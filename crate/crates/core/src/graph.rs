//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value, the operation tag, and the ids of its inputs. Inputs always precede
//! their consumers, so reverse insertion order is a reverse topological order
//! and `backward` walks it exactly once, accumulating (`+=`) into input
//! gradients so shared subexpressions sum correctly.
//!
//! The tape is rebuilt per training step; parameters enter as leaves via
//! [`crate::params::bind_all`]. Everything is f64 and single-threaded.

use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// x[..., n] + b[n], b broadcast over leading dims.
    AddBiasRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a[m, n] * w[m] with w broadcast along the last axis.
    RowScale(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// a[m, k] * b[n, k]^T -> [m, n]; avoids materialized transposes for
    /// `weight` tensors stored `[out, in]`.
    MatMulNt(NodeId, NodeId),
    /// Batched matmul over matching leading dims.
    Bmm(NodeId, NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    SoftmaxLast(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    GatherRows(NodeId, Vec<usize>),
    SliceCol(NodeId, usize),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Detach(#[allow(dead_code)] NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if any was
    /// produced. Nodes with `requires_grad = false` never accumulate one.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    // ---- elementwise / broadcast ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().ok_or_else(|| Error::shape("add_bias_row", tx.shape(), tb.shape()))?;
        if tb.shape() != [n] {
            return Err(Error::shape("add_bias_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x, b]);
        Ok(self.push(Op::AddBiasRow(x, b), value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Scale(x, c), value, rg))
    }

    /// `a[m, n] * w[m]`: scales row i of `a` by `w[i]`.
    pub fn row_scale(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (ta, tw) = (self.value(a), self.value(w));
        if ta.ndim() != 2 || tw.shape() != [ta.shape()[0]] {
            return Err(Error::shape("row_scale", ta.shape(), tw.shape()));
        }
        let n = ta.shape()[1];
        let mut data = ta.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= tw.data()[i / n];
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, w]);
        Ok(self.push(Op::RowScale(a, w), value, rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[1];
        let data = mm(ta.data(), m, k, tb.data(), n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// `a[m, k] * b[n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[0];
        let data = mm_nt(ta.data(), m, k, tb.data(), n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMulNt(a, b), value, rg))
    }

    /// Batched matmul: `a[..., m, k] * b[..., k, n]` with identical leading dims.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let d = sa.len();
        if d < 2 || sb.len() != d || sa[..d - 2] != sb[..d - 2] || sa[d - 1] != sb[d - 2] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let batch: usize = sa[..d - 2].iter().product();
        let (m, k, n) = (sa[d - 2], sa[d - 1], sb[d - 1]);
        let mut data = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            data.extend(mm(
                &ta.data()[i * m * k..(i + 1) * m * k],
                m,
                k,
                &tb.data()[i * k * n..(i + 1) * k * n],
                n,
            ));
        }
        let mut shape = sa[..d - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Bmm(a, b), value, rg))
    }

    // ---- shape manipulation ----

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        let nd = tx.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::config(format!(
                "permute axes {axes:?} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let value = permute_tensor(tx, axes)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Permute(x, axes.to_vec()), value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    // ---- nonlinearities ----

    /// Numerically stabilized softmax along the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let n = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", tx.shape(), &[]))?;
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SoftmaxLast(x), value, rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Gelu(x), value, rg))
    }

    /// Layer normalization over the last axis followed by the affine
    /// `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = *tx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", tx.shape(), tg.shape()))?;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            let (xhat, _inv) = layer_norm_row(row, eps);
            for (v, h) in row.iter_mut().zip(xhat) {
                *v = h;
            }
            for (j, v) in row.iter_mut().enumerate() {
                *v = tg.data()[j] * *v + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, value, rg))
    }

    // ---- gather / select ----

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return Err(Error::shape("gather_rows", tx.shape(), &[rows.len()]));
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        if rows.is_empty() {
            return Err(Error::config("gather_rows needs at least one row"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                bound: m,
            });
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&tx.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::GatherRows(x, rows.to_vec()), value, rg))
    }

    /// Row lookup into an embedding table with a vocabulary bound check.
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vocab = self.value(table).shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: vocab,
            });
        }
        self.gather_rows(table, indices)
    }

    pub fn slice_col(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.ndim() != 2 || col >= tx.shape()[1] {
            return Err(Error::Index {
                what: "column",
                index: col,
                bound: if tx.ndim() == 2 { tx.shape()[1] } else { 0 },
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let data = (0..m).map(|i| tx.data()[i * n + col]).collect();
        let value = Tensor::new(vec![m], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SliceCol(x, col), value, rg))
    }

    // ---- reductions / losses ----

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Sum(x), Tensor::scalar(total), rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let total: f64 = t.data().iter().sum();
        let value = Tensor::scalar(total / t.len() as f64);
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Mean(x), value, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// `softmax(logits)`, computed via a stabilized log-sum-exp.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let tl = self.value(logits);
        if tl.ndim() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let k = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&z| z >= k) {
            return Err(Error::Index {
                what: "class",
                index: bad,
                bound: k,
            });
        }
        let mut total = 0.0;
        for (i, row) in tl.data().chunks(k).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Forward identity that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::Detach(x), value, false)
    }

    // ---- backward ----

    /// Reverse pass from a scalar root. Errors if the root is not scalar or
    /// if backward already ran on this graph.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::GraphReuse);
        }
        self.backward_done = true;
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NotScalar {
                shape: root_node.value.shape().to_vec(),
            });
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let seed = Tensor::filled(root_node.value.shape(), 1.0);
        self.nodes[root.0].grad = Some(seed);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    /// Clears gradients and re-arms `backward`.
    pub fn reset_backward(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), delta.shape());
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        // Ops are matched on a cheap clone of the tag's ids; tensor payloads
        // stay in place.
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::Detach(_) => Ok(()),
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
                Ok(())
            }
            Op::AddBiasRow(x, b) => {
                let (x, b) = (*x, *b);
                let n = self.nodes[b.0].value.len();
                let mut db = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % n] += v;
                }
                self.accumulate(x, g.clone());
                self.accumulate(b, Tensor::new(vec![n], db)?);
                Ok(())
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                let shape = g.shape().to_vec();
                self.accumulate(a, Tensor::new(shape.clone(), da)?);
                self.accumulate(b, Tensor::new(shape, db)?);
                Ok(())
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                let data = g.data().iter().map(|v| v * c).collect();
                let t = Tensor::new(g.shape().to_vec(), data)?;
                self.accumulate(x, t);
                Ok(())
            }
            Op::RowScale(a, w) => {
                let (a, w) = (*a, *w);
                let n = self.nodes[a.0].value.shape()[1];
                let wv = self.nodes[w.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * wv[i / n])
                    .collect();
                let mut dw = vec![0.0; wv.len()];
                for (i, gv) in g.data().iter().enumerate() {
                    dw[i / n] += gv * av[i];
                }
                self.accumulate(a, Tensor::new(self.nodes[a.0].value.shape().to_vec(), da)?);
                self.accumulate(w, Tensor::new(vec![wv.len()], dw)?);
                Ok(())
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                // dA = dO * B^T, dB = A^T * dO
                let da = mm_nt(g.data(), m, n, self.nodes[b.0].value.data(), k);
                let db = mm_tn(self.nodes[a.0].value.data(), m, k, g.data(), n);
                self.accumulate(a, Tensor::new(vec![m, k], da)?);
                self.accumulate(b, Tensor::new(vec![k, n], db)?);
                Ok(())
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[0];
                // O = A * B^T: dA = dO * B, dB = dO^T * A
                let da = mm(g.data(), m, n, self.nodes[b.0].value.data(), k);
                let db = mm_tn(g.data(), m, n, self.nodes[a.0].value.data(), k);
                self.accumulate(a, Tensor::new(vec![m, k], da)?);
                self.accumulate(b, Tensor::new(vec![n, k], db)?);
                Ok(())
            }
            Op::Bmm(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let d = sa.len();
                let batch: usize = sa[..d - 2].iter().product();
                let (m, k, n) = (sa[d - 2], sa[d - 1], sb[d - 1]);
                let mut da = Vec::with_capacity(batch * m * k);
                let mut db = Vec::with_capacity(batch * k * n);
                for i in 0..batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &self.nodes[a.0].value.data()[i * m * k..(i + 1) * m * k];
                    let bi = &self.nodes[b.0].value.data()[i * k * n..(i + 1) * k * n];
                    da.extend(mm_nt(gi, m, n, bi, k));
                    db.extend(mm_tn(ai, m, k, gi, n));
                }
                self.accumulate(a, Tensor::new(sa, da)?);
                self.accumulate(b, Tensor::new(sb, db)?);
                Ok(())
            }
            Op::Permute(x, axes) => {
                let (x, axes) = (*x, axes.clone());
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = permute_tensor(g, &inverse)?;
                self.accumulate(x, dx);
                Ok(())
            }
            Op::Reshape(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape().to_vec();
                let dx = g.reshape(&shape)?;
                self.accumulate(x, dx);
                Ok(())
            }
            Op::SoftmaxLast(x) => {
                let x = *x;
                let y = &self.nodes[idx].value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let t = Tensor::new(y.shape().to_vec(), dx)?;
                self.accumulate(x, t);
                Ok(())
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, gv)| gv * gelu_grad(v))
                    .collect();
                let t = Tensor::new(g.shape().to_vec(), dx)?;
                self.accumulate(x, t);
                Ok(())
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let n = *self.nodes[x.0].value.shape().last().unwrap();
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                let rows = xv.len() / n;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let xr = &xv[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let (xhat, inv) = layer_norm_row(xr, eps);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        dx[r * n + j] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.accumulate(x, Tensor::new(shape, dx)?);
                self.accumulate(gamma, Tensor::new(vec![n], dgamma)?);
                self.accumulate(beta, Tensor::new(vec![n], dbeta)?);
                Ok(())
            }
            Op::GatherRows(x, rows) => {
                let (x, rows) = (*x, rows.clone());
                let shape = self.nodes[x.0].value.shape().to_vec();
                let n = shape[1];
                let mut dx = vec![0.0; shape[0] * n];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += g.data()[i * n + j];
                    }
                }
                self.accumulate(x, Tensor::new(shape, dx)?);
                Ok(())
            }
            Op::SliceCol(x, col) => {
                let (x, col) = (*x, *col);
                let shape = self.nodes[x.0].value.shape().to_vec();
                let n = shape[1];
                let mut dx = vec![0.0; shape[0] * n];
                for (i, gv) in g.data().iter().enumerate() {
                    dx[i * n + col] = *gv;
                }
                self.accumulate(x, Tensor::new(shape, dx)?);
                Ok(())
            }
            Op::CrossEntropy { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let tl = &self.nodes[logits.0].value;
                let k = tl.shape()[1];
                let m = targets.len();
                let scale = g.data()[0] / m as f64;
                let mut dx = vec![0.0; tl.len()];
                for (i, row) in tl.data().chunks(k).enumerate() {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - mx).exp() / sum;
                        let ind = if j == targets[i] { 1.0 } else { 0.0 };
                        dx[i * k + j] = scale * (p - ind);
                    }
                }
                let shape = tl.shape().to_vec();
                self.accumulate(logits, Tensor::new(shape, dx)?);
                Ok(())
            }
            Op::Sum(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape().to_vec();
                let t = Tensor::filled(&shape, g.data()[0]);
                self.accumulate(x, t);
                Ok(())
            }
            Op::Mean(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.shape().to_vec();
                let len: usize = self.nodes[x.0].value.len();
                let t = Tensor::filled(&shape, g.data()[0] / len as f64);
                self.accumulate(x, t);
                Ok(())
            }
        }
    }
}

// ---- kernels ----

/// `a[m, k] * b[k, n]`.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a[m, k] * b[n, k]^T`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[m, k]^T * b[m, n] -> [k, n]`.
fn mm_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = arow[kk];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = vec![0.0; t.len()];
    let mut idx = vec![0usize; out_shape.len()];
    for (o, slot) in data.iter_mut().enumerate() {
        let mut src = 0;
        for (d, &i) in idx.iter().enumerate() {
            src += i * mapped[d];
        }
        *slot = t.data()[src];
        // advance multi-index
        if o + 1 < t.len() {
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    Tensor::new(out_shape, data)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Per-row normalization; returns (x_hat, 1/sqrt(var + eps)).
fn layer_norm_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv).collect(), inv)
}
