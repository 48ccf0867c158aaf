//! A small reverse-mode tape over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read from a shared [`Params`] store and their gradients come back from
//! [`Graph::backward`] as a [`Grads`] aligned with that store, so several
//! graphs can run concurrently against the same parameters.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{fuse_with_guard, mix_copy_distribution};
use super::loss::{BCE_CLIP, NLL_FLOOR};
use super::tensor::{matmul_at_acc, matmul_bt_acc, sigmoid, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    index: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.tensors.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    /// Adds a tensor initialised uniformly in `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut R) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        )
    }
}

/// Gradients aligned with a [`Params`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(Vec<Tensor>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|t| t.scale(k));
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    MeanRows(NodeId),
    LayerNorm(NodeId, Vec<f64>),
    Fuse {
        attn: NodeId,
        scores: NodeId,
        map: Vec<usize>,
        guarded: bool,
    },
    PointerMix {
        gate: NodeId,
        vocab: NodeId,
        attn: NodeId,
        src: Vec<usize>,
    },
    NegLogPick(NodeId, usize),
    Bce(NodeId, Vec<u8>),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'p> {
    params: &'p Params,
    nodes: Vec<Node<'p>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
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

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.push_cow(Cow::Owned(value), op)
    }

    fn push_cow(&mut self, value: Cow<'p, Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Node holding a whole parameter tensor; created once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let params = self.params;
        let n = self.push_cow(Cow::Borrowed(params.get(id)), Op::Param(id));
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Rows `indices` of a parameter (embedding lookup).
    pub fn gather(&mut self, id: ParamId, indices: &[usize]) -> NodeId {
        let table = self.params.get(id);
        let mut out = Tensor::zeros(indices.len(), table.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        self.push(out, Op::Gather(id, indices.to_vec()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape");
        Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn row_broadcast(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, r) = (self.value(a), self.value(b));
        assert_eq!(r.rows(), 1, "broadcast operand must be a row");
        assert_eq!(x.cols(), r.cols(), "broadcast width");
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &q) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = f(*o, q);
            }
        }
        out
    }

    /// `a + b` with the row vector `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.row_broadcast(a, b, |x, y| x + y);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.row_broadcast(a, b, |x, y| x * y);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&softmax(x.row(r)));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols rows");
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows cols");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let x = self.value(a);
        let mut out = Tensor::zeros(indices.len(), x.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(out, Op::SelectRows(a, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols());
        let k = 1.0 / x.rows() as f64;
        for r in 0..x.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += k * v;
            }
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Per-row standardisation without gain or bias.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = x.clone();
        let mut stds = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) / std;
            }
            stds.push(std);
        }
        self.push(out, Op::LayerNorm(a, stds))
    }

    /// Sentence-score reweighting of a `1×|w|` attention row.
    pub fn fuse(&mut self, attn: NodeId, scores: NodeId, map: &[usize]) -> NodeId {
        let (v, guarded) = fuse_with_guard(self.value(attn).data(), self.value(scores).data(), map);
        self.push(
            Tensor::row_vector(v),
            Op::Fuse {
                attn,
                scores,
                map: map.to_vec(),
                guarded,
            },
        )
    }

    /// Copy-augmented distribution over `extended_size` ids.
    pub fn pointer_mix(&mut self, gate: NodeId, vocab: NodeId, attn: NodeId, src: &[usize], extended_size: usize) -> NodeId {
        let v = mix_copy_distribution(
            self.scalar(gate),
            self.value(vocab).data(),
            self.value(attn).data(),
            src,
            extended_size,
        );
        self.push(
            Tensor::row_vector(v),
            Op::PointerMix {
                gate,
                vocab,
                attn,
                src: src.to_vec(),
            },
        )
    }

    /// `-ln max(p[index], NLL_FLOOR)` of a probability row.
    pub fn neg_log_pick(&mut self, probs: NodeId, index: usize) -> NodeId {
        let p = self.value(probs).data()[index];
        self.push(
            Tensor::row_vector(vec![-p.max(NLL_FLOOR).ln()]),
            Op::NegLogPick(probs, index),
        )
    }

    /// Mean binary cross-entropy of a `1×N` score row against labels.
    pub fn bce(&mut self, scores: NodeId, labels: &[u8]) -> NodeId {
        let v = super::loss::loss_ext(self.value(scores).data(), labels).expect("bce shape");
        self.push(Tensor::row_vector(vec![v]), Op::Bce(scores, labels.to_vec()))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Grads {
        let mut grads = self.params.zero_grads();
        let mut node_grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        node_grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => grads.0[p.0].add_assign(&g),
                Op::Gather(p, idx) => {
                    let t = &mut grads.0[p.0];
                    for (r, &row) in idx.iter().enumerate() {
                        for (o, v) in t.row_mut(row).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    matmul_bt_acc(&g, bv, self.grad_slot(&mut node_grads, *a));
                    matmul_at_acc(av, &g, self.grad_slot(&mut node_grads, *b));
                }
                Op::Add(a, b) => {
                    self.grad_slot(&mut node_grads, *a).add_assign(&g);
                    self.grad_slot(&mut node_grads, *b).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    self.grad_slot(&mut node_grads, *a).add_assign(&g);
                    let gb = self.grad_slot(&mut node_grads, *b);
                    for (o, v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * y;
                    }
                    let gb = self.grad_slot(&mut node_grads, *b);
                    for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * x;
                    }
                }
                Op::AddRow(a, b) => {
                    self.grad_slot(&mut node_grads, *a).add_assign(&g);
                    let gb = self.grad_slot(&mut node_grads, *b);
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::MulRow(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for r in 0..g.rows() {
                        for ((o, gv), y) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(bv.data()) {
                            *o += gv * y;
                        }
                    }
                    let gb = self.grad_slot(&mut node_grads, *b);
                    for r in 0..g.rows() {
                        for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += gv * x;
                        }
                    }
                }
                Op::Scale(a, k) => {
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += k * v;
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
                Op::Transpose(a) => {
                    self.grad_slot(&mut node_grads, *a).add_assign(&g.transpose());
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = self.grad_slot(&mut node_grads, p);
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let gp = self.grad_slot(&mut node_grads, p);
                        for r in 0..h {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(g.row(off + r)) {
                                *o += v;
                            }
                        }
                        off += h;
                    }
                }
                Op::SelectRows(a, idx) => {
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let w = g.cols();
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for r in 0..g.rows() {
                        for (o, v) in ga.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let ga = self.grad_slot(&mut node_grads, *a);
                    let k = 1.0 / ga.rows() as f64;
                    for r in 0..ga.rows() {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o += k * v;
                        }
                    }
                }
                Op::LayerNorm(a, stds) => {
                    let y = &node.value;
                    let ga = self.grad_slot(&mut node_grads, *a);
                    for r in 0..y.rows() {
                        let n = y.cols() as f64;
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += (gv - mean_g - yv * mean_gy) / stds[r];
                        }
                    }
                }
                Op::Fuse {
                    attn,
                    scores,
                    map,
                    guarded,
                } => {
                    if *guarded {
                        self.grad_slot(&mut node_grads, *attn).add_assign(&g);
                        continue;
                    }
                    let a = self.value(*attn).data().to_vec();
                    let b = self.value(*scores).data().to_vec();
                    let fused = node.value.data();
                    let z: f64 = a.iter().zip(map).map(|(x, &i)| x * b[i]).sum();
                    let dot: f64 = g.data().iter().zip(fused).map(|(p, q)| p * q).sum();
                    // d fused / d weighted
                    let dw: Vec<f64> = g.data().iter().map(|gv| (gv - dot) / z).collect();
                    let ga = self.grad_slot(&mut node_grads, *attn);
                    for (m, o) in ga.data_mut().iter_mut().enumerate() {
                        *o += dw[m] * b[map[m]];
                    }
                    let gb = self.grad_slot(&mut node_grads, *scores);
                    for (m, &i) in map.iter().enumerate() {
                        gb.data_mut()[i] += dw[m] * a[m];
                    }
                }
                Op::PointerMix {
                    gate,
                    vocab,
                    attn,
                    src,
                } => {
                    let p = self.scalar(*gate);
                    let pv = self.value(*vocab).data().to_vec();
                    let at = self.value(*attn).data().to_vec();
                    let gd = g.data();
                    let mut dgate = 0.0;
                    let gv = self.grad_slot(&mut node_grads, *vocab);
                    for (j, o) in gv.data_mut().iter_mut().enumerate() {
                        *o += gd[j] * p;
                        dgate += gd[j] * pv[j];
                    }
                    let ga = self.grad_slot(&mut node_grads, *attn);
                    for (m, &id) in src.iter().enumerate() {
                        ga.data_mut()[m] += gd[id] * (1.0 - p);
                        dgate -= gd[id] * at[m];
                    }
                    self.grad_slot(&mut node_grads, *gate).data_mut()[0] += dgate;
                }
                Op::NegLogPick(probs, idx) => {
                    let p = self.value(*probs).data()[*idx];
                    if p > NLL_FLOOR {
                        self.grad_slot(&mut node_grads, *probs).data_mut()[*idx] -= g.data()[0] / p;
                    }
                }
                Op::Bce(scores, labels) => {
                    let b = self.value(*scores).data().to_vec();
                    let n = b.len() as f64;
                    let gs = self.grad_slot(&mut node_grads, *scores);
                    for (i, (&bv, &lab)) in b.iter().zip(labels).enumerate() {
                        if bv <= BCE_CLIP || bv >= 1.0 - BCE_CLIP {
                            continue;
                        }
                        let d = if lab == 1 { -1.0 / bv } else { 1.0 / (1.0 - bv) };
                        gs.data_mut()[i] += g.data()[0] * d / n;
                    }
                }
            }
        }
        grads
    }

    fn grad_slot<'g>(&self, slots: &'g mut [Option<Tensor>], id: NodeId) -> &'g mut Tensor {
        let v = &self.nodes[id.0].value;
        slots[id.0].get_or_insert_with(|| Tensor::zeros(v.rows(), v.cols()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` over every scalar of every parameter.
    fn check<F>(params: &mut Params, f: F)
    where
        F: Fn(&mut Graph) -> NodeId,
    {
        let analytic = {
            let mut g = Graph::new(params);
            let loss = f(&mut g);
            g.backward(loss)
        };
        let eps = 1e-6;
        for id in params.ids().collect::<Vec<_>>() {
            for k in 0..params.get(id).data().len() {
                let orig = params.get(id).data()[k];
                params.get_mut(id).data_mut()[k] = orig + eps;
                let plus = {
                    let mut g = Graph::new(params);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                params.get_mut(id).data_mut()[k] = orig - eps;
                let minus = {
                    let mut g = Graph::new(params);
                    let l = f(&mut g);
                    g.scalar(l)
                };
                params.get_mut(id).data_mut()[k] = orig;
                let num = (plus - minus) / (2.0 * eps);
                let ana = analytic.get(id).data()[k];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{k}]: numeric {num} analytic {ana}", params.name(id));
            }
        }
    }

    fn store(shapes: &[(&str, usize, usize)]) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = Params::new();
        for &(n, r, c) in shapes {
            p.add_uniform(n, r, c, 0.8, &mut rng);
        }
        p
    }

    #[test]
    fn dense_ops_gradients() {
        let mut p = store(&[("a", 3, 4), ("b", 4, 2), ("r", 1, 2), ("e", 5, 2)]);
        check(&mut p, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let r = g.param(ParamId(2));
            let ab = g.matmul(a, b);
            let t = g.tanh(ab);
            let s = g.add_row(t, r);
            let m = g.mul_row(s, r);
            let e = g.gather(ParamId(3), &[4, 0, 4]);
            let sum = g.add(m, e);
            let sig = g.sigmoid(sum);
            let d = g.sub(sig, e);
            let prod = g.mul(d, sum);
            let tr = g.transpose(prod);
            let sm = g.softmax_rows(tr);
            let cat = g.concat_cols(&[sm, sm]);
            let rows = g.concat_rows(&[cat, cat]);
            let sel = g.select_rows(rows, &[0, 3, 3]);
            let sl = g.slice_cols(sel, 1, 4);
            let ln = g.layer_norm(sl);
            let mr = g.mean_rows(ln);
            let sc = g.scale(mr, 0.7);
            let w = g.param(ParamId(1));
            let col = g.slice_cols(w, 0, 1);
            let out = g.matmul(sc, col);
            g.tanh(out)
        });
    }

    #[test]
    fn fusion_and_copy_gradients() {
        let mut p = store(&[("att", 1, 5), ("beta", 1, 2), ("voc", 1, 4), ("gate", 1, 1)]);
        check(&mut p, |g| {
            let a = g.param(ParamId(0));
            let a = g.softmax_rows(a);
            let b = g.param(ParamId(1));
            let b = g.sigmoid(b);
            let f = g.fuse(a, b, &[0, 0, 1, 1, 1]);
            let v = g.param(ParamId(2));
            let v = g.softmax_rows(v);
            let gt = g.param(ParamId(3));
            let gt = g.sigmoid(gt);
            let mix = g.pointer_mix(gt, v, f, &[1, 5, 1, 0, 4], 6);
            let l1 = g.neg_log_pick(mix, 1);
            let l2 = g.neg_log_pick(mix, 5);
            let bce = g.bce(b, &[1, 0]);
            let s = g.add(l1, l2);
            g.add(s, bce)
        });
    }
}
