//! A small reverse-mode tape over dense matrices. Ops are coarse (a whole
//! multi-head attention is one node) so the tape stays short and each
//! backward rule is written out by hand.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use super::rope::RopeTable;
use crate::tensor::{gemm, Matrix};

pub(crate) type NodeId = usize;

/// Which parameter store a leaf belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) enum ParamSlot {
    Base(usize),
    Lora(usize),
}

/// Which parameter leaves receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Lora,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; absolute error stays near machine epsilon,
/// which is all the GELU terms need.
#[inline]
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}
pub(crate) const LN_EPS: f64 = 1e-6;

enum Op {
    Input,
    Param(ParamSlot),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Modulate {
        x: NodeId,
        shift: NodeId,
        scale: NodeId,
    },
    GatedAdd {
        base: NodeId,
        update: NodeId,
        gate: NodeId,
    },
    LayerNorm {
        x: NodeId,
        rstd: Vec<f64>,
    },
    /// Keeps the forward `tanh` term for the backward pass.
    Gelu {
        x: NodeId,
        th: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatRows(NodeId, NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention(Box<Attention>),
}

struct Attention {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    rope: Arc<RopeTable>,
    q_rot: Vec<Matrix>,
    k_rot: Vec<Matrix>,
    probs: Vec<Matrix>,
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

pub(crate) struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    trainable: Trainable,
    params: HashMap<ParamSlot, NodeId>,
}

/// Gradients for every trainable leaf touched by the graph.
pub(crate) type LeafGrads = Vec<(ParamSlot, Matrix)>;

impl<'a> Graph<'a> {
    pub fn new(trainable: Trainable) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            trainable,
            params: HashMap::new(),
        }
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Cow::Owned(value), Op::Input, false)
    }

    pub fn input_ref(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Input, false)
    }

    pub fn param(&mut self, slot: ParamSlot, value: &'a Matrix) -> NodeId {
        if let Some(&id) = self.params.get(&slot) {
            return id;
        }
        let needs_grad = matches!(
            (self.trainable, slot),
            (Trainable::Base, ParamSlot::Base(_)) | (Trainable::Lora, ParamSlot::Lora(_))
        );
        let id = self.push(Cow::Borrowed(value), Op::Param(slot), needs_grad);
        self.params.insert(slot, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(Cow::Owned(v), Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(Cow::Owned(v), Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, v.cols()), "bias must be a row vector");
        for r in 0..v.rows() {
            for (a, bb) in v.row_mut(r).iter_mut().zip(b.data()) {
                *a += bb;
            }
        }
        let ng = self.ng(&[x, bias]);
        self.push(Cow::Owned(v), Op::AddRow(x, bias), ng)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|a| a * s);
        let ng = self.ng(&[x]);
        self.push(Cow::Owned(v), Op::Scale(x, s), ng)
    }

    /// `x ⊙ (1 + scale) + shift` with row-vector `shift`, `scale`.
    pub fn modulate(&mut self, x: NodeId, shift: NodeId, scale: NodeId) -> NodeId {
        let xv = self.value(x);
        let (sh, sc) = (self.value(shift).data(), self.value(scale).data());
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for ((a, s), h) in v.row_mut(r).iter_mut().zip(sc).zip(sh) {
                *a = *a * (1.0 + s) + h;
            }
        }
        let ng = self.ng(&[x, shift, scale]);
        self.push(Cow::Owned(v), Op::Modulate { x, shift, scale }, ng)
    }

    /// `base + update ⊙ (1 + gate)` with row-vector `gate`.
    pub fn gated_add(&mut self, base: NodeId, update: NodeId, gate: NodeId) -> NodeId {
        let mut v = self.value(base).clone();
        let u = self.value(update);
        let g = self.value(gate).data();
        for r in 0..v.rows() {
            let ur = u.row(r);
            for ((a, uu), gg) in v.row_mut(r).iter_mut().zip(ur).zip(g) {
                *a += uu * (1.0 + gg);
            }
        }
        let ng = self.ng(&[base, update, gate]);
        self.push(Cow::Owned(v), Op::GatedAdd { base, update, gate }, ng)
    }

    /// Row-wise layer norm without affine parameters.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.cols() as f64;
        let mut v = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mean) * rs);
            rstd.push(rs);
        }
        let ng = self.ng(&[x]);
        self.push(Cow::Owned(v), Op::LayerNorm { x, rstd }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let th: Vec<f64> = xv
            .data()
            .iter()
            .map(|&a| tanh(GELU_C * (a + GELU_A * a * a * a)))
            .collect();
        let data = xv
            .data()
            .iter()
            .zip(&th)
            .map(|(&a, &t)| 0.5 * a * (1.0 + t))
            .collect();
        let v = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        let ng = self.ng(&[x]);
        let th = if ng { th } else { Vec::new() };
        self.push(Cow::Owned(v), Op::Gelu { x, th }, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let v = Matrix::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let ng = self.ng(&[x]);
        self.push(Cow::Owned(v), Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let v = Matrix::from_vec(len, cols, data).expect("row slice");
        let ng = self.ng(&[x]);
        self.push(Cow::Owned(v), Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat_rows width");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let v = Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data).expect("concat");
        let ng = self.ng(&[a, b]);
        self.push(Cow::Owned(v), Op::ConcatRows(a, b), ng)
    }

    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tv = self.value(table);
        let v = Matrix::from_fn(ids.len(), tv.cols(), |r, c| tv.get(ids[r], c));
        let ng = self.ng(&[table]);
        self.push(Cow::Owned(v), Op::Gather { table, ids }, ng)
    }

    /// Full (non-causal) multi-head attention with rotary Q/K.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        rope: Arc<RopeTable>,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let dh = d / heads;
        assert_eq!(dh, rope.head_dim(), "rope table head dim");
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut q_rot = Vec::with_capacity(heads);
        let mut k_rot = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qr = rotate_head(qv, h, dh, &rope, false);
            let kr = rotate_head(kv, h, dh, &rope, false);
            let mut p = qr.matmul_t(&kr);
            for r in 0..n {
                softmax_in_place(p.row_mut(r), scale);
            }
            gemm(
                1.0,
                p.view(),
                vv.col_view(h * dh, dh),
                0.0,
                &mut out.data_mut()[h * dh..],
                d,
            );
            q_rot.push(qr);
            k_rot.push(kr);
            probs.push(p);
        }
        let ng = self.ng(&[q, k, v]);
        let op = Op::Attention(Box::new(Attention {
            q,
            k,
            v,
            heads,
            rope,
            q_rot,
            k_rot,
            probs,
        }));
        self.push(Cow::Owned(out), op, ng)
    }

    /// Attention probabilities cached by an attention node, one `N × N`
    /// matrix per head.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[Matrix]> {
        match &self.nodes[id].op {
            Op::Attention(a) => Some(&a.probs),
            _ => None,
        }
    }

    /// Back-propagates `seed = ∂L/∂output` and returns gradients of the
    /// trainable leaves, ordered by slot.
    pub fn backward(&self, output: NodeId, seed: Matrix) -> LeafGrads {
        assert_eq!(seed.shape(), self.value(output).shape(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed);
        let mut leaves = Vec::new();
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => leaves.push((*slot, g)),
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let ga = g.matmul_t(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let gb = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.nodes[*bias].needs_grad {
                        accumulate(&mut grads, *bias, col_sums(&g));
                    }
                    if self.nodes[*x].needs_grad {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale_assign(*s);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Modulate { x, shift, scale } => {
                    let sc = self.value(*scale).data();
                    if self.nodes[*scale].needs_grad {
                        let xv = self.value(*x);
                        let mut gs = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for ((acc, gg), xx) in
                                gs.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r))
                            {
                                *acc += gg * xx;
                            }
                        }
                        accumulate(&mut grads, *scale, gs);
                    }
                    if self.nodes[*shift].needs_grad {
                        accumulate(&mut grads, *shift, col_sums(&g));
                    }
                    if self.nodes[*x].needs_grad {
                        let mut gx = g;
                        for r in 0..gx.rows() {
                            for (a, s) in gx.row_mut(r).iter_mut().zip(sc) {
                                *a *= 1.0 + s;
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::GatedAdd { base, update, gate } => {
                    let gt = self.value(*gate).data();
                    if self.nodes[*gate].needs_grad {
                        let uv = self.value(*update);
                        let mut gg = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for ((acc, a), u) in
                                gg.data_mut().iter_mut().zip(g.row(r)).zip(uv.row(r))
                            {
                                *acc += a * u;
                            }
                        }
                        accumulate(&mut grads, *gate, gg);
                    }
                    if self.nodes[*update].needs_grad {
                        let mut gu = g.clone();
                        for r in 0..gu.rows() {
                            for (a, s) in gu.row_mut(r).iter_mut().zip(gt) {
                                *a *= 1.0 + s;
                            }
                        }
                        accumulate(&mut grads, *update, gu);
                    }
                    if self.nodes[*base].needs_grad {
                        accumulate(&mut grads, *base, g);
                    }
                }
                Op::LayerNorm { x, rstd } => {
                    let y = self.value(id);
                    let n = y.cols() as f64;
                    let mut gx = g;
                    for (r, rs) in rstd.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = gx.row_mut(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (a, yy) in gr.iter_mut().zip(yr) {
                            *a = rs * (*a - mean_g - yy * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu { x, th } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for ((a, &xx), &th) in gx.data_mut().iter_mut().zip(xv.data()).zip(th) {
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * xx * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * xx * xx);
                        *a *= d;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    gx.data_mut()[start * cols..(start + g.rows()) * cols]
                        .copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatRows(a, b) => {
                    let (ra, cols) = self.value(*a).shape();
                    let rb = self.value(*b).rows();
                    if self.nodes[*a].needs_grad {
                        let ga = Matrix::from_vec(ra, cols, g.data()[..ra * cols].to_vec())
                            .expect("split");
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let gb = Matrix::from_vec(rb, cols, g.data()[ra * cols..].to_vec())
                            .expect("split");
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Gather { table, ids } => {
                    let (rows, cols) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(rows, cols);
                    for (r, &row_id) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(row_id).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Attention(att) => self.attention_backward(att, &g, &mut grads),
            }
        }
        leaves.sort_by_key(|(slot, _)| match slot {
            ParamSlot::Base(i) => (0, *i),
            ParamSlot::Lora(i) => (1, *i),
        });
        leaves
    }

    fn attention_backward(&self, att: &Attention, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let vv = self.value(att.v);
        let (n, d) = vv.shape();
        let dh = d / att.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Matrix::zeros(n, d);
        let mut gk = Matrix::zeros(n, d);
        let mut gv = Matrix::zeros(n, d);
        for h in 0..att.heads {
            let p = &att.probs[h];
            let g_h = g.col_view(h * dh, dh);
            // dP = dO · Vᵀ
            let mut dp = Matrix::zeros(n, n);
            gemm(1.0, g_h, vv.col_view(h * dh, dh).t(), 0.0, dp.data_mut(), n);
            // dV = Pᵀ · dO
            gemm(1.0, p.view().t(), g_h, 0.0, &mut gv.data_mut()[h * dh..], d);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/sqrt(dh) scale
            for r in 0..n {
                let pr = p.row(r);
                let dr = dp.row_mut(r);
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (a, b) in dr.iter_mut().zip(pr) {
                    *a = b * (*a - dot) * scale;
                }
            }
            let dqr = dp.matmul(&att.k_rot[h]);
            let dkr = dp.t_matmul(&att.q_rot[h]);
            for r in 0..n {
                att.rope.rotate(
                    r,
                    dqr.row(r),
                    &mut gq.row_mut(r)[h * dh..(h + 1) * dh],
                    true,
                );
                att.rope.rotate(
                    r,
                    dkr.row(r),
                    &mut gk.row_mut(r)[h * dh..(h + 1) * dh],
                    true,
                );
            }
        }
        if self.nodes[att.q].needs_grad {
            accumulate(grads, att.q, gq);
        }
        if self.nodes[att.k].needs_grad {
            accumulate(grads, att.k, gk);
        }
        if self.nodes[att.v].needs_grad {
            accumulate(grads, att.v, gv);
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (a, b) in out.data_mut().iter_mut().zip(g.row(r)) {
            *a += b;
        }
    }
    out
}

fn rotate_head(x: &Matrix, head: usize, dh: usize, rope: &RopeTable, inverse: bool) -> Matrix {
    let n = x.rows();
    let mut out = Matrix::zeros(n, dh);
    for r in 0..n {
        let src = &x.row(r)[head * dh..(head + 1) * dh];
        rope.rotate(r, src, out.row_mut(r), inverse);
    }
    out
}

fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a));
    let mut sum = 0.0;
    for a in row.iter_mut() {
        *a = ((*a - max) * scale).exp();
        sum += *a;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|a| *a *= inv);
}
