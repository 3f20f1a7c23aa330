//! Reverse-mode differentiation over a recording tape.
//!
//! Every primitive appends one node holding its forward value and the
//! information its backward rule needs. Nodes only ever reference earlier
//! nodes, so walking the tape backwards visits each node after all of its
//! consumers.

mod kernels;
mod ops;
#[cfg(test)]
mod tests;

pub use kernels::{gemm, gemm_nt, gemm_tn};
pub use ops::{adaptive_window, patchify_index, AdaptivePool, BatchNormMode};

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub joints: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Input frame feeding tap `k` of output frame `t`, if inside the sequence.
    pub fn source(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k * self.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_rhs: bool,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        /// Contiguous block length each input contributes per outer index.
        blocks: Vec<usize>,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Maximum(Var, Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        width: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        training: bool,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    L2Normalize {
        x: Var,
        width: usize,
        norms: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Maximum(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::SumAll(x) => vec![*x],
            Op::Gather { src, .. } => vec![*src],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Mean { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Pending running-statistics write produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub param: ParamId,
    pub value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<ParamId>,
    buffer_updates: Vec<BufferUpdate>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Hash of every data-dependent branch taken so far: relu masks,
    /// `maximum` picks and gather indices (pooling and token selection).
    /// Two evaluations with equal signatures lie in the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Maximum(a, b) => {
                    i.hash(&mut h);
                    let (a, b) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for (x, y) in a.iter().zip(b) {
                        (x >= y).hash(&mut h);
                    }
                }
                Op::Gather { index, .. } => {
                    i.hash(&mut h);
                    index.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Parameter values live in the
    /// [`ParamStore`] and are untouched.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.param_order.clear();
        self.buffer_updates.clear();
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, requires_grad, op))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, Op::Leaf)
    }

    /// A leaf that receives gradients, e.g. an input under a gradient check.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, Op::Leaf)
    }

    /// Loads a parameter onto the tape. Repeated requests for the same
    /// parameter return the same node so shared modules accumulate into one
    /// gradient slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.param(id);
        let v = self.push_node(p.value.clone(), p.trainable, Op::Leaf);
        self.params.insert(id, v);
        self.param_order.push(id);
        v
    }

    /// Parameters read by the recorded computation, in first-use order.
    pub fn params_used(&self) -> &[ParamId] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape matches value"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub(crate) fn record_buffer_update(&mut self, param: ParamId, value: Tensor) {
        self.buffer_updates.push(BufferUpdate { param, value });
    }

    pub fn buffer_updates(&self) -> &[BufferUpdate] {
        &self.buffer_updates
    }

    /// Adds the gradient of every parameter used on this tape into the
    /// store's gradient slots.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &id in &self.param_order {
            let v = self.params[&id];
            if let Some(g) = &self.nodes[v.0].grad {
                store.accumulate_grad(id, g);
            }
        }
    }

    /// Writes running statistics recorded by training-mode batch norms.
    pub fn apply_buffer_updates(&self, store: &mut ParamStore) {
        for u in &self.buffer_updates {
            *store.value_mut(u.param) = u.value.clone();
        }
    }

    /// Back-propagates from a scalar loss. Gradients are added to whatever
    /// is already accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        add_into(&mut self.nodes, loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.as_deref() else {
                continue;
            };
            backprop(head, node, grad);
        }
        Ok(())
    }
}

fn add_into(nodes: &mut [Node], v: Var, g: &[f64]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Sums a broadcast gradient back to an operand of `len` elements.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn backprop(head: &mut [Node], node: &Node, g: &[f64]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if wants(head, v) {
                    let r = reduce_to(g, head[v.0].value.len());
                    add_into(head, v, &r);
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(head, *a) {
                let r = reduce_to(g, head[a.0].value.len());
                add_into(head, *a, &r);
            }
            if wants(head, *b) {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                let r = reduce_to(&neg, head[b.0].value.len());
                add_into(head, *b, &r);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (head[a.0].value.data(), head[b.0].value.data());
            let (al, bl) = (av.len(), bv.len());
            let ga = wants(head, *a).then(|| {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * bv[i % bl]).collect();
                reduce_to(&full, al)
            });
            let gb = wants(head, *b).then(|| {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * av[i % al]).collect();
                reduce_to(&full, bl)
            });
            if let Some(ga) = ga {
                add_into(head, *a, &ga);
            }
            if let Some(gb) = gb {
                add_into(head, *b, &gb);
            }
        }
        Op::Scale(x, c) => {
            let r: Vec<f64> = g.iter().map(|v| v * c).collect();
            add_into(head, *x, &r);
        }
        Op::MatMul {
            a,
            b,
            batch,
            n,
            k,
            m,
            shared_rhs,
        } => {
            let (n, k, m) = (*n, *k, *m);
            let av = head[a.0].value.data();
            let bv = head[b.0].value.data();
            let rhs = |i: usize| if *shared_rhs { &bv[..] } else { &bv[i * k * m..(i + 1) * k * m] };
            let ga = wants(head, *a).then(|| {
                let mut ga = vec![0.0; av.len()];
                for i in 0..*batch {
                    gemm_nt(
                        &g[i * n * m..(i + 1) * n * m],
                        rhs(i),
                        &mut ga[i * n * k..(i + 1) * n * k],
                        n,
                        m,
                        k,
                    );
                }
                ga
            });
            let gb = wants(head, *b).then(|| {
                let mut gb = vec![0.0; bv.len()];
                for i in 0..*batch {
                    let dst = if *shared_rhs {
                        &mut gb[..]
                    } else {
                        &mut gb[i * k * m..(i + 1) * k * m]
                    };
                    gemm_tn(
                        &av[i * n * k..(i + 1) * n * k],
                        &g[i * n * m..(i + 1) * n * m],
                        dst,
                        k,
                        n,
                        m,
                    );
                }
                gb
            });
            if let Some(ga) = ga {
                add_into(head, *a, &ga);
            }
            if let Some(gb) = gb {
                add_into(head, *b, &gb);
            }
        }
        Op::Gather { src, index } => {
            let mut gs = vec![0.0; head[src.0].value.len()];
            for (&i, &x) in index.iter().zip(g) {
                gs[i] += x;
            }
            add_into(head, *src, &gs);
        }
        Op::Reshape(x) => add_into(head, *x, g),
        Op::Concat {
            inputs,
            outer,
            blocks,
        } => {
            let total: usize = blocks.iter().sum();
            let mut offset = 0;
            for (v, &blk) in inputs.iter().zip(blocks) {
                if wants(head, *v) {
                    let mut gi = Vec::with_capacity(outer * blk);
                    for o in 0..*outer {
                        let start = o * total + offset;
                        gi.extend_from_slice(&g[start..start + blk]);
                    }
                    add_into(head, *v, &gi);
                }
                offset += blk;
            }
        }
        Op::Relu(x) => {
            let r: Vec<f64> = g
                .iter()
                .zip(out)
                .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                .collect();
            add_into(head, *x, &r);
        }
        Op::Gelu(x) => {
            let xv = head[x.0].value.data();
            let r: Vec<f64> = g.iter().zip(xv).map(|(g, &x)| g * ops::gelu_grad(x)).collect();
            add_into(head, *x, &r);
        }
        Op::Exp(x) => {
            let r: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
            add_into(head, *x, &r);
        }
        Op::Maximum(a, b) => {
            let (av, bv) = (head[a.0].value.data(), head[b.0].value.data());
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for i in 0..g.len() {
                if av[i] >= bv[i] {
                    ga[i] = g[i];
                } else {
                    gb[i] = g[i];
                }
            }
            add_into(head, *a, &ga);
            add_into(head, *b, &gb);
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let mut r = vec![0.0; g.len()];
            for o in 0..*outer {
                for j in 0..*inner {
                    let at = |l: usize| o * len * inner + l * inner + j;
                    let dot: f64 = (0..*len).map(|l| g[at(l)] * out[at(l)]).sum();
                    for l in 0..*len {
                        r[at(l)] = out[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            add_into(head, *x, &r);
        }
        Op::LogSoftmax {
            x,
            outer,
            len,
            inner,
        } => {
            let mut r = vec![0.0; g.len()];
            for o in 0..*outer {
                for j in 0..*inner {
                    let at = |l: usize| o * len * inner + l * inner + j;
                    let total: f64 = (0..*len).map(|l| g[at(l)]).sum();
                    for l in 0..*len {
                        r[at(l)] = g[at(l)] - out[at(l)].exp() * total;
                    }
                }
            }
            add_into(head, *x, &r);
        }
        Op::Mean {
            x,
            outer,
            len,
            inner,
        } => {
            let mut r = vec![0.0; outer * len * inner];
            let scale = 1.0 / *len as f64;
            for o in 0..*outer {
                for l in 0..*len {
                    for j in 0..*inner {
                        r[o * len * inner + l * inner + j] = g[o * inner + j] * scale;
                    }
                }
            }
            add_into(head, *x, &r);
        }
        Op::SumAll(x) => {
            let r = vec![g[0]; head[x.0].value.len()];
            add_into(head, *x, &r);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            width,
            xhat,
            rstd,
        } => {
            let d = *width;
            let gv = head[gamma.0].value.data().to_vec();
            let rows = g.len() / d;
            if wants(head, *x) {
                let mut r = vec![0.0; g.len()];
                for i in 0..rows {
                    let gs = &g[i * d..(i + 1) * d];
                    let xs = &xhat[i * d..(i + 1) * d];
                    let dxhat: Vec<f64> = gs.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        r[i * d + c] = rstd[i] * (dxhat[c] - mean_d - xs[c] * mean_dx);
                    }
                }
                add_into(head, *x, &r);
            }
            let (dg, db) = affine_grads(g, xhat, d);
            add_into(head, *gamma, &dg);
            add_into(head, *beta, &db);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            channels,
            xhat,
            rstd,
            training,
        } => {
            let c = *channels;
            let gv = head[gamma.0].value.data().to_vec();
            let rows = g.len() / c;
            if wants(head, *x) {
                let mut r = vec![0.0; g.len()];
                if *training {
                    let mut mean_d = vec![0.0; c];
                    let mut mean_dx = vec![0.0; c];
                    for i in 0..rows {
                        for ch in 0..c {
                            let dxh = g[i * c + ch] * gv[ch];
                            mean_d[ch] += dxh;
                            mean_dx[ch] += dxh * xhat[i * c + ch];
                        }
                    }
                    for ch in 0..c {
                        mean_d[ch] /= rows as f64;
                        mean_dx[ch] /= rows as f64;
                    }
                    for i in 0..rows {
                        for ch in 0..c {
                            let dxh = g[i * c + ch] * gv[ch];
                            r[i * c + ch] =
                                rstd[ch] * (dxh - mean_d[ch] - xhat[i * c + ch] * mean_dx[ch]);
                        }
                    }
                } else {
                    for i in 0..rows {
                        for ch in 0..c {
                            r[i * c + ch] = g[i * c + ch] * gv[ch] * rstd[ch];
                        }
                    }
                }
                add_into(head, *x, &r);
            }
            let (dg, db) = affine_grads(g, xhat, c);
            add_into(head, *gamma, &dg);
            add_into(head, *beta, &db);
        }
        Op::Conv { x, w, bias, geom } => {
            let xv = head[x.0].value.data();
            let wv = head[w.0].value.data();
            let (jn, ci, co) = (geom.joints, geom.c_in, geom.c_out);
            let in_frame = jn * ci;
            let out_frame = jn * co;
            let gx = wants(head, *x).then(|| {
                let mut gx = vec![0.0; xv.len()];
                for b in 0..geom.batch {
                    for t in 0..geom.t_out {
                        let go = &g[(b * geom.t_out + t) * out_frame..][..out_frame];
                        for k in 0..geom.kernel {
                            if let Some(s) = geom.source(t, k) {
                                let dst = &mut gx[(b * geom.t_in + s) * in_frame..][..in_frame];
                                gemm_nt(go, &wv[k * ci * co..(k + 1) * ci * co], dst, jn, co, ci);
                            }
                        }
                    }
                }
                gx
            });
            let gw = wants(head, *w).then(|| {
                let mut gw = vec![0.0; wv.len()];
                for b in 0..geom.batch {
                    for t in 0..geom.t_out {
                        let go = &g[(b * geom.t_out + t) * out_frame..][..out_frame];
                        for k in 0..geom.kernel {
                            if let Some(s) = geom.source(t, k) {
                                let xs = &xv[(b * geom.t_in + s) * in_frame..][..in_frame];
                                gemm_tn(xs, go, &mut gw[k * ci * co..(k + 1) * ci * co], ci, jn, co);
                            }
                        }
                    }
                }
                gw
            });
            if let Some(gx) = gx {
                add_into(head, *x, &gx);
            }
            if let Some(gw) = gw {
                add_into(head, *w, &gw);
            }
            if let Some(bias) = bias {
                let gb = reduce_to(g, co);
                add_into(head, *bias, &gb);
            }
        }
        Op::L2Normalize { x, width, norms } => {
            let d = *width;
            let mut r = vec![0.0; g.len()];
            for (i, &nrm) in norms.iter().enumerate() {
                let ys = &out[i * d..(i + 1) * d];
                let gs = &g[i * d..(i + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    r[i * d + c] = (gs[c] - ys[c] * dot) / nrm;
                }
            }
            add_into(head, *x, &r);
        }
    }
}

fn affine_grads(g: &[f64], xhat: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dg = vec![0.0; width];
    let mut db = vec![0.0; width];
    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
        dg[i % width] += gv * xh;
        db[i % width] += gv;
    }
    (dg, db)
}
