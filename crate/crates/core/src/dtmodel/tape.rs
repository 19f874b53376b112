//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list visits every node after all of its consumers. Constants carry no
//! gradient and any subgraph built only from constants is skipped during the
//! sweep.

use std::sync::Arc;

use super::mat::{dot, Mat};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

/// One causal attention segment: rows `start..start + len` attend within themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Silu(NodeId),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    SumCols(NodeId),
    SegmentSum(NodeId, Arc<Vec<usize>>),
    MeanAll(NodeId),
    GatherRows(NodeId, Arc<Vec<usize>>),
    ConcatRows(Vec<NodeId>),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat, inv_std: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, segments: Arc<Vec<Segment>>, heads: usize, probs: Vec<Vec<f64>> },
}

struct Node {
    value: Mat,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of `id`, zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: (usize, usize)) -> Mat {
        self.grads.get_mut(id).and_then(Option::take).unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.shape(), (1, 1), "node is not a scalar");
        v.data[0]
    }

    fn push(&mut self, value: Mat, op: Op, grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, grad });
        self.nodes.len() - 1
    }

    fn g(&self, id: NodeId) -> bool {
        self.nodes[id].grad
    }

    /// Differentiable leaf (a parameter tensor).
    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        let g = self.g(a) || self.g(b);
        self.push(v, op, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, f64::min, Op::Minimum(a, b))
    }

    /// `a + 1 * row` with `row` of shape `1 x cols`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols), vr.shape(), "add_row shape mismatch");
        let mut v = va.clone();
        for i in 0..v.rows {
            for (x, r) in v.row_mut(i).iter_mut().zip(&vr.data) {
                *x += r;
            }
        }
        let g = self.g(a) || self.g(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(a).map(f);
        let g = self.g(a);
        self.push(v, op, g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row sums: `n x c -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = (0..va.rows).map(|i| va.row(i).iter().sum()).collect();
        let v = Mat::from_vec(va.rows, 1, data);
        let g = self.g(a);
        self.push(v, Op::SumCols(a), g)
    }

    /// Sum rows into `n_segments` buckets: row `i` goes to `seg_of_row[i]`.
    pub fn segment_sum(&mut self, a: NodeId, seg_of_row: Arc<Vec<usize>>, n_segments: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(seg_of_row.len(), va.rows, "segment ids must cover every row");
        let mut v = Mat::zeros(n_segments, va.cols);
        for (i, &s) in seg_of_row.iter().enumerate() {
            for (o, x) in v.row_mut(s).iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        let g = self.g(a);
        self.push(v, Op::SegmentSum(a, seg_of_row), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let v = Mat::scalar(va.sum() / va.len() as f64);
        let g = self.g(a);
        self.push(v, Op::MeanAll(a), g)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let va = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * va.cols);
        for &i in idx.iter() {
            data.extend_from_slice(va.row(i));
        }
        let v = Mat::from_vec(idx.len(), va.cols, data);
        let g = self.g(a);
        self.push(v, Op::GatherRows(a, idx), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&vp.data);
            rows += vp.rows;
        }
        let g = parts.iter().any(|&p| self.g(p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), g)
    }

    /// Row-wise layer normalization with learned scale and shift (`1 x cols` each).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let n = vx.cols as f64;
        let mut xhat = Mat::zeros(vx.rows, vx.cols);
        let mut out = Mat::zeros(vx.rows, vx.cols);
        let mut inv_std = Vec::with_capacity(vx.rows);
        for i in 0..vx.rows {
            let r = vx.row(i);
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..vx.cols {
                let h = (r[j] - mu) * is;
                xhat.data[i * vx.cols + j] = h;
                out.data[i * vx.cols + j] = h * vg.data[j] + vb.data[j];
            }
        }
        let g = self.g(x) || self.g(gamma) || self.g(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, g)
    }

    /// Multi-head causal self-attention within each segment.
    /// `q`, `k`, `v` are `n x e` with `e` divisible by `heads`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, segments: Arc<Vec<Segment>>, heads: usize) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let e = vq.cols;
        assert!(e % heads == 0, "embedding not divisible by heads");
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(vq.rows, e);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments.iter() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = vec![0.0; seg.len * seg.len];
                for i in 0..seg.len {
                    let qi = &vq.row(seg.start + i)[cols.clone()];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = dot(qi, &vk.row(seg.start + j)[cols.clone()]) * scale;
                        p[i * seg.len + j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        let w = (p[i * seg.len + j] - mx).exp();
                        p[i * seg.len + j] = w;
                        z += w;
                    }
                    let o = &mut out.data[(seg.start + i) * e..(seg.start + i + 1) * e][cols.clone()];
                    for j in 0..=i {
                        let w = p[i * seg.len + j] / z;
                        p[i * seg.len + j] = w;
                        for (oo, vj) in o.iter_mut().zip(&vv.row(seg.start + j)[cols.clone()]) {
                            *oo += w * vj;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let g = self.g(q) || self.g(k) || self.g(v);
        self.push(out, Op::Attention { q, k, v, segments, heads, probs }, g)
    }

    /// Gradients of scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::scalar(1.0));

        fn acc(grads: &mut [Option<Mat>], nodes: &[Node], id: NodeId, delta: Mat) {
            if !nodes[id].grad {
                return;
            }
            match &mut grads[id] {
                Some(g) => g.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        }

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.grad {
                continue;
            }
            let val = |n: NodeId| &self.nodes[n].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        let d = gout.matmul_t(val(*b));
                        acc(&mut grads, &self.nodes, *a, d);
                    }
                    if self.g(*b) {
                        let d = val(*a).t_matmul(&gout);
                        acc(&mut grads, &self.nodes, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &self.nodes, *b, gout.clone());
                    acc(&mut grads, &self.nodes, *a, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &self.nodes, *b, gout.map(|x| -x));
                    acc(&mut grads, &self.nodes, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let da = Mat::from_vec(gout.rows, gout.cols, gout.data.iter().zip(&vb.data).map(|(g, y)| g * y).collect());
                    let db = Mat::from_vec(gout.rows, gout.cols, gout.data.iter().zip(&va.data).map(|(g, x)| g * x).collect());
                    acc(&mut grads, &self.nodes, *a, da);
                    acc(&mut grads, &self.nodes, *b, db);
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut da = gout.clone();
                    let mut db = gout;
                    for i in 0..va.len() {
                        if va.data[i] <= vb.data[i] {
                            db.data[i] = 0.0;
                        } else {
                            da.data[i] = 0.0;
                        }
                    }
                    acc(&mut grads, &self.nodes, *a, da);
                    acc(&mut grads, &self.nodes, *b, db);
                }
                Op::AddRow(a, row) => {
                    if self.g(*row) {
                        let mut dr = Mat::zeros(1, gout.cols);
                        for i in 0..gout.rows {
                            for (d, g) in dr.data.iter_mut().zip(gout.row(i)) {
                                *d += g;
                            }
                        }
                        acc(&mut grads, &self.nodes, *row, dr);
                    }
                    acc(&mut grads, &self.nodes, *a, gout);
                }
                Op::Scale(a, c) => acc(&mut grads, &self.nodes, *a, gout.map(|x| x * c)),
                Op::AddScalar(a) => acc(&mut grads, &self.nodes, *a, gout),
                Op::Exp(a) => {
                    let y = &node.value;
                    let d = Mat::from_vec(gout.rows, gout.cols, gout.data.iter().zip(&y.data).map(|(g, y)| g * y).collect());
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let d = Mat::from_vec(
                        gout.rows,
                        gout.cols,
                        gout.data
                            .iter()
                            .zip(&x.data)
                            .map(|(g, &x)| {
                                let s = sigmoid(x);
                                g * s * (1.0 + x * (1.0 - s))
                            })
                            .collect(),
                    );
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    let d = Mat::from_vec(
                        gout.rows,
                        gout.cols,
                        gout.data.iter().zip(&x.data).map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 }).collect(),
                    );
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::SumCols(a) => {
                    let va = val(*a);
                    let mut d = Mat::zeros(va.rows, va.cols);
                    for i in 0..va.rows {
                        d.row_mut(i).fill(gout.data[i]);
                    }
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::SegmentSum(a, seg) => {
                    let va = val(*a);
                    let mut d = Mat::zeros(va.rows, va.cols);
                    for (i, &s) in seg.iter().enumerate() {
                        d.row_mut(i).copy_from_slice(gout.row(s));
                    }
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::MeanAll(a) => {
                    let va = val(*a);
                    let g = gout.data[0] / va.len() as f64;
                    acc(&mut grads, &self.nodes, *a, Mat::from_vec(va.rows, va.cols, vec![g; va.len()]));
                }
                Op::GatherRows(a, idx) => {
                    let va = val(*a);
                    let mut d = Mat::zeros(va.rows, va.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (dd, g) in d.row_mut(i).iter_mut().zip(gout.row(r)) {
                            *dd += g;
                        }
                    }
                    acc(&mut grads, &self.nodes, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        let d = Mat::from_vec(r, c, gout.data[offset * c..(offset + r) * c].to_vec());
                        acc(&mut grads, &self.nodes, p, d);
                        offset += r;
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let vg = val(*gamma);
                    let (rows, cols) = xhat.shape();
                    let n = cols as f64;
                    let mut dgamma = Mat::zeros(1, cols);
                    let mut dbeta = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        let go = gout.row(i);
                        let xh = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            dgamma.data[j] += go[j] * xh[j];
                            dbeta.data[j] += go[j];
                            let dh = go[j] * vg.data[j];
                            mean_d += dh;
                            mean_dx += dh * xh[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let r = dx.row_mut(i);
                        for j in 0..cols {
                            let dh = go[j] * vg.data[j];
                            r[j] = inv_std[i] * (dh - mean_d - xh[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, &self.nodes, *gamma, dgamma);
                    acc(&mut grads, &self.nodes, *beta, dbeta);
                    acc(&mut grads, &self.nodes, *x, dx);
                }
                Op::Attention { q, k, v, segments, heads, probs } => {
                    let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                    let e = vq.cols;
                    let dh = e / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(vq.rows, e);
                    let mut dk = Mat::zeros(vq.rows, e);
                    let mut dv = Mat::zeros(vq.rows, e);
                    let mut pi = 0;
                    for seg in segments.iter() {
                        for h in 0..*heads {
                            let p = &probs[pi];
                            pi += 1;
                            let c0 = h * dh;
                            let mut dp = vec![0.0; seg.len];
                            for i in 0..seg.len {
                                let gi = &gout.row(seg.start + i)[c0..c0 + dh];
                                let mut wsum = 0.0;
                                for j in 0..=i {
                                    let pij = p[i * seg.len + j];
                                    let vj = &vv.row(seg.start + j)[c0..c0 + dh];
                                    dp[j] = dot(gi, vj);
                                    wsum += pij * dp[j];
                                    let dvj = &mut dv.data[(seg.start + j) * e + c0..(seg.start + j) * e + c0 + dh];
                                    for (d, g) in dvj.iter_mut().zip(gi) {
                                        *d += pij * g;
                                    }
                                }
                                for j in 0..=i {
                                    let ds = p[i * seg.len + j] * (dp[j] - wsum) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let qi = &vq.row(seg.start + i)[c0..c0 + dh];
                                    let kj = &vk.row(seg.start + j)[c0..c0 + dh];
                                    let dqi = &mut dq.data[(seg.start + i) * e + c0..(seg.start + i) * e + c0 + dh];
                                    for (d, kk) in dqi.iter_mut().zip(kj) {
                                        *d += ds * kk;
                                    }
                                    let dkj = &mut dk.data[(seg.start + j) * e + c0..(seg.start + j) * e + c0 + dh];
                                    for (d, qq) in dkj.iter_mut().zip(qi) {
                                        *d += ds * qq;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, &self.nodes, *q, dq);
                    acc(&mut grads, &self.nodes, *k, dk);
                    acc(&mut grads, &self.nodes, *v, dv);
                }
            }
        }
        Gradients { grads }
    }
}
