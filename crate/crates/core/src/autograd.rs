//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the tape in reverse and
//! returns gradients for every trainable parameter that was read. Parameters
//! rejected by the tape's trainable filter are recorded as constants, so no
//! gradient work is spent on frozen weights.
//!
//! The op set is deliberately small: whatever the backbone, the
//! disentanglement heads, the toy ASR and the probes need. Ops with
//! nontrivial adjoints (layer norm, causal attention, cross-entropy, CTC,
//! gradient reversal) carry hand-written backward rules that are checked
//! against central finite differences in the tests below.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{s, Array1, Axis};

use crate::params::{Grads, Mat, Param, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the adjoints of [`Tape::backward_full`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row blocks, one per sequence, inside a stacked `N × D` matrix.
#[derive(Debug, Clone, Default)]
pub struct SeqLayout {
    pub blocks: Vec<Range<usize>>,
}

impl SeqLayout {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut off = 0;
        let blocks = lengths
            .into_iter()
            .map(|len| {
                let r = off..off + len;
                off += len;
                r
            })
            .collect();
        Self { blocks }
    }

    pub fn total_rows(&self) -> usize {
        self.blocks.last().map_or(0, |r| r.end)
    }
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Array1<f64>,
    },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    MeanPool(Var, Vec<Range<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<Mat>,
    },
    /// Scalar loss whose gradient w.r.t. `input` was computed in the forward pass.
    Loss { input: Var, grad: Mat },
    Grl(Var, f64),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&Param) -> bool + 'a>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a> Tape<'a> {
    /// Tape on which every parameter is differentiable.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, |_| true)
    }

    /// Tape on which only parameters accepted by `trainable` receive gradients.
    pub fn with_trainable(store: &'a ParamStore, trainable: impl Fn(&Param) -> bool + 'a) -> Self {
        Self {
            store,
            trainable: Box::new(trainable),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// Tape that records no gradients at all (inference).
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, |_| false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const, false)
    }

    /// Differentiable leaf that is not a stored parameter (used by gradient checks).
    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let trainable = (self.trainable)(p);
        let value = p.value.clone();
        let v = if trainable {
            self.push(value, Op::Param(id), true)
        } else {
            self.push(value, Op::Const, false)
        };
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a (n × d) + b (1 × d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.nrows(), 1, "add_row: bias must be a single row");
        let value = self.value(a) + &bv.row(0);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Row-wise layer normalization with learned gain and bias (both `1 × d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / d;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
        let value = &xhat * &self.value(gain).row(0) + &self.value(bias).row(0);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Rows of `table` selected by `rows` (embedding lookup). The backward
    /// pass scatter-adds, so only the selected rows receive gradient.
    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&t.row(r));
        }
        let rg = self.rg(table);
        self.push(value, Op::Gather(table, rows), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Mean of each row range; output has one row per range.
    pub fn mean_pool(&mut self, x: Var, ranges: Vec<Range<usize>>) -> Var {
        let xv = self.value(x);
        let mut value = Mat::zeros((ranges.len(), xv.ncols()));
        for (i, r) in ranges.iter().enumerate() {
            assert!(!r.is_empty(), "mean_pool: empty range");
            let m = xv.slice(s![r.clone(), ..]).mean_axis(Axis(0)).expect("non-empty");
            value.row_mut(i).assign(&m);
        }
        let rg = self.rg(x);
        self.push(value, Op::MeanPool(x, ranges), rg)
    }

    /// Multi-head causal self-attention over the sequences in `layout`.
    /// `q`, `k`, `v` are `N × D` with heads occupying contiguous column
    /// slices. Position `i` of a block attends to positions `0..=i` of the
    /// same block only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: &SeqLayout, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.dim();
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        assert!(layout.total_rows() <= n, "attention: layout exceeds rows");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(layout.blocks.len() * heads);
        for block in &layout.blocks {
            let len = block.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![block.clone(), cols.clone()]);
                let kh = kv.slice(s![block.clone(), cols.clone()]);
                let vh = vv.slice(s![block.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for i in 0..len {
                    let mut row = p.row_mut(i);
                    let max = (0..=i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..len {
                        if j <= i {
                            row[j] = (row[j] - max).exp();
                            z += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row.mapv_inplace(|e| e / z);
                }
                out.slice_mut(s![block.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy over the listed `(row, class)` targets.
    /// An empty target list yields a constant zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let mut grad = Mat::zeros(lv.dim());
        let mut total = 0.0;
        let count = targets.len() as f64;
        for &(row, class) in targets {
            let r = lv.row(row);
            let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + r.mapv(|x| (x - max).exp()).sum().ln();
            total += lse - r[class];
            let mut g = grad.row_mut(row);
            for (j, &x) in r.iter().enumerate() {
                g[j] += (x - lse).exp() / count;
            }
            g[class] -= 1.0 / count;
        }
        let value = if targets.is_empty() { 0.0 } else { total / count };
        let rg = self.rg(logits) && !targets.is_empty();
        self.push(
            Mat::from_elem((1, 1), value),
            Op::Loss { input: logits, grad },
            rg,
        )
    }

    /// Mean CTC negative log-likelihood over sequences. `logits` rows inside
    /// `layout.blocks[i]` are the frames of sequence `i`, column `blank` is
    /// the blank symbol. Sequences whose labels cannot be aligned to their
    /// frames are skipped; the number skipped is returned alongside.
    pub fn ctc_loss(&mut self, logits: Var, layout: &SeqLayout, labels: &[Vec<usize>], blank: usize) -> (Var, usize) {
        assert_eq!(layout.blocks.len(), labels.len(), "ctc: one label sequence per block");
        let lv = self.value(logits);
        let mut grad = Mat::zeros(lv.dim());
        let mut total = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        let mut per_seq = Vec::with_capacity(labels.len());
        for (block, lab) in layout.blocks.iter().zip(labels) {
            let frames = lv.slice(s![block.clone(), ..]).to_owned();
            match ctc_single(&frames, lab, blank) {
                Some((nll, g)) => {
                    total += nll;
                    used += 1;
                    per_seq.push(Some((block.clone(), g)));
                }
                None => {
                    skipped += 1;
                    per_seq.push(None);
                }
            }
        }
        if used > 0 {
            let inv = 1.0 / used as f64;
            for (block, g) in per_seq.into_iter().flatten() {
                grad.slice_mut(s![block, ..]).scaled_add(inv, &g);
            }
        }
        let value = if used > 0 { total / used as f64 } else { 0.0 };
        let rg = self.rg(logits) && used > 0;
        let var = self.push(
            Mat::from_elem((1, 1), value),
            Op::Loss { input: logits, grad },
            rg,
        );
        (var, skipped)
    }

    /// Gradient reversal: identity forward, `-lambda` times the incoming
    /// gradient backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::Grl(x, lambda), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Gradients of the scalar `loss` w.r.t. every trainable parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        self.backward_full(loss).0
    }

    /// Like [`Tape::backward`], also returning the adjoint of every node
    /// (`None` where no gradient flowed).
    pub fn backward_full(&self, loss: Var) -> (Grads, Vec<Option<Mat>>) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be scalar");
        let mut adj: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut grads = Grads::new(self.store.len());
        adj[loss.0] = Some(Mat::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut adj, *a, da);
                    }
                    if self.rg(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        let da = g.dot(self.value(*b));
                        accumulate(&mut adj, *a, da);
                    }
                    if self.rg(*b) {
                        let db = g.t().dot(self.value(*a));
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                }
                Op::AddRow(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut adj, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut adj, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, &g * *c),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Relu(a) => {
                    let d = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut adj, *a, &g * &d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.rg(*gain) {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut adj, *gain, dg);
                    }
                    if self.rg(*bias) {
                        accumulate(&mut adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.rg(*x) {
                        let d = xhat.ncols() as f64;
                        let dxhat = &g * &self.value(*gain).row(0);
                        let m1 = dxhat.sum_axis(Axis(1)) / d;
                        let m2 = (&dxhat * xhat).sum_axis(Axis(1)) / d;
                        let dx = (dxhat - &m1.insert_axis(Axis(1)) - xhat * &m2.insert_axis(Axis(1)))
                            * &inv_std.view().insert_axis(Axis(1));
                        accumulate(&mut adj, *x, dx);
                    }
                }
                Op::Gather(table, rows) => {
                    let mut dt = Mat::zeros(self.value(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = dt.row_mut(r);
                        row += &g.row(i);
                    }
                    accumulate(&mut adj, *table, dt);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.rg(p) {
                            accumulate(&mut adj, p, g.slice(s![off..off + n, ..]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::MeanPool(x, ranges) => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (i, r) in ranges.iter().enumerate() {
                        let share = &g.row(i) / r.len() as f64;
                        for row in r.clone() {
                            let mut dst = dx.row_mut(row);
                            dst += &share;
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.dim();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros((n, d));
                    let mut dk = Mat::zeros((n, d));
                    let mut dv = Mat::zeros((n, d));
                    let mut pi = 0;
                    for block in &layout.blocks {
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[pi];
                            pi += 1;
                            let qh = qv.slice(s![block.clone(), cols.clone()]);
                            let kh = kv.slice(s![block.clone(), cols.clone()]);
                            let vh = vv.slice(s![block.clone(), cols.clone()]);
                            let go = g.slice(s![block.clone(), cols.clone()]);
                            dv.slice_mut(s![block.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vh.t());
                            let rowdot = (&dp * p).sum_axis(Axis(1));
                            let ds = p * &(dp - &rowdot.insert_axis(Axis(1)));
                            dq.slice_mut(s![block.clone(), cols.clone()])
                                .assign(&(ds.dot(&kh) * scale));
                            dk.slice_mut(s![block.clone(), cols]).assign(&(ds.t().dot(&qh) * scale));
                        }
                    }
                    if self.rg(*q) {
                        accumulate(&mut adj, *q, dq);
                    }
                    if self.rg(*k) {
                        accumulate(&mut adj, *k, dk);
                    }
                    if self.rg(*v) {
                        accumulate(&mut adj, *v, dv);
                    }
                }
                Op::Loss { input, grad } => {
                    accumulate(&mut adj, *input, grad * g[[0, 0]]);
                }
                Op::Grl(x, lambda) => accumulate(&mut adj, *x, &g * -*lambda),
                Op::Sum(x) => {
                    let dim = self.value(*x).dim();
                    accumulate(&mut adj, *x, Mat::from_elem(dim, g[[0, 0]]));
                }
            }
            adj[i] = Some(g);
        }
        (grads, adj)
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// CTC negative log-likelihood and its gradient w.r.t. the frame logits of
/// one sequence. `None` when no valid alignment exists.
fn ctc_single(logits: &Mat, labels: &[usize], blank: usize) -> Option<(f64, Mat)> {
    let (t_len, classes) = logits.dim();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    if t_len == 0 {
        return None;
    }

    let mut logp = Mat::zeros((t_len, classes));
    for t in 0..t_len {
        let r = logits.row(t);
        let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + r.mapv(|x| (x - max).exp()).sum().ln();
        logp.row_mut(t).assign(&r.mapv(|x| x - lse));
    }

    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = Mat::from_elem((t_len, s_len), ninf);
    alpha[[0, 0]] = logp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = logp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = vec![alpha[[t - 1, s]]];
            if s >= 1 {
                terms.push(alpha[[t - 1, s - 1]]);
            }
            if skip_ok(s) {
                terms.push(alpha[[t - 1, s - 2]]);
            }
            let lse = log_sum_exp(&terms);
            if lse > ninf {
                alpha[[t, s]] = lse + logp[[t, ext[s]]];
            }
        }
    }

    // beta[t][s]: log-probability of emitting the remainder after frame t,
    // given state s at frame t (frame t's emission excluded).
    let mut beta = Mat::from_elem((t_len, s_len), ninf);
    beta[[t_len - 1, s_len - 1]] = 0.0;
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = vec![beta[[t + 1, s]] + logp[[t + 1, ext[s]]]];
            if s + 1 < s_len {
                terms.push(beta[[t + 1, s + 1]] + logp[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                terms.push(beta[[t + 1, s + 2]] + logp[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = log_sum_exp(&terms);
        }
    }

    let mut ends = vec![alpha[[t_len - 1, s_len - 1]]];
    if s_len > 1 {
        ends.push(alpha[[t_len - 1, s_len - 2]]);
    }
    let log_p = log_sum_exp(&ends);
    if !log_p.is_finite() {
        return None;
    }

    let mut grad = logp.mapv(f64::exp);
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[[t, s]] + beta[[t, s]] - log_p;
            if occ > ninf {
                grad[[t, ext[s]]] -= occ.exp();
            }
        }
    }
    Some((-log_p, grad))
}
