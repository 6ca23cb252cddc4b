//! Reverse-mode autodiff over [`Mat`].
//!
//! A `Graph` is a define-by-run tape: every op appends a node holding its
//! value and enough metadata to push gradients back to its parents. Models
//! rebuild the graph each step, insert their parameters with [`Graph::param`],
//! and read gradients back after [`Graph::backward`].
//!
//! The op set is deliberately small; the one composite op is
//! [`Graph::attention`], which fuses per-block multi-head softmax attention
//! (optionally causal, optionally rotary-encoded) with a hand-written
//! backward pass.

use super::mat::{dot, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Rotary position encoding settings for [`Graph::attention`].
#[derive(Clone, Copy, Debug)]
pub struct Rope {
    pub base: f64,
    /// Absolute position of the first row of each block (nonzero when a
    /// decoder appends to an existing cache).
    pub offset: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnCfg {
    pub heads: usize,
    /// Number of independent sequences packed row-major into the input;
    /// rows within a block attend only to each other.
    pub blocks: usize,
    pub causal: bool,
    pub rope: Option<Rope>,
}

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, R),
    AddRowBroadcast(Var, Var),
    /// Tile a `(t × c)` block over `reps` consecutive row blocks of the input.
    AddBlockBroadcast(Var, Var, usize),
    Tanh(Var),
    Silu(Var),
    Square(Var),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    RmsNorm(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        cfg: AttnCfg,
        /// Saved softmax probabilities, one `(t × t)` matrix per (block, head).
        probs: Vec<Mat<R>>,
    },
    CrossEntropyRows(Var, Vec<usize>),
    Detach(#[allow(dead_code)] Var),
}

pub struct Graph<R: Real> {
    ops: Vec<Op<R>>,
    vals: Vec<Mat<R>>,
    grads: Vec<Option<Mat<R>>>,
    needs: Vec<bool>,
}

const RMS_EPS: f64 = 1e-6;

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<R>, val: Mat<R>, needs: bool) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        self.grads.push(None);
        self.needs.push(needs);
        Var(self.ops.len() - 1)
    }

    fn need(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Constant input; gradients are not tracked through it.
    pub fn leaf(&mut self, m: Mat<R>) -> Var {
        self.push(Op::Leaf, m, false)
    }

    /// Trainable input; `grad()` is available after `backward()`.
    pub fn param(&mut self, m: Mat<R>) -> Var {
        self.push(Op::Leaf, m, true)
    }

    pub fn value(&self, v: Var) -> &Mat<R> {
        &self.vals[v.0]
    }

    pub fn scalar(&self, v: Var) -> R {
        debug_assert_eq!(self.vals[v.0].len(), 1);
        self.vals[v.0].data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&Mat<R>> {
        self.grads[v.0].as_ref()
    }

    /// Number of attention ops recorded on the tape (a refinement pass is
    /// single-shot iff this is exactly the layer count).
    pub fn attention_op_count(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| matches!(op, Op::Attention { .. }))
            .count()
    }

    /// Gradient of the last `backward()` target w.r.t. `v`, zeros if unused.
    pub fn grad_or_zeros(&self, v: Var) -> Mat<R> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.vals[v.0].rows(), self.vals[v.0].cols()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0].matmul(&self.vals[b.0]);
        let needs = self.need(a) || self.need(b);
        self.push(Op::MatMul(a, b), val, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut val = self.vals[a.0].clone();
        val.add_assign(&self.vals[b.0]);
        let needs = self.need(a) || self.need(b);
        self.push(Op::Add(a, b), val, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let va = &self.vals[a.0];
        let vb = &self.vals[b.0];
        assert_eq!(va.len(), vb.len(), "sub shape");
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let val = Mat::from_vec(va.rows(), va.cols(), data);
        let needs = self.need(a) || self.need(b);
        self.push(Op::Sub(a, b), val, needs)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let va = &self.vals[a.0];
        let vb = &self.vals[b.0];
        assert_eq!(va.len(), vb.len(), "mul_elem shape");
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let val = Mat::from_vec(va.rows(), va.cols(), data);
        let needs = self.need(a) || self.need(b);
        self.push(Op::MulElem(a, b), val, needs)
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let val = self.vals[a.0].map(|x| x * c);
        let needs = self.need(a);
        self.push(Op::Scale(a, c), val, needs)
    }

    /// Add a `1×c` bias to every row of an `n×c` matrix.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let va = &self.vals[a.0];
        let vb = &self.vals[bias.0];
        assert_eq!(vb.rows(), 1, "bias must be a row vector");
        assert_eq!(va.cols(), vb.cols(), "bias width");
        let mut val = va.clone();
        for i in 0..val.rows() {
            let row = val.row_mut(i);
            for (x, &b) in row.iter_mut().zip(vb.row(0).iter()) {
                *x += b;
            }
        }
        let needs = self.need(a) || self.need(bias);
        self.push(Op::AddRowBroadcast(a, bias), val, needs)
    }

    /// Add a `(t×c)` block to each of `reps` consecutive `(t×c)` row-blocks.
    pub fn add_block_broadcast(&mut self, a: Var, block: Var, reps: usize) -> Var {
        let va = &self.vals[a.0];
        let vb = &self.vals[block.0];
        assert_eq!(va.rows(), vb.rows() * reps, "block tiling height");
        assert_eq!(va.cols(), vb.cols(), "block width");
        let t = vb.rows();
        let mut val = va.clone();
        for r in 0..reps {
            for i in 0..t {
                let row = val.row_mut(r * t + i);
                for (x, &b) in row.iter_mut().zip(vb.row(i).iter()) {
                    *x += b;
                }
            }
        }
        let needs = self.need(a) || self.need(block);
        self.push(Op::AddBlockBroadcast(a, block, reps), val, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| x.tanh());
        let needs = self.need(a);
        self.push(Op::Tanh(a), val, needs)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| x * sigmoid(x));
        let needs = self.need(a);
        self.push(Op::Silu(a), val, needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].map(|x| x * x);
        let needs = self.need(a);
        self.push(Op::Square(a), val, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: R = self.vals[a.0].data().iter().copied().sum();
        let needs = self.need(a);
        self.push(Op::Sum(a), Mat::from_vec(1, 1, vec![s]), needs)
    }

    /// Select rows of `a` by index (duplicates allowed). Also serves as
    /// embedding lookup when `a` is a table.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let va = &self.vals[a.0];
        let mut val = Mat::zeros(idx.len(), va.cols());
        for (i, &r) in idx.iter().enumerate() {
            val.row_mut(i).copy_from_slice(va.row(r));
        }
        let needs = self.need(a);
        self.push(Op::GatherRows(a, idx), val, needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.vals[parts[0].0].cols();
        let rows: usize = parts.iter().map(|p| self.vals[p.0].rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(self.vals[p.0].cols(), cols, "concat_rows width");
            data.extend_from_slice(self.vals[p.0].data());
        }
        let needs = parts.iter().any(|&p| self.need(p));
        self.push(Op::ConcatRows(parts.to_vec()), Mat::from_vec(rows, cols, data), needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let va = &self.vals[a.0];
        let vb = &self.vals[b.0];
        assert_eq!(va.rows(), vb.rows(), "concat_cols height");
        let mut val = Mat::zeros(va.rows(), va.cols() + vb.cols());
        for i in 0..va.rows() {
            val.row_mut(i)[..va.cols()].copy_from_slice(va.row(i));
            val.row_mut(i)[va.cols()..].copy_from_slice(vb.row(i));
        }
        let needs = self.need(a) || self.need(b);
        self.push(Op::ConcatCols(a, b), val, needs)
    }

    /// Row-wise RMS normalization with a learnable per-column gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var) -> Var {
        let va = &self.vals[a.0];
        let vg = &self.vals[gain.0];
        assert_eq!(vg.rows(), 1, "gain must be a row vector");
        assert_eq!(va.cols(), vg.cols(), "gain width");
        let n = va.cols();
        let eps = R::from_f64(RMS_EPS);
        let mut val = Mat::zeros(va.rows(), n);
        for i in 0..va.rows() {
            let x = va.row(i);
            let ms: R = x.iter().map(|&t| t * t).sum::<R>() / R::from_f64(n as f64);
            let r = (ms + eps).sqrt().recip();
            for j in 0..n {
                val.set(i, j, x[j] * r * vg.get(0, j));
            }
        }
        let needs = self.need(a) || self.need(gain);
        self.push(Op::RmsNorm(a, gain), val, needs)
    }

    /// Stop-gradient: value passes through, gradient does not.
    pub fn detach(&mut self, a: Var) -> Var {
        let val = self.vals[a.0].clone();
        self.push(Op::Detach(a), val, false)
    }

    /// Per-row cross-entropy against integer labels; returns an `n×1` column.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let vl = &self.vals[logits.0];
        assert_eq!(vl.rows(), labels.len(), "one label per row");
        let mut out = Mat::zeros(labels.len(), 1);
        for (i, &lab) in labels.iter().enumerate() {
            assert!(lab < vl.cols(), "label out of range");
            let row = vl.row(i);
            let lse = log_sum_exp(row);
            out.set(i, 0, lse - row[lab]);
        }
        let needs = self.need(logits);
        self.push(Op::CrossEntropyRows(logits, labels), out, needs)
    }

    /// Multi-head scaled-dot-product attention over row blocks.
    ///
    /// `q`, `k`, `v` are `(blocks·t × d)`; heads split `d` evenly. Rows attend
    /// within their own block only. Softmax probabilities are retained for the
    /// backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, cfg: AttnCfg) -> Var {
        let (out, probs) = {
            let vq = &self.vals[q.0];
            let vk = &self.vals[k.0];
            let vv = &self.vals[v.0];
            attention_forward(vq, vk, vv, &cfg)
        };
        let needs = self.need(q) || self.need(k) || self.need(v);
        self.push(Op::Attention { q, k, v, cfg, probs }, out, needs)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.vals[loss.0].len(), 1, "backward target must be scalar");
        self.grads[loss.0] = Some(Mat::from_vec(1, 1, vec![R::one()]));
        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_none() || !self.needs[i] {
                continue;
            }
            let g = self.grads[i].take().expect("grad present");
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accum(&mut self, v: Var, delta: Mat<R>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Mat<R>) {
        // Ops are taken by value where they own buffers we need; the borrow
        // checker otherwise fights the `&mut self` accumulation below.
        match &self.ops[i] {
            Op::Leaf | Op::Detach(_) => {}
            &Op::MatMul(a, b) => {
                if self.needs[a.0] {
                    let da = g.matmul_nt(&self.vals[b.0]);
                    self.accum(a, da);
                }
                if self.needs[b.0] {
                    let db = self.vals[a.0].matmul_tn(g);
                    self.accum(b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.map(|x| -x));
            }
            &Op::MulElem(a, b) => {
                if self.needs[a.0] {
                    let vb = &self.vals[b.0];
                    let da = Mat::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                    );
                    self.accum(a, da);
                }
                if self.needs[b.0] {
                    let va = &self.vals[a.0];
                    let db = Mat::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                    );
                    self.accum(b, db);
                }
            }
            &Op::Scale(a, c) => {
                self.accum(a, g.map(|x| x * c));
            }
            &Op::AddRowBroadcast(a, bias) => {
                self.accum(a, g.clone());
                if self.needs[bias.0] {
                    let mut db = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, &x) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    self.accum(bias, db);
                }
            }
            &Op::AddBlockBroadcast(a, block, reps) => {
                self.accum(a, g.clone());
                if self.needs[block.0] {
                    let t = self.vals[block.0].rows();
                    let mut db = Mat::zeros(t, g.cols());
                    for r in 0..reps {
                        for i in 0..t {
                            for (d, &x) in db.row_mut(i).iter_mut().zip(g.row(r * t + i)) {
                                *d += x;
                            }
                        }
                    }
                    self.accum(block, db);
                }
            }
            &Op::Tanh(a) => {
                let y = &self.vals[i];
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gx, &yx)| gx * (R::one() - yx * yx))
                        .collect(),
                );
                self.accum(a, da);
            }
            &Op::Silu(a) => {
                let x = &self.vals[a.0];
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gx, &xv)| {
                            let s = sigmoid(xv);
                            gx * s * (R::one() + xv * (R::one() - s))
                        })
                        .collect(),
                );
                self.accum(a, da);
            }
            &Op::Square(a) => {
                let x = &self.vals[a.0];
                let two = R::from_f64(2.0);
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gx, &xv)| gx * two * xv)
                        .collect(),
                );
                self.accum(a, da);
            }
            &Op::Sum(a) => {
                let gv = g.data()[0];
                let va = &self.vals[a.0];
                self.accum(a, Mat::from_vec(va.rows(), va.cols(), vec![gv; va.len()]));
            }
            Op::GatherRows(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                if self.needs[a.0] {
                    let va = &self.vals[a.0];
                    let mut da = Mat::zeros(va.rows(), va.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (d, &x) in da.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    self.accum(a, da);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let rows = self.vals[p.0].rows();
                    if self.needs[p.0] {
                        let mut dp = Mat::zeros(rows, g.cols());
                        for i in 0..rows {
                            dp.row_mut(i).copy_from_slice(g.row(start + i));
                        }
                        self.accum(p, dp);
                    }
                    start += rows;
                }
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.vals[a.0].cols();
                if self.needs[a.0] {
                    let mut da = Mat::zeros(g.rows(), ca);
                    for i in 0..g.rows() {
                        da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    }
                    self.accum(a, da);
                }
                if self.needs[b.0] {
                    let cb = g.cols() - ca;
                    let mut db = Mat::zeros(g.rows(), cb);
                    for i in 0..g.rows() {
                        db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                    }
                    self.accum(b, db);
                }
            }
            &Op::RmsNorm(a, gain) => {
                let va = &self.vals[a.0];
                let vg = &self.vals[gain.0];
                let n = va.cols();
                let nf = R::from_f64(n as f64);
                let eps = R::from_f64(RMS_EPS);
                let mut da = Mat::zeros(va.rows(), n);
                let mut dg = Mat::zeros(1, n);
                for i in 0..va.rows() {
                    let x = va.row(i);
                    let ms: R = x.iter().map(|&t| t * t).sum::<R>() / nf;
                    let r = (ms + eps).sqrt().recip();
                    let gr = g.row(i);
                    let mut s = R::zero();
                    for j in 0..n {
                        s += gr[j] * vg.get(0, j) * x[j];
                    }
                    let r3n = r * r * r / nf;
                    for j in 0..n {
                        da.set(i, j, gr[j] * vg.get(0, j) * r - r3n * s * x[j]);
                        dg.set(0, j, dg.get(0, j) + gr[j] * x[j] * r);
                    }
                }
                if self.needs[a.0] {
                    self.accum(a, da);
                }
                if self.needs[gain.0] {
                    self.accum(gain, dg);
                }
            }
            Op::CrossEntropyRows(logits, labels) => {
                let (logits, labels) = (*logits, labels.clone());
                if self.needs[logits.0] {
                    let vl = &self.vals[logits.0];
                    let mut dl = Mat::zeros(vl.rows(), vl.cols());
                    for (i, &lab) in labels.iter().enumerate() {
                        let row = vl.row(i);
                        let lse = log_sum_exp(row);
                        let gi = g.get(i, 0);
                        for j in 0..row.len() {
                            let p = (row[j] - lse).exp();
                            let delta = if j == lab { R::one() } else { R::zero() };
                            dl.set(i, j, gi * (p - delta));
                        }
                    }
                    self.accum(logits, dl);
                }
            }
            Op::Attention { q, k, v, cfg, probs } => {
                let (q, k, v, cfg) = (*q, *k, *v, *cfg);
                // probs borrowed immutably while computing, then dropped.
                let (dq, dk, dv) = {
                    let probs: &[Mat<R>] = probs;
                    attention_backward(
                        &self.vals[q.0],
                        &self.vals[k.0],
                        &self.vals[v.0],
                        probs,
                        &cfg,
                        g,
                    )
                };
                if self.needs[q.0] {
                    self.accum(q, dq);
                }
                if self.needs[k.0] {
                    self.accum(k, dk);
                }
                if self.needs[v.0] {
                    self.accum(v, dv);
                }
            }
        }
    }
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let m = row.iter().copied().fold(R::neg_infinity(), R::max);
    let s: R = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Rotate one row in place: half-split rotary position encoding. The
/// incremental decoder shares this with the attention op.
pub fn rope_rotate<R: Real>(row: &mut [R], pos: usize, base: f64, invert: bool) {
    let d = row.len();
    let half = d / 2;
    for i in 0..half {
        let freq = 1.0 / base.powf(2.0 * i as f64 / d as f64);
        let angle = pos as f64 * freq;
        let (sin, cos) = (R::from_f64(angle.sin()), R::from_f64(angle.cos()));
        let sin = if invert { -sin } else { sin };
        let (a, b) = (row[i], row[i + half]);
        row[i] = a * cos - b * sin;
        row[i + half] = a * sin + b * cos;
    }
}

fn attention_forward<R: Real>(
    q: &Mat<R>,
    k: &Mat<R>,
    v: &Mat<R>,
    cfg: &AttnCfg,
) -> (Mat<R>, Vec<Mat<R>>) {
    let rows = q.rows();
    let d = q.cols();
    assert_eq!(k.rows(), rows);
    assert_eq!(v.rows(), rows);
    assert_eq!(rows % cfg.blocks, 0, "rows must tile into blocks");
    assert_eq!(d % cfg.heads, 0, "head split");
    let t = rows / cfg.blocks;
    let dh = d / cfg.heads;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());

    let mut out = Mat::zeros(rows, d);
    let mut probs = Vec::with_capacity(cfg.blocks * cfg.heads);

    for b in 0..cfg.blocks {
        let base_row = b * t;
        for h in 0..cfg.heads {
            let c0 = h * dh;
            // Head slices, rope-rotated where configured.
            let qh = head_slice(q, base_row, t, c0, dh, cfg.rope);
            let kh = head_slice(k, base_row, t, c0, dh, cfg.rope);
            let mut p = Mat::zeros(t, t);
            for i in 0..t {
                let limit = if cfg.causal { i + 1 } else { t };
                let mut mx = R::neg_infinity();
                for j in 0..limit {
                    let s = dot(qh.row(i), kh.row(j)) * scale;
                    p.set(i, j, s);
                    if s > mx {
                        mx = s;
                    }
                }
                let mut denom = R::zero();
                for j in 0..limit {
                    let e = (p.get(i, j) - mx).exp();
                    p.set(i, j, e);
                    denom += e;
                }
                for j in 0..limit {
                    p.set(i, j, p.get(i, j) / denom);
                }
                // entries past `limit` stay exactly zero
            }
            for i in 0..t {
                let limit = if cfg.causal { i + 1 } else { t };
                let orow = out.row_mut(base_row + i);
                for j in 0..limit {
                    let w = p.get(i, j);
                    let vrow = &v.row(base_row + j)[c0..c0 + dh];
                    for (o, &x) in orow[c0..c0 + dh].iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

fn head_slice<R: Real>(
    m: &Mat<R>,
    base_row: usize,
    t: usize,
    c0: usize,
    dh: usize,
    rope: Option<Rope>,
) -> Mat<R> {
    let mut out = Mat::zeros(t, dh);
    for i in 0..t {
        out.row_mut(i).copy_from_slice(&m.row(base_row + i)[c0..c0 + dh]);
        if let Some(r) = rope {
            rope_rotate(out.row_mut(i), r.offset + i, r.base, false);
        }
    }
    out
}

fn attention_backward<R: Real>(
    q: &Mat<R>,
    k: &Mat<R>,
    v: &Mat<R>,
    probs: &[Mat<R>],
    cfg: &AttnCfg,
    g: &Mat<R>,
) -> (Mat<R>, Mat<R>, Mat<R>) {
    let rows = q.rows();
    let d = q.cols();
    let t = rows / cfg.blocks;
    let dh = d / cfg.heads;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());

    let mut dq = Mat::zeros(rows, d);
    let mut dk = Mat::zeros(rows, d);
    let mut dv = Mat::zeros(rows, d);

    for b in 0..cfg.blocks {
        let base_row = b * t;
        for h in 0..cfg.heads {
            let c0 = h * dh;
            let p = &probs[b * cfg.heads + h];
            let qh = head_slice(q, base_row, t, c0, dh, cfg.rope);
            let kh = head_slice(k, base_row, t, c0, dh, cfg.rope);

            // dV and dP
            let mut dp = Mat::zeros(t, t);
            for i in 0..t {
                let grow = &g.row(base_row + i)[c0..c0 + dh];
                for j in 0..t {
                    let w = p.get(i, j);
                    if w != R::zero() {
                        let vrow = &v.row(base_row + j)[c0..c0 + dh];
                        dp.set(i, j, dot(grow, vrow));
                        let dvrow = &mut dv.row_mut(base_row + j)[c0..c0 + dh];
                        for (dvx, &gx) in dvrow.iter_mut().zip(grow) {
                            *dvx += w * gx;
                        }
                    }
                }
            }
            // softmax backward: dS = P ⊙ (dP − Σ_j dP⊙P)
            let mut ds = Mat::zeros(t, t);
            for i in 0..t {
                let mut acc = R::zero();
                for j in 0..t {
                    acc += dp.get(i, j) * p.get(i, j);
                }
                for j in 0..t {
                    let w = p.get(i, j);
                    if w != R::zero() {
                        ds.set(i, j, w * (dp.get(i, j) - acc));
                    }
                }
            }
            // dQh = dS·Kh·scale ; dKh = dSᵀ·Qh·scale (in rotated space)
            let mut dqh = ds.matmul(&kh);
            dqh.scale_assign(scale);
            let mut dkh = ds.matmul_tn(&qh);
            dkh.scale_assign(scale);
            for i in 0..t {
                if let Some(r) = cfg.rope {
                    rope_rotate(dqh.row_mut(i), r.offset + i, r.base, true);
                    rope_rotate(dkh.row_mut(i), r.offset + i, r.base, true);
                }
                for (dst, &x) in dq.row_mut(base_row + i)[c0..c0 + dh].iter_mut().zip(dqh.row(i)) {
                    *dst += x;
                }
                for (dst, &x) in dk.row_mut(base_row + i)[c0..c0 + dh].iter_mut().zip(dkh.row(i)) {
                    *dst += x;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of a scalar-valued graph builder.
    fn numeric_grad<F>(inputs: &mut [Mat<f64>], which: usize, build: F) -> Mat<f64>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let h = 1e-6;
        let mut out = Mat::zeros(inputs[which].rows(), inputs[which].cols());
        for e in 0..inputs[which].len() {
            let orig = inputs[which].data()[e];
            for (sign, store) in [(1.0, true), (-1.0, false)] {
                inputs[which].data_mut()[e] = orig + sign * h;
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
                let loss = build(&mut g, &vars);
                let val = g.scalar(loss);
                if store {
                    out.data_mut()[e] = val;
                } else {
                    out.data_mut()[e] = (out.data_mut()[e] - val) / (2.0 * h);
                }
            }
            inputs[which].data_mut()[e] = orig;
        }
        out
    }

    fn check_grads<F>(inputs: &[Mat<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var + Copy,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss);
        let mut inputs = inputs.to_vec();
        let n = inputs.len();
        for w in 0..n {
            let analytic = g.grad_or_zeros(vars[w]);
            let numeric = numeric_grad(&mut inputs, w, build);
            for e in 0..analytic.len() {
                let a = analytic.data()[e];
                let nv = numeric.data()[e];
                let denom = a.abs().max(nv.abs()).max(1e-8);
                assert!(
                    (a - nv).abs() / denom < tol,
                    "input {w} elem {e}: analytic {a} vs numeric {nv}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::<f64>::randn(3, 4, 1.0, &mut rng);
        let b = Mat::<f64>::randn(4, 2, 1.0, &mut rng);
        check_grads(&[a, b], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let t = g.tanh(m);
            let s = g.square(t);
            g.sum(s)
        }, 1e-5);
    }

    #[test]
    fn grad_rmsnorm_silu_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::<f64>::randn(3, 5, 1.0, &mut rng);
        let gain = Mat::<f64>::randn(1, 5, 0.3, &mut rng).map(|v| v + 1.0);
        let bias = Mat::<f64>::randn(1, 5, 0.5, &mut rng);
        check_grads(&[x, gain, bias], |g, v| {
            let n = g.rms_norm(v[0], v[1]);
            let b = g.add_row_broadcast(n, v[2]);
            let s = g.silu(b);
            let q = g.square(s);
            g.sum(q)
        }, 1e-5);
    }

    #[test]
    fn grad_attention_causal_rope_multihead() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Mat::<f64>::randn(5, 6, 0.7, &mut rng);
        let k = Mat::<f64>::randn(5, 6, 0.7, &mut rng);
        let v = Mat::<f64>::randn(5, 6, 0.7, &mut rng);
        let cfg = AttnCfg {
            heads: 2,
            blocks: 1,
            causal: true,
            rope: Some(Rope { base: 10000.0, offset: 0 }),
        };
        check_grads(&[q, k, v], move |g, vars| {
            let o = g.attention(vars[0], vars[1], vars[2], cfg);
            let s = g.square(o);
            g.sum(s)
        }, 1e-4);
    }

    #[test]
    fn grad_attention_blocks_bidirectional() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Mat::<f64>::randn(8, 4, 0.9, &mut rng);
        let k = Mat::<f64>::randn(8, 4, 0.9, &mut rng);
        let v = Mat::<f64>::randn(8, 4, 0.9, &mut rng);
        let cfg = AttnCfg { heads: 2, blocks: 2, causal: false, rope: None };
        check_grads(&[q, k, v], move |g, vars| {
            let o = g.attention(vars[0], vars[1], vars[2], cfg);
            let s = g.square(o);
            g.sum(s)
        }, 1e-4);
    }

    #[test]
    fn grad_cross_entropy_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = Mat::<f64>::randn(6, 4, 1.0, &mut rng);
        let w = Mat::<f64>::randn(4, 3, 1.0, &mut rng);
        check_grads(&[table, w], |g, v| {
            let x = g.gather_rows(v[0], vec![2, 0, 5, 2]);
            let logits = g.matmul(x, v[1]);
            let ce = g.cross_entropy_rows(logits, vec![0, 2, 1, 1]);
            g.sum(ce)
        }, 1e-5);
    }

    #[test]
    fn grad_concat_block_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Mat::<f64>::randn(4, 3, 1.0, &mut rng);
        let b = Mat::<f64>::randn(4, 2, 1.0, &mut rng);
        let blk = Mat::<f64>::randn(2, 5, 1.0, &mut rng);
        check_grads(&[a, b, blk], |g, v| {
            let c = g.concat_cols(v[0], v[1]);
            let d = g.add_block_broadcast(c, v[2], 2);
            let s = g.square(d);
            g.sum(s)
        }, 1e-5);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Mat::from_vec(1, 2, vec![1.5f64, -0.5]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let d = g.detach(v);
        let s = g.square(d);
        let loss = g.sum(s);
        g.backward(loss);
        assert!(g.grad(v).is_none());

        // straight-through: x + detach(y - x) has identity gradient to x
        let mut g = Graph::new();
        let v = g.param(x);
        let y = g.leaf(Mat::from_vec(1, 2, vec![9.0, 9.0]));
        let diff = g.sub(y, v);
        let sg = g.detach(diff);
        let st = g.add(v, sg);
        assert_eq!(g.value(st).data(), &[9.0, 9.0]);
        let s = g.sum(st);
        g.backward(s);
        assert_eq!(g.grad(v).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn causal_attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = AttnCfg { heads: 1, blocks: 1, causal: true, rope: None };
        let q = Mat::<f64>::randn(4, 4, 1.0, &mut rng);
        let k = Mat::<f64>::randn(4, 4, 1.0, &mut rng);
        let mut v = Mat::<f64>::randn(4, 4, 1.0, &mut rng);
        let (out1, _) = attention_forward(&q, &k, &v, &cfg);
        // perturb the last value row: earlier outputs must not move
        v.set(3, 0, v.get(3, 0) + 100.0);
        let (out2, _) = attention_forward(&q, &k, &v, &cfg);
        for i in 0..3 {
            assert_eq!(out1.row(i), out2.row(i));
        }
        assert_ne!(out1.row(3), out2.row(3));
    }
}
