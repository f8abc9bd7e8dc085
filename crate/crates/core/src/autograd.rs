//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constant inputs or parameters identified by `(store tag, index)`;
//! [`Graph::backward`] returns the gradients of the parameter leaves only.
//! [`Graph::detach`] copies a value into a new leaf that never propagates
//! gradient, which is how one-sided losses are expressed.
//!
//! Recurrent layers and attention are fused ops with hand-written backward
//! passes; everything else is elementwise or a matrix product.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{expf, lnf, sigmoidf, sqrtf, tanhf};
use crate::rng::SeededRng;
use crate::tensor::{axpy, dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Identifies a parameter: which store it lives in, and its index there.
pub type ParamKey = (u8, usize);

struct LstmCache {
    x: Var,
    wx: Var,
    wh: Var,
    bias: Var,
    lengths: Vec<usize>,
    batch: usize,
    hidden: usize,
    reverse: bool,
    /// Activated gates `[i f g o]`, one row per (t, b).
    gates: Matrix,
    cell_tanh: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    lengths: Vec<usize>,
    seq_len: usize,
    heads: usize,
    /// One `seq_len × seq_len` probability block per (batch, head).
    probs: Vec<Matrix>,
}

enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f32>,
    },
    LogSoftmax(Var),
    Dropout(Var, Vec<f32>),
    MaskedTimeMean {
        x: Var,
        lengths: Vec<usize>,
    },
    Lstm(Box<LstmCache>),
    Attention(Box<AttentionCache>),
    /// Scalar loss whose gradient w.r.t. `input` was computed in the forward pass.
    Precomputed {
        input: Var,
        grad: Matrix,
    },
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: SeededRng,
}

/// Gradients of parameter leaves, keyed by [`ParamKey`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Matrix> {
        self.map.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Matrix)> {
        self.map.iter()
    }

    pub fn for_store(&self, tag: u8) -> impl Iterator<Item = (usize, &Matrix)> {
        self.map
            .iter()
            .filter(move |((t, _), _)| *t == tag)
            .map(|((_, i), m)| (*i, m))
    }

    pub fn global_norm(&self) -> f64 {
        crate::math::sqrt(self.map.values().map(Matrix::sum_sq).sum::<f64>())
    }

    /// Rescale so the global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = (max_norm / norm) as f32;
            for m in self.map.values_mut() {
                m.scale_assign(s);
            }
        }
        norm
    }

    /// Merge `other` into `self`, scaled by `weight`.
    pub fn accumulate(&mut self, other: &Gradients, weight: f32) {
        for (k, m) in &other.map {
            let mut m = m.clone();
            m.scale_assign(weight);
            match self.map.get_mut(k) {
                Some(acc) => acc.add_assign(&m),
                None => {
                    self.map.insert(*k, m);
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl Graph {
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            training,
            rng: SeededRng::new(seed),
        }
    }

    /// Inference graph: dropout disabled.
    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by tape op");
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, key: ParamKey, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(key), true)
    }

    /// Same value, no gradient flows back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x + bias` with a `1 × d` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            axpy(1.0, b.data(), value.row_mut(r));
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRow(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let mut value = self.value(x).clone();
        value.scale_assign(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let v = self.value(x);
        let value = Matrix::from_vec(v.rows(), v.cols(), v.data().iter().map(|&a| f(a)).collect());
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoidf, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, tanhf, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat row mismatch");
                let w = src.cols();
                value.row_mut(r)[off..off + w].copy_from_slice(src.row(r));
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let src = self.value(x);
        let mut value = Matrix::zeros(src.rows(), width);
        for r in 0..src.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + width]);
        }
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start), rg)
    }

    /// Rows of `table` selected by `indices` (embedding lookup / row selection).
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let src = self.value(table);
        let mut value = Matrix::zeros(indices.len(), src.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(src.row(i));
        }
        let rg = self.rg(table);
        self.push(value, Op::Gather(table, indices.to_vec()), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f32 = 1e-5;
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / sqrtf(var + EPS);
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                value.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let s: f32 = row.iter().map(|&v| expf(v - max)).sum();
            let lse = max + lnf(s);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Inverted dropout; identity outside training or at `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).data().len();
        let mask: Vec<f32> = (0..n)
            .map(|_| {
                if (self.rng.uniform() as f32) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data);
        let rg = self.rg(x);
        self.push(value, Op::Dropout(x, mask), rg)
    }

    /// Mean over the first `lengths[b]` time steps of a time-major
    /// `(T·B) × H` matrix, giving `B × H`.
    pub fn masked_time_mean(&mut self, x: Var, lengths: &[usize]) -> Var {
        let batch = lengths.len();
        let src = self.value(x);
        assert_eq!(
            src.rows() % batch,
            0,
            "time-major rows not divisible by batch"
        );
        let steps = src.rows() / batch;
        let mut value = Matrix::zeros(batch, src.cols());
        for (b, &len) in lengths.iter().enumerate() {
            assert!(len >= 1 && len <= steps, "sequence length out of range");
            let inv = 1.0 / len as f32;
            for t in 0..len {
                axpy(inv, src.row(t * batch + b), value.row_mut(b));
            }
        }
        let rg = self.rg(x);
        self.push(
            value,
            Op::MaskedTimeMean {
                x,
                lengths: lengths.to_vec(),
            },
            rg,
        )
    }

    /// One direction of an LSTM over a padded, time-major batch.
    ///
    /// `x` is `(T·B) × in`; `wx` is `in × 4H`, `wh` is `H × 4H`, `bias` is
    /// `1 × 4H` with gate blocks ordered input, forget, cell, output. Output
    /// rows past a sequence's length are zero. A reverse pass starts each
    /// sequence at its own last frame.
    pub fn lstm(
        &mut self,
        x: Var,
        wx: Var,
        wh: Var,
        bias: Var,
        lengths: &[usize],
        reverse: bool,
    ) -> Var {
        let batch = lengths.len();
        let hidden = self.value(wh).rows();
        let g4 = 4 * hidden;
        let xin = self.value(x);
        let steps = xin.rows() / batch;
        let mut xp = xin.matmul(self.value(wx));
        let bvec = self.value(bias);
        for r in 0..xp.rows() {
            axpy(1.0, bvec.data(), xp.row_mut(r));
        }
        let w_h = self.value(wh);

        let rows = steps * batch;
        let mut gates = Matrix::zeros(rows, g4);
        let mut cell_tanh = Matrix::zeros(rows, hidden);
        let mut h_prev_all = Matrix::zeros(rows, hidden);
        let mut c_prev_all = Matrix::zeros(rows, hidden);
        let mut out = Matrix::zeros(rows, hidden);
        let mut h = Matrix::zeros(batch, hidden);
        let mut c = Matrix::zeros(batch, hidden);
        let mut pre = Matrix::zeros(batch, g4);

        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            for b in 0..batch {
                pre.row_mut(b).copy_from_slice(xp.row(t * batch + b));
            }
            gemm_acc(&h, w_h, &mut pre);
            for (b, &len) in lengths.iter().enumerate() {
                if t >= len {
                    continue;
                }
                let r = t * batch + b;
                h_prev_all.row_mut(r).copy_from_slice(h.row(b));
                c_prev_all.row_mut(r).copy_from_slice(c.row(b));
                let p = pre.row(b);
                let gr = gates.row_mut(r);
                for j in 0..hidden {
                    gr[j] = sigmoidf(p[j]);
                    gr[hidden + j] = sigmoidf(p[hidden + j]);
                    gr[2 * hidden + j] = tanhf(p[2 * hidden + j]);
                    gr[3 * hidden + j] = sigmoidf(p[3 * hidden + j]);
                }
                for j in 0..hidden {
                    let (i, f, g, o) = (
                        gr[j],
                        gr[hidden + j],
                        gr[2 * hidden + j],
                        gr[3 * hidden + j],
                    );
                    let cn = f * c.get(b, j) + i * g;
                    let ct = tanhf(cn);
                    c.set(b, j, cn);
                    cell_tanh.set(r, j, ct);
                    let hn = o * ct;
                    h.set(b, j, hn);
                    out.set(r, j, hn);
                }
            }
        }

        let rg = self.rg(x) || self.rg(wx) || self.rg(wh) || self.rg(bias);
        let cache = LstmCache {
            x,
            wx,
            wh,
            bias,
            lengths: lengths.to_vec(),
            batch,
            hidden,
            reverse,
            gates,
            cell_tanh,
            h_prev: h_prev_all,
            c_prev: c_prev_all,
        };
        self.push(out, Op::Lstm(Box::new(cache)), rg)
    }

    /// Multi-head scaled dot-product self-attention over a batch-major
    /// `(B·L) × W` layout. Keys at positions `>= lengths[b]` are masked out.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lengths: &[usize], heads: usize) -> Var {
        let batch = lengths.len();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let width = qm.cols();
        assert_eq!(width % heads, 0, "width not divisible by heads");
        let dh = width / heads;
        let seq_len = qm.rows() / batch;
        let scale = 1.0 / sqrtf(dh as f32);
        let mut out = Matrix::zeros(qm.rows(), width);
        let mut probs = Vec::with_capacity(batch * heads);
        for (b, &len) in lengths.iter().enumerate() {
            assert!(len >= 1 && len <= seq_len, "attention length out of range");
            for hd in 0..heads {
                let off = hd * dh;
                let mut p = Matrix::zeros(seq_len, seq_len);
                for i in 0..seq_len {
                    let qi = &qm.row(b * seq_len + i)[off..off + dh];
                    let prow = p.row_mut(i);
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..len {
                        let s = dot(qi, &km.row(b * seq_len + j)[off..off + dh]) * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for pj in prow.iter_mut().take(len) {
                        *pj = expf(*pj - max);
                        sum += *pj;
                    }
                    for pj in prow.iter_mut().take(len) {
                        *pj /= sum;
                    }
                    let orow = &mut out.row_mut(b * seq_len + i)[off..off + dh];
                    for j in 0..len {
                        axpy(prow[j], &vm.row(b * seq_len + j)[off..off + dh], orow);
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            lengths: lengths.to_vec(),
            seq_len,
            heads,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), rg)
    }

    /// Mean softmax cross-entropy of `B × C` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lg = self.value(logits);
        assert_eq!(lg.rows(), targets.len(), "one target per row");
        let n = targets.len() as f64;
        let mut grad = Matrix::zeros(lg.rows(), lg.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row: Vec<f64> = lg.row(r).iter().map(|&v| f64::from(v)).collect();
            let (l, g) = crate::loss::softmax_cross_entropy(&row, t);
            total += l;
            for (dst, src) in grad.row_mut(r).iter_mut().zip(g) {
                *dst = (src / n) as f32;
            }
        }
        let rg = self.rg(logits);
        self.push(
            Matrix::scalar((total / n) as f32),
            Op::Precomputed {
                input: logits,
                grad,
            },
            rg,
        )
    }

    /// Mean CTC loss over a batch of time-major `(T·B) × U` log-probabilities.
    ///
    /// Each entry of `targets` must be feasible for its length; callers filter
    /// infeasible utterances beforehand.
    pub fn ctc(
        &mut self,
        log_probs: Var,
        lengths: &[usize],
        targets: &[Vec<usize>],
        blank: usize,
    ) -> Result<Var, crate::loss::CtcError> {
        let lp = self.value(log_probs);
        let batch = lengths.len();
        let units = lp.cols();
        let mut grad = Matrix::zeros(lp.rows(), units);
        let mut total = 0.0;
        let mut buf = Vec::new();
        for b in 0..batch {
            buf.clear();
            for t in 0..lengths[b] {
                buf.extend(lp.row(t * batch + b).iter().map(|&v| f64::from(v)));
            }
            let out = crate::loss::ctc_loss(&buf, units, &targets[b], blank)?;
            total += out.loss;
            for t in 0..lengths[b] {
                let dst = grad.row_mut(t * batch + b);
                for u in 0..units {
                    dst[u] = (out.grad[t * units + u] / batch as f64) as f32;
                }
            }
        }
        let rg = self.rg(log_probs);
        Ok(self.push(
            Matrix::scalar((total / batch as f64) as f32),
            Op::Precomputed {
                input: log_probs,
                grad,
            },
            rg,
        ))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = va.data().len().max(1) as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| {
                let d = f64::from(x - y);
                d * d
            })
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Matrix::scalar((s / n) as f32), Op::Mse(a, b), rg)
    }

    /// `Σ wᵢ · termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total: f32 = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Back-propagate from a scalar node; returns gradients of every parameter
    /// leaf the loss depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_op(node, &dy, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(
        &self,
        node: &Node,
        dy: &Matrix,
        grads: &mut [Option<Matrix>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => match out.map.get_mut(key) {
                Some(m) => m.add_assign(dy),
                None => {
                    out.map.insert(*key, dy.clone());
                }
            },
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let mut da = Matrix::zeros(self.value(*a).rows(), self.value(*a).cols());
                    gemm_nt_acc(dy, self.value(*b), &mut da);
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = Matrix::zeros(self.value(*b).rows(), self.value(*b).cols());
                    gemm_tn_acc(self.value(*a), dy, &mut db);
                    self.acc(grads, *b, db);
                }
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *bias, dy.col_sums());
                self.acc(grads, *x, dy.clone());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = zip_map(dy, vb, |g, y| g * y);
                let db = zip_map(dy, va, |g, x| g * x);
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale(x, s) => {
                let mut d = dy.clone();
                d.scale_assign(*s);
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(dy, &node.value, |g, y| g * y * (1.0 - y));
                self.acc(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(dy, &node.value, |g, y| g * (1.0 - y * y));
                self.acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = zip_map(dy, self.value(*x), |g, a| g * gelu_grad(a));
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Matrix::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            d.row_mut(r).copy_from_slice(&dy.row(r)[off..off + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                let w = dy.cols();
                for r in 0..dy.rows() {
                    d.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                }
                self.acc(grads, *x, d);
            }
            Op::Gather(table, indices) => {
                let src = self.value(*table);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in indices.iter().enumerate() {
                    axpy(1.0, dy.row(r), d.row_mut(i));
                }
                self.acc(grads, *table, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let g = self.value(*gamma);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (dyr, xh) = (dy.row(r), xhat.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let dxh = dyr[c] * g.get(0, c);
                        mean_d += dxh;
                        mean_dx += dxh * xh[c];
                        dgamma.data_mut()[c] += dyr[c] * xh[c];
                        dbeta.data_mut()[c] += dyr[c];
                    }
                    mean_d /= cols as f32;
                    mean_dx /= cols as f32;
                    let dxr = dx.row_mut(r);
                    for c in 0..cols {
                        let dxh = dyr[c] * g.get(0, c);
                        dxr[c] = rstd[r] * (dxh - mean_d - xh[c] * mean_dx);
                    }
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
                self.acc(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f32 = dy.row(r).iter().sum();
                    let (yr, dyr) = (y.row(r), dy.row(r));
                    for (c, v) in d.row_mut(r).iter_mut().enumerate() {
                        *v = dyr[c] - expf(yr[c]) * s;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Dropout(x, mask) => {
                let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc(grads, *x, Matrix::from_vec(dy.rows(), dy.cols(), data));
            }
            Op::MaskedTimeMean { x, lengths } => {
                let src = self.value(*x);
                let batch = lengths.len();
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (b, &len) in lengths.iter().enumerate() {
                    let inv = 1.0 / len as f32;
                    for t in 0..len {
                        axpy(inv, dy.row(b), d.row_mut(t * batch + b));
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Lstm(cache) => self.backward_lstm(cache, dy, grads),
            Op::Attention(cache) => self.backward_attention(cache, dy, grads),
            Op::Precomputed { input, grad } => {
                let mut d = grad.clone();
                d.scale_assign(dy.item());
                self.acc(grads, *input, d);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let n = va.data().len().max(1) as f32;
                let k = 2.0 * dy.item() / n;
                let da = zip_map(va, vb, |x, y| k * (x - y));
                if self.rg(*b) {
                    let mut db = da.clone();
                    db.scale_assign(-1.0);
                    self.acc(grads, *b, db);
                }
                self.acc(grads, *a, da);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v, Matrix::scalar(w * dy.item()));
                }
            }
        }
    }

    fn backward_lstm(&self, cache: &LstmCache, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let (batch, hidden) = (cache.batch, cache.hidden);
        let g4 = 4 * hidden;
        let rows = dy.rows();
        let steps = rows / batch;
        let w_h = self.value(cache.wh);
        let mut dxp = Matrix::zeros(rows, g4);
        let mut dwh = Matrix::zeros(hidden, g4);
        let mut dh_next = Matrix::zeros(batch, hidden);
        let mut dc_next = Matrix::zeros(batch, hidden);
        let mut dgates = Matrix::zeros(batch, g4);
        let mut hprev_step = Matrix::zeros(batch, hidden);

        for s in (0..steps).rev() {
            let t = if cache.reverse { steps - 1 - s } else { s };
            dgates.data_mut().iter_mut().for_each(|v| *v = 0.0);
            hprev_step.data_mut().iter_mut().for_each(|v| *v = 0.0);
            for (b, &len) in cache.lengths.iter().enumerate() {
                if t >= len {
                    continue;
                }
                let r = t * batch + b;
                let gr = cache.gates.row(r);
                let dg = dgates.row_mut(b);
                for j in 0..hidden {
                    let (i, f, g, o) = (
                        gr[j],
                        gr[hidden + j],
                        gr[2 * hidden + j],
                        gr[3 * hidden + j],
                    );
                    let ct = cache.cell_tanh.get(r, j);
                    let dh = dy.get(r, j) + dh_next.get(b, j);
                    let d_o = dh * ct;
                    let dc = dh * o * (1.0 - ct * ct) + dc_next.get(b, j);
                    let di = dc * g;
                    let dgg = dc * i;
                    let df = dc * cache.c_prev.get(r, j);
                    dc_next.set(b, j, dc * f);
                    dg[j] = di * i * (1.0 - i);
                    dg[hidden + j] = df * f * (1.0 - f);
                    dg[2 * hidden + j] = dgg * (1.0 - g * g);
                    dg[3 * hidden + j] = d_o * o * (1.0 - o);
                }
                dxp.row_mut(r).copy_from_slice(dgates.row(b));
                hprev_step.row_mut(b).copy_from_slice(cache.h_prev.row(r));
            }
            gemm_tn_acc(&hprev_step, &dgates, &mut dwh);
            let mut dh_prev = Matrix::zeros(batch, hidden);
            gemm_nt_acc(&dgates, w_h, &mut dh_prev);
            for (b, &len) in cache.lengths.iter().enumerate() {
                if t >= len {
                    // Inactive rows carry their state unchanged.
                    dh_prev.row_mut(b).copy_from_slice(dh_next.row(b));
                }
            }
            dh_next = dh_prev;
        }

        if self.rg(cache.x) {
            let mut dx = Matrix::zeros(rows, self.value(cache.x).cols());
            gemm_nt_acc(&dxp, self.value(cache.wx), &mut dx);
            self.acc(grads, cache.x, dx);
        }
        if self.rg(cache.wx) {
            let xin = self.value(cache.x);
            let mut dwx = Matrix::zeros(xin.cols(), g4);
            gemm_tn_acc(xin, &dxp, &mut dwx);
            self.acc(grads, cache.wx, dwx);
        }
        self.acc(grads, cache.bias, dxp.col_sums());
        self.acc(grads, cache.wh, dwh);
    }

    fn backward_attention(
        &self,
        cache: &AttentionCache,
        dy: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (
            self.value(cache.q),
            self.value(cache.k),
            self.value(cache.v),
        );
        let width = qm.cols();
        let dh = width / cache.heads;
        let n = cache.seq_len;
        let scale = 1.0 / sqrtf(dh as f32);
        let mut dq = Matrix::zeros(qm.rows(), width);
        let mut dk = Matrix::zeros(km.rows(), width);
        let mut dv = Matrix::zeros(vm.rows(), width);
        let mut dp = vec![0.0f32; n];
        for (b, &len) in cache.lengths.iter().enumerate() {
            for hd in 0..cache.heads {
                let off = hd * dh;
                let p = &cache.probs[b * cache.heads + hd];
                for i in 0..n {
                    let dout = &dy.row(b * n + i)[off..off + dh];
                    let prow = p.row(i);
                    let mut sum = 0.0;
                    for j in 0..len {
                        dp[j] = dot(dout, &vm.row(b * n + j)[off..off + dh]);
                        sum += dp[j] * prow[j];
                        axpy(prow[j], dout, &mut dv.row_mut(b * n + j)[off..off + dh]);
                    }
                    for j in 0..len {
                        let ds = prow[j] * (dp[j] - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(
                            ds,
                            &km.row(b * n + j)[off..off + dh],
                            &mut dq.row_mut(b * n + i)[off..off + dh],
                        );
                        axpy(
                            ds,
                            &qm.row(b * n + i)[off..off + dh],
                            &mut dk.row_mut(b * n + j)[off..off + dh],
                        );
                    }
                }
            }
        }
        self.acc(grads, cache.q, dq);
        self.acc(grads, cache.k, dk);
        self.acc(grads, cache.v, dv);
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f32, f32) -> f32) -> Matrix {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

const GELU_C: f32 = 0.797_884_6;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanhf(GELU_C * (x + 0.044_715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let t = tanhf(GELU_C * (x + 0.044_715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}
