//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. `Tape::backward` walks the nodes in
//! reverse recording order, so each node that influences the loss is visited
//! exactly once after all of its consumers.
//!
//! The tape also counts floating point operations as it goes: `2·m·n·k` per
//! matrix product and one unit per softmax entry inside attention. The FLOPs
//! model uses this counter as its oracle.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub matmul: u64,
    pub softmax: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.matmul + self.softmax
    }
}

/// Geometry of a fused causal attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        scale: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        heads: usize,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        offset: usize,
        probs: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    flops: FlopCount,
    pub(crate) bound: HashMap<usize, Var>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rotary tables for `positions`: `cos`/`sin` laid out `[row][pair]`.
pub fn rope_tables(positions: &[f64], head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for t in 0..half {
            let freq = base.powf(-2.0 * t as f64 / head_dim as f64);
            let angle = p * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

impl Tape {
    /// A tape that records gradients for leaves created with `requires_grad`.
    pub fn new() -> Self {
        Tape {
            grad_enabled: true,
            ..Default::default()
        }
    }

    /// A tape on which no node requires a gradient.
    pub fn inference() -> Self {
        Tape::default()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = FlopCount::default();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Post-softmax attention weights `[q_heads][n][m]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.flops.matmul += 2 * (m * n * k) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * sigmoid(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Row-wise RMS normalization followed by an elementwise gain.
    pub fn rmsnorm(&mut self, x: Var, scale: Var, eps: f64) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        if eps <= 0.0 {
            return Err(Error::Domain(format!("rmsnorm eps must be positive, got {eps}")));
        }
        let c = tx.cols();
        if ts.numel() != c {
            return Err(dim_err("rmsnorm", tx, ts));
        }
        let rows = tx.numel() / c;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(ts.data()).map(|(v, w)| v * inv * w));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, scale]);
        Ok(self.push(out, Op::RmsNorm { x, scale, inv_rms }, rg))
    }

    /// Rotary embedding of `x` laid out `[n][heads·head_dim]`, rotating the
    /// pairs `(t, t + head_dim/2)` of every head by `position · base^(-2t/head_dim)`.
    pub fn rope(
        &mut self,
        x: Var,
        positions: &[f64],
        heads: usize,
        head_dim: usize,
        base: f64,
    ) -> Result<Var> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary embedding needs an even head dim, got {head_dim}")));
        }
        let tx = self.value(x);
        if tx.cols() != heads * head_dim || tx.rows() != positions.len() {
            return Err(Error::Dimension {
                op: "rope",
                left: tx.shape().to_vec(),
                right: vec![positions.len(), heads * head_dim],
            });
        }
        let (cos, sin) = rope_tables(positions, head_dim, base);
        let half = head_dim / 2;
        let mut out = tx.data().to_vec();
        for (r, row) in out.chunks_mut(heads * head_dim).enumerate() {
            for h in 0..heads {
                let seg = &mut row[h * head_dim..(h + 1) * head_dim];
                for t in 0..half {
                    let (c, s) = (cos[r * half + t], sin[r * half + t]);
                    let (a, b) = (seg[t], seg[t + half]);
                    seg[t] = a * c - b * s;
                    seg[t + half] = a * s + b * c;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                cos,
                sin,
                heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Fused causal multi-head attention `softmax(mask(QKᵀ/√d))V`.
    ///
    /// `q` is `[n][q_heads·d]`; `k` and `v` are `[m][kv_heads·d]` with
    /// `m ≥ n`. The first `m − n` keys are cached context, so query `i`
    /// attends to keys `0..=m−n+i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape {
            q_heads,
            kv_heads,
            head_dim: d,
        } = shape;
        if kv_heads == 0 || q_heads % kv_heads != 0 {
            return Err(Error::Config(format!(
                "query heads {q_heads} not divisible by kv heads {kv_heads}"
            )));
        }
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.cols() != q_heads * d {
            return Err(Error::Config(format!(
                "query width {} does not match {q_heads} heads of dim {d}",
                tq.cols()
            )));
        }
        if tk.cols() != kv_heads * d || tk.shape() != tv.shape() {
            return Err(Error::Config(format!(
                "key/value shapes {:?}/{:?} do not match {kv_heads} kv heads of dim {d}",
                tk.shape(),
                tv.shape()
            )));
        }
        let (n, m) = (tq.rows(), tk.rows());
        if m < n {
            return Err(dim_err("causal_attention", tq, tk));
        }
        let offset = m - n;
        let group = q_heads / kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qw, kw) = (q_heads * d, kv_heads * d);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; q_heads * n * m];
        let mut out = vec![0.0; n * qw];
        let mut scores = vec![0.0; m];
        for h in 0..q_heads {
            let g = h / group;
            for i in 0..n {
                let limit = offset + i;
                let qi = &qd[i * qw + h * d..i * qw + (h + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=limit {
                    let kj = &kd[j * kw + g * d..j * kw + (g + 1) * d];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in &mut scores[..=limit] {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let o = &mut out[i * qw + h * d..i * qw + (h + 1) * d];
                for j in 0..=limit {
                    let pj = scores[j] / z;
                    p[j] = pj;
                    let vj = &vd[j * kw + g * d..j * kw + (g + 1) * d];
                    for (oe, ve) in o.iter_mut().zip(vj) {
                        *oe += pj * ve;
                    }
                }
            }
        }
        let hnm = (q_heads * n * m) as u64;
        self.flops.matmul += 4 * hnm * d as u64;
        self.flops.softmax += hnm;
        let out = Tensor::new(vec![n, qw], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                offset,
                probs,
            },
            rg,
        ))
    }

    /// Row softmax over the entries allowed by `keep` (row-major, same shape as `x`).
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if let Some(keep) = keep {
            if keep.len() != tx.numel() {
                return Err(Error::Dimension {
                    op: "softmax mask",
                    left: tx.shape().to_vec(),
                    right: vec![keep.len()],
                });
            }
        }
        let mut out = vec![0.0; tx.numel()];
        for (r, row) in tx.data().chunks(c).enumerate() {
            let allowed = |j: usize| keep.is_none_or(|k| k[r * c + j]);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain(format!("softmax row {r} is fully masked")));
            }
            let mut z = 0.0;
            for j in (0..c).filter(|&j| allowed(j)) {
                let e = (row[j] - max).exp();
                out[r * c + j] = e;
                z += e;
            }
            for v in &mut out[r * c..(r + 1) * c] {
                *v /= z;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Mean token negative log-likelihood of `targets` under row-softmaxed `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                index: bad,
                bound: vocab,
            });
        }
        let mut probs = vec![0.0; n * vocab];
        let mut loss = 0.0;
        for (r, row) in tl.data().chunks(vocab).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            loss += z.ln() + max - row[targets[r]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(dim_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Averages consecutive groups of `group` rows; the last group keeps the remainder.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 0 {
            return Err(Error::Config("group length must be at least 1".into()));
        }
        let tx = self.value(x);
        let (n, c) = (tx.rows(), tx.cols());
        let groups = n.div_ceil(group);
        let mut out = vec![0.0; groups * c];
        for (g, o) in out.chunks_mut(c).enumerate() {
            let (start, end) = (g * group, ((g + 1) * group).min(n));
            for r in start..end {
                for (oe, xe) in o.iter_mut().zip(tx.row(r)) {
                    *oe += xe;
                }
            }
            let size = (end - start) as f64;
            for oe in o.iter_mut() {
                *oe /= size;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![groups, c], out)?, Op::GroupMean { x, group }, rg))
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, c) = (tt.rows(), tt.cols());
        if ids.is_empty() {
            return Err(Error::Usage("gather of no rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, bound: rows });
            }
            data.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // The op is taken out so its saved state can be read while child
        // gradient buffers are borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let bd = self.value(*b).data().to_vec();
                    let ga = self.grad_buf(*a).unwrap();
                    gemm(m, n, k, g, false, &bd, true, ga, true);
                }
                if self.requires_grad(*b) {
                    let ad = self.value(*a).data().to_vec();
                    let gb = self.grad_buf(*b).unwrap();
                    gemm(k, m, n, &ad, true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.grad_buf(v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bd = self.value(*b).data().to_vec();
                    let ga = self.grad_buf(*a).unwrap();
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(&bd) {
                        *x += y * z;
                    }
                }
                if self.requires_grad(*b) {
                    let ad = self.value(*a).data().to_vec();
                    let gb = self.grad_buf(*b).unwrap();
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(&ad) {
                        *x += y * z;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::Silu(a) => {
                if self.requires_grad(*a) {
                    let ad = self.value(*a).data().to_vec();
                    let ga = self.grad_buf(*a).unwrap();
                    for ((x, y), &z) in ga.iter_mut().zip(g).zip(&ad) {
                        let s = sigmoid(z);
                        *x += y * s * (1.0 + z * (1.0 - s));
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_buf(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let xd = self.value(*x).data().to_vec();
                let wd = self.value(*scale).data().to_vec();
                let c = wd.len();
                if let Some(gw) = self.grad_buf(*scale) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..c {
                            gw[j] += g[r * c + j] * xd[r * c + j] * inv;
                        }
                    }
                }
                if let Some(gx) = self.grad_buf(*x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let dot: f64 = g[row.clone()]
                            .iter()
                            .zip(&wd)
                            .zip(&xd[row.clone()])
                            .map(|((gg, w), xx)| gg * w * xx)
                            .sum();
                        let k = inv * inv * inv * dot / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += g[r * c + j] * wd[j] * inv - xd[r * c + j] * k;
                        }
                    }
                }
            }
            Op::Rope {
                x,
                cos,
                sin,
                heads,
                head_dim,
            } => {
                if let Some(gx) = self.grad_buf(*x) {
                    let half = head_dim / 2;
                    let width = heads * head_dim;
                    for (r, (grow, gin)) in gx.chunks_mut(width).zip(g.chunks(width)).enumerate() {
                        for h in 0..*heads {
                            let base = h * head_dim;
                            for t in 0..half {
                                let (c, s) = (cos[r * half + t], sin[r * half + t]);
                                let (ga, gb) = (gin[base + t], gin[base + t + half]);
                                grow[base + t] += ga * c + gb * s;
                                grow[base + t + half] += -ga * s + gb * c;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                offset,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, *offset, probs, g),
            Op::Softmax(x) => {
                let y = self.value(Var(i)).data().to_vec();
                let c = self.value(Var(i)).cols();
                if let Some(gx) = self.grad_buf(*x) {
                    for r in 0..y.len() / c {
                        let row = r * c..(r + 1) * c;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = probs.len() / targets.len();
                let coef = g[0] / targets.len() as f64;
                if let Some(gl) = self.grad_buf(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * vocab + j] += coef * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = self.grad_buf(p) {
                        gp.iter_mut().zip(&g[at..at + n]).for_each(|(x, y)| *x += y);
                    }
                    at += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                if let Some(gx) = self.grad_buf(*x) {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::GroupMean { x, group } => {
                let (n, c) = (self.value(*x).rows(), self.value(*x).cols());
                if let Some(gx) = self.grad_buf(*x) {
                    for r in 0..n {
                        let gi = r / group;
                        let size = ((gi + 1) * group).min(n) - gi * group;
                        for j in 0..c {
                            gx[r * c + j] += g[gi * c + j] / size as f64;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = self.value(*table).cols();
                if let Some(gt) = self.grad_buf(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[r * c + j];
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        offset: usize,
        probs: &[f64],
        g: &[f64],
    ) {
        let AttentionShape {
            q_heads,
            kv_heads,
            head_dim: d,
        } = shape;
        let group = q_heads / kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (n, m) = (self.value(q).rows(), self.value(k).rows());
        let (qw, kw) = (q_heads * d, kv_heads * d);
        let qd = self.value(q).data().to_vec();
        let kd = self.value(k).data().to_vec();
        let vd = self.value(v).data().to_vec();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; m];
        for h in 0..q_heads {
            let gk = h / group;
            for i in 0..n {
                let limit = offset + i;
                let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                let gi = &g[i * qw + h * d..i * qw + (h + 1) * d];
                let mut dot = 0.0;
                for j in 0..=limit {
                    let vj = &vd[j * kw + gk * d..j * kw + (gk + 1) * d];
                    let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[j] = dp;
                    dot += p[j] * dp;
                    let dvj = &mut dv[j * kw + gk * d..j * kw + (gk + 1) * d];
                    for (x, y) in dvj.iter_mut().zip(gi) {
                        *x += p[j] * y;
                    }
                }
                let qi = &qd[i * qw + h * d..i * qw + (h + 1) * d];
                let dqi = &mut dq[i * qw + h * d..i * qw + (h + 1) * d];
                for j in 0..=limit {
                    let s = p[j] * (ds[j] - dot) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &kd[j * kw + gk * d..j * kw + (gk + 1) * d];
                    for (x, y) in dqi.iter_mut().zip(kj) {
                        *x += s * y;
                    }
                    let dkj = &mut dk[j * kw + gk * d..j * kw + (gk + 1) * d];
                    for (x, y) in dkj.iter_mut().zip(qi) {
                        *x += s * y;
                    }
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = self.grad_buf(var) {
                buf.iter_mut().zip(&grad).for_each(|(x, y)| *x += y);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::eye(2));
        let b = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(mat(&[vec![1.0, 2.0]]));
        let b = t.constant(mat(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![0.0, 0.0]]));
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(mat(&[vec![1000.0, 1000.0]]));
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(mat(&[vec![0.0, 0.0, 0.0]]));
        let y = t.softmax(x, Some(&[true, true, false])).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.0]);

        assert!(matches!(t.softmax(x, Some(&[false, false, false])), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3, 4]));
        let l = t.cross_entropy(z, &[0, 3, 1]).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[2, 4]);
        logits.data_mut()[1] = 20.0;
        logits.data_mut()[4 + 2] = 20.0;
        let x = t.constant(logits);
        let l = t.cross_entropy(x, &[1, 2]).unwrap();
        assert!(t.value(l).item() < 1e-8);

        assert!(matches!(t.cross_entropy(x, &[1, 4]), Err(Error::Index { index: 4, bound: 4 })));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let w = mat(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
        let mut t = Tape::new();
        let v = t.leaf(w.clone(), true);
        let s = t.sum(v);
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[1.0; 4]);

        let mut t = Tape::new();
        let v = t.leaf(w.clone(), true);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        assert_eq!(t.grad(v).unwrap(), w.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(t.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::filled(&[1, 2], 1.0), true);
        let b = t.leaf(Tensor::filled(&[1, 2], 1.0), true);
        let s = t.sum(a);
        t.backward(s).unwrap();
        assert!(t.grad(b).is_none());
    }

    #[test]
    fn group_mean_remainder() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]]));
        let y = t.group_mean(x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[1.5, 3.5, 5.0]);
        assert!(t.group_mean(x, 0).is_err());
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut t = Tape::inference();
        let a = t.leaf(Tensor::filled(&[1, 2], 1.0), true);
        assert!(!t.requires_grad(a));
    }
}
