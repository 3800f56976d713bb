//! Reverse-mode tape over [`Array`] values.
//!
//! Every primitive appends one node holding its forward value and whatever
//! it needs to replay the adjoint. Nodes are created in topological order,
//! so [`Tape::backward`] walks the node list from the end. A node requires
//! a gradient iff one of its inputs does; subgraphs built purely from
//! constants are never visited on the way back.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::array::Array;
use super::kernels;
use crate::{Error, Result, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        heads: usize,
        positions: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Range<usize>>,
        // per segment, per head: len×len row-stochastic matrix (upper triangle zero)
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Kl {
        q: Var,
        mask: Vec<bool>,
        p_probs: Vec<T>,
        q_probs: Vec<T>,
        count: usize,
    },
    L2 {
        a: Var,
        b: Var,
        mask: Option<Vec<bool>>,
    },
    Concat(Vec<Var>),
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner operation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: one accumulated gradient per node that
/// required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Array<T>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Array::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Borrowed view of the raw gradient buffer.
    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_mask(op: &'static str, rows: usize, mask: &[bool]) -> Result<usize> {
    if mask.len() != rows {
        return Err(shape_err(op, &[rows], &[mask.len()]));
    }
    Ok(mask.iter().filter(|&&m| m).count())
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(shape_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Array::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let value = self.nodes[a.0].value.transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        self.same_shape(a, b, op)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * kernels::sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.dims2(x, "rms_norm")?;
        let gs = self.nodes[gain.0].value.shape();
        if gs != [d] {
            return Err(shape_err("rms_norm", &[rows, d], gs));
        }
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data();
        let mut out = vec![T::zero(); rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * g[j];
            }
        }
        let value = Array::new(vec![rows, d], out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Rotary position embedding applied to each head of `x: [T, d]`.
    /// Pairs are adjacent lanes `(2i, 2i+1)` within a head.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(x, "rope")?;
        if heads == 0 || d % heads != 0 || !(d / heads).is_multiple_of(2) || positions.len() != rows {
            return Err(shape_err("rope", &[rows, d], &[positions.len(), heads]));
        }
        let hd = d / heads;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); rows * d];
        for (r, &pos) in positions.iter().enumerate() {
            for h in 0..heads {
                for p in 0..hd / 2 {
                    let (c, s) = kernels::rope_angle::<T>(pos, p, hd);
                    let i = r * d + h * hd + 2 * p;
                    let (x0, x1) = (xv[i], xv[i + 1]);
                    out[i] = x0 * c - x1 * s;
                    out[i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let value = Array::new(vec![rows, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                heads,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// Causal multi-head scaled dot-product attention. Rows are grouped into
    /// independent sequences by `segments`; a row attends to rows of its own
    /// segment at or before its position.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Range<usize>]) -> Result<Var> {
        let (rows, d) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", &[rows, d], &[heads]));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.end < s.start {
                return Err(shape_err("attention segments", &[rows], &[s.start, s.end]));
            }
            covered = s.end;
        }
        if covered != rows {
            return Err(shape_err("attention segments", &[rows], &[covered]));
        }
        let hd = d / heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let (qv, kv, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::new();
        for seg in segments {
            let len = seg.end - seg.start;
            for h in 0..heads {
                let off = h * hd;
                let base = probs.len();
                probs.resize(base + len * len, T::zero());
                for i in 0..len {
                    let qi = &qv[(seg.start + i) * d + off..][..hd];
                    let prow = &mut probs[base + i * len..base + i * len + i + 1];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kv[(seg.start + j) * d + off..][..hd];
                        *pj = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
                    }
                    kernels::softmax_row(prow);
                    let orow = &mut out[(seg.start + i) * d + off..][..hd];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vv[(seg.start + j) * d + off..][..hd];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + pj * x;
                        }
                    }
                }
            }
        }
        let value = Array::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Row gather from `table: [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(alloc::format!(
                "token id {bad} out of range for vocab {vocab}"
            )));
        }
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Array::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "softmax_cross_entropy")?;
        let count = check_mask("softmax_cross_entropy", rows, mask)?;
        if targets.len() != rows {
            return Err(shape_err("softmax_cross_entropy", &[rows], &[targets.len()]));
        }
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut logp = vec![T::zero(); vocab];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Input(alloc::format!(
                    "target {t} out of range for vocab {vocab}"
                )));
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            kernels::log_softmax_row(row, &mut logp);
            total = total - logp[t];
            for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let value = Array::scalar(total / T::lit(count as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean over masked rows of `KL(softmax(p) ‖ softmax(q))`. The `p` side is
    /// a fixed reference: no gradient is propagated into it.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape(p_logits, q_logits, "kl_divergence")?;
        let (rows, vocab) = self.dims2(q_logits, "kl_divergence")?;
        let count = check_mask("kl_divergence", rows, mask)?;
        if count == 0 {
            return Err(Error::EmptySupervision);
        }
        let pv = self.nodes[p_logits.0].value.data();
        let qv = self.nodes[q_logits.0].value.data();
        let mut p_probs = vec![T::zero(); rows * vocab];
        let mut q_probs = vec![T::zero(); rows * vocab];
        let mut lp = vec![T::zero(); vocab];
        let mut lq = vec![T::zero(); vocab];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            kernels::log_softmax_row(&pv[r * vocab..(r + 1) * vocab], &mut lp);
            kernels::log_softmax_row(&qv[r * vocab..(r + 1) * vocab], &mut lq);
            let mut row_kl = T::zero();
            for j in 0..vocab {
                let p = lp[j].exp();
                p_probs[r * vocab + j] = p;
                q_probs[r * vocab + j] = lq[j].exp();
                if p > T::zero() {
                    row_kl = row_kl + p * (lp[j] - lq[j]);
                }
            }
            total = total + row_kl;
        }
        let value = Array::scalar(total / T::lit(count as f64));
        let rg = self.rg(&[q_logits]);
        Ok(self.push(
            value,
            Op::Kl {
                q: q_logits,
                mask: mask.to_vec(),
                p_probs,
                q_probs,
                count,
            },
            rg,
        ))
    }

    /// Sum of squared differences. With a mask, only the selected rows (first
    /// axis) contribute.
    pub fn l2_distance_sq(&mut self, a: Var, b: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.same_shape(a, b, "l2_distance_sq")?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (rows, cols) = (va.rows(), va.len() / va.rows().max(1));
        if let Some(m) = mask {
            if va.shape().len() < 2 {
                return Err(shape_err("l2_distance_sq", va.shape(), &[m.len()]));
            }
            check_mask("l2_distance_sq", rows, m)?;
        }
        let mut total = T::zero();
        for r in 0..rows {
            if mask.is_some_and(|m| !m[r]) {
                continue;
            }
            for j in r * cols..(r + 1) * cols {
                let diff = va.data()[j] - vb.data()[j];
                total = total + diff * diff;
            }
        }
        let value = Array::scalar(total);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::L2 {
                a,
                b,
                mask: mask.map(|m| m.to_vec()),
            },
            rg,
        ))
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let n = data.len();
        let value = Array::new(vec![n], data).expect("concat");
        let rg = self.rg(parts);
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Propagates adjoints from the scalar `loss` back to every node that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Intermediate buffers are dropped; only leaves keep their gradient.
        for (i, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[i];
            let trainable_leaf = node.requires_grad && matches!(node.op, Op::Leaf);
            if trainable_leaf && g.is_none() {
                *g = Some(vec![T::zero(); node.value.len()]);
            } else if !trainable_leaf && i != loss.0 {
                *g = None;
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    let bt = vb.transpose();
                    kernels::matmul_acc(g, bt.data(), m, n, k, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let at = va.transpose();
                    kernels::matmul_acc(at.data(), g, k, m, n, gb);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    // g is [c, r]
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + *c * y);
                }
            }
            Op::Silu(a) => {
                let va = self.nodes[a.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let s = kernels::sigmoid(va[i]);
                        let d = s * (T::one() + va[i] * (T::one() - s));
                        ga[i] = ga[i] + g[i] * d;
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                let d = gv.len();
                let rows = inv_rms.len();
                let dn = T::lit(d as f64);
                if let Some(gg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xv[r * d + j] * inv_rms[r];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let row = r * d..(r + 1) * d;
                        let dot = row.clone().fold(T::zero(), |acc, i| acc + g[i] * gv[i - r * d] * xv[i]);
                        let coef = inv * inv * inv * dot / dn;
                        for i in row {
                            gx[i] = gx[i] + inv * g[i] * gv[i - r * d] - coef * xv[i];
                        }
                    }
                }
            }
            Op::Rope { x, heads, positions } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let d = self.nodes[x.0].value.cols();
                    let hd = d / heads;
                    for (r, &pos) in positions.iter().enumerate() {
                        for h in 0..*heads {
                            for p in 0..hd / 2 {
                                let (c, s) = kernels::rope_angle::<T>(pos, p, hd);
                                let i = r * d + h * hd + 2 * p;
                                let (g0, g1) = (g[i], g[i + 1]);
                                gx[i] = gx[i] + g0 * c + g1 * s;
                                gx[i + 1] = gx[i + 1] - g0 * s + g1 * c;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads),
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    let d = self.nodes[table.0].value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let vocab = self.nodes[logits.0].value.cols();
                    let coef = g[0] / T::lit(*count as f64);
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vocab {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            gl[r * vocab + j] = gl[r * vocab + j] + coef * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::Kl {
                q,
                mask,
                p_probs,
                q_probs,
                count,
            } => {
                if let Some(gq) = self.acc(grads, *q) {
                    let vocab = self.nodes[q.0].value.cols();
                    let coef = g[0] / T::lit(*count as f64);
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in r * vocab..(r + 1) * vocab {
                            gq[j] = gq[j] + coef * (q_probs[j] - p_probs[j]);
                        }
                    }
                }
            }
            Op::L2 { a, b, mask } => {
                let va = &self.nodes[a.0].value;
                let vb = self.nodes[b.0].value.data();
                let rows = va.rows();
                let cols = va.len() / rows.max(1);
                let two = T::lit(2.0) * g[0];
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(gv) = self.acc(grads, v) {
                        for r in 0..rows {
                            if mask.as_ref().is_some_and(|m| !m[r]) {
                                continue;
                            }
                            for j in r * cols..(r + 1) * cols {
                                gv[j] = gv[j] + sign * two * (va.data()[j] - vb[j]);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, &y)| *x = *x + y);
                    }
                    off += len;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Range<usize>],
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.nodes[q.0].value.cols();
        let hd = d / heads;
        let rows = self.nodes[q.0].value.rows();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let (qv, kv, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut gq = vec![T::zero(); rows * d];
        let mut gk = vec![T::zero(); rows * d];
        let mut gvv = vec![T::zero(); rows * d];
        let mut pbase = 0;
        let mut ds = Vec::new();
        for seg in segments {
            let len = seg.end - seg.start;
            for h in 0..heads {
                let off = h * hd;
                let p = &probs[pbase..pbase + len * len];
                pbase += len * len;
                ds.clear();
                ds.resize(len * len, T::zero());
                for i in 0..len {
                    let gi = &g[(seg.start + i) * d + off..][..hd];
                    // dP_ij = gO_i · V_j ; dV_j += P_ij gO_i
                    let mut dot_sum = T::zero();
                    for j in 0..=i {
                        let pij = p[i * len + j];
                        let vj = &vv[(seg.start + j) * d + off..][..hd];
                        let dp = gi.iter().zip(vj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        ds[i * len + j] = dp;
                        dot_sum = dot_sum + dp * pij;
                        let gvj = &mut gvv[(seg.start + j) * d + off..][..hd];
                        for (o, &x) in gvj.iter_mut().zip(gi) {
                            *o = *o + pij * x;
                        }
                    }
                    for j in 0..=i {
                        let pij = p[i * len + j];
                        ds[i * len + j] = pij * (ds[i * len + j] - dot_sum) * scale;
                    }
                }
                for i in 0..len {
                    for j in 0..=i {
                        let s = ds[i * len + j];
                        let (ri, rj) = ((seg.start + i) * d + off, (seg.start + j) * d + off);
                        for c in 0..hd {
                            gq[ri + c] = gq[ri + c] + s * kv[rj + c];
                            gk[rj + c] = gk[rj + c] + s * qv[ri + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gvv)] {
            if let Some(acc) = self.acc(grads, var) {
                acc.iter_mut().zip(&buf).for_each(|(x, &y)| *x = *x + y);
            }
        }
    }
}
