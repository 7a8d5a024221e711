use std::collections::HashMap;

use crate::autograd::{ParamId, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{check_targets, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    PadRows(Var),
    RowWeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    /// Loss whose gradient w.r.t. its input was computed during the forward pass.
    PrecomputedGrad {
        x: Var,
        grad: Vec<f64>,
    },
    Combine(Vec<(Var, f64)>),
    Dot {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation so it can be differentiated once in reverse.
///
/// Parameters are read from the borrowed [`ParameterStore`]; each parameter
/// gets a single leaf per tape no matter how often it is used.
pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that is not a parameter (inputs, precomputed memories).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, ta.data(), tb.data(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b)))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = dims2(tx);
        if tw.shape().len() != 2 || tw.shape()[0] != k {
            return Err(mismatch("linear", tx, tw));
        }
        let n = tw.shape()[1];
        if tb.numel() != n {
            return Err(mismatch("linear", tw, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm_nn(m, k, n, tx.data(), tw.data(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b)))
    }

    /// Adds a constant tensor (positional encodings, masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() != c.numel() {
            return Err(mismatch("add_const", ta, c));
        }
        let out = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * s).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let (tx, tg, ts) = (self.value(x), self.value(gain), self.value(shift));
        let (rows, cols) = dims2(tx);
        if tg.numel() != cols || ts.numel() != cols {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm_rows(tx.data(), cols, &mut xhat, &mut rstd);
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(cols) {
            for ((v, g), b) in row.iter_mut().zip(tg.data()).zip(ts.data()) {
                *v = *v * g + b;
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            kernels::softmax_in_place(row);
        }
        let shape = ta.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries `q: Sq×D`, keys `k: Sk×D` and values `v: Sk×D`.
    ///
    /// `mask` (optional, `Sq×Sk`) is added to the scaled scores; use `-inf`
    /// to hide a key. With `top_k = Some(k)` and `k < Sk`, every head keeps
    /// only its `k` best scores per query before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Tensor>,
        top_k: Option<usize>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, dm) = dims2(tq);
        let (sk, dk) = dims2(tk);
        if dk != dm {
            return Err(mismatch("attention", tq, tk));
        }
        if tv.rows() != sk || tv.cols() != dm {
            return Err(mismatch("attention", tk, tv));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dm} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = mask {
            if m.numel() != sq * sk {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![sq, sk],
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; heads * sq * sk];
        let mut out = vec![0.0; sq * dm];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..sq {
                let row = &mut probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
                let qi = &qd[i * dm + off..i * dm + off + dh];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = scale * dot(qi, &kd[j * dm + off..j * dm + off + dh]);
                }
                if let Some(m) = mask {
                    for (s, mv) in row.iter_mut().zip(&m.data()[i * sk..(i + 1) * sk]) {
                        *s += mv;
                    }
                }
                if let Some(kk) = top_k {
                    if kk < sk {
                        let keep = kernels::top_k_indices(row, kk);
                        let mut kept = vec![false; sk];
                        keep.into_iter().for_each(|j| kept[j] = true);
                        for (s, keep) in row.iter_mut().zip(kept) {
                            if !keep {
                                *s = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
                kernels::softmax_in_place(row);
                let oi = &mut out[i * dm + off..i * dm + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    for (o, &vv) in oi.iter_mut().zip(&vd[j * dm + off..j * dm + off + dh]) {
                        *o += p * vv;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![sq, dm], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
        ))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = dims2(tt);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::TargetOutOfRange {
                    target: id,
                    classes: vocab,
                    position,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = dims2(t);
        if start + len > rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = t.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![len, cols], out),
            Op::SliceRows { x, start },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Appends zero rows until `x` has `rows` rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, cols) = dims2(t);
        if rows < r {
            return Err(Error::ShapeMismatch {
                op: "pad_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let mut out = t.data().to_vec();
        out.resize(rows * cols, 0.0);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::PadRows(x)))
    }

    /// `Σ_r weights[r] · x[r, :]`, giving a `1×C` row.
    pub fn row_weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = dims2(t);
        if weights.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "row_weighted_sum",
                lhs: t.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let mut out = vec![0.0; cols];
        for (row, &w) in t.data().chunks_exact(cols).zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![1, cols], out),
            Op::RowWeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Mean cross entropy of row-wise softmax(logits) against `targets`,
    /// skipping positions equal to `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = dims2(t);
        check_targets(rows, cols, targets, ignore)?;
        let mut probs = vec![0.0; rows * cols];
        let mut lp = vec![0.0; cols];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore {
                continue;
            }
            kernels::log_softmax(t.row(r), &mut lp);
            total -= lp[tgt];
            count += 1;
            for (p, l) in probs[r * cols..(r + 1) * cols].iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        ))
    }

    /// Records a scalar loss of `x` whose gradient is already known.
    pub(crate) fn precomputed_loss(&mut self, x: Var, loss: f64, grad: Vec<f64>) -> Var {
        debug_assert_eq!(grad.len(), self.value(x).numel());
        self.push(Tensor::scalar(loss), Op::PrecomputedGrad { x, grad })
    }

    /// `Σ cᵢ · xᵢ` over equally shaped inputs.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::InvalidTensor("combine of nothing".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(mismatch("combine", self.value(first), t));
            }
            for (o, x) in out.iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Combine(terms.to_vec())))
    }

    /// Scalar `Σ x ⊙ weights`.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != weights.numel() {
            return Err(mismatch("dot_const", t, weights));
        }
        let s = dot(t.data(), weights.data());
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.clone(),
            },
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let w = Tensor::full(self.value(x).shape(), 1.0 / n as f64);
        self.dot_const(x, &w).expect("shapes agree by construction")
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.numel() != 1 {
            return Err(Error::InvalidTensor(format!(
                "backward root must be scalar, got shape {:?}",
                rt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                gemm_nt(m, n, k, g, tb.data(), slot(grads, *a, m * k));
                gemm_tn(k, m, n, ta.data(), g, slot(grads, *b, k * n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                gemm_nn(m, n, k, g, tb.data(), slot(grads, *a, m * k));
                gemm_tn(n, m, k, g, ta.data(), slot(grads, *b, n * k));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k) = dims2(tx);
                let n = tw.shape()[1];
                gemm_nt(m, n, k, g, tw.data(), slot(grads, *x, m * k));
                gemm_tn(k, m, n, tx.data(), g, slot(grads, *w, k * n));
                let gb = slot(grads, *b, n);
                for row in g.chunks_exact(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            Op::Add(a, b) => {
                axpy(slot(grads, *a, g.len()), 1.0, g);
                axpy(slot(grads, *b, g.len()), 1.0, g);
            }
            Op::AddConst(a) | Op::Reshape(a) => axpy(slot(grads, *a, g.len()), 1.0, g),
            Op::Scale(a, s) => axpy(slot(grads, *a, g.len()), *s, g),
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let ga = slot(grads, *a, g.len());
                for ((o, &x), &gv) in ga.iter_mut().zip(ta.data()).zip(g) {
                    *o += gv * kernels::gelu_grad(x);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let cols = out.cols();
                let rows = out.rows();
                let tg = self.value(*gain).data().to_vec();
                {
                    let gg = slot(grads, *gain, cols);
                    for (grow, xrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((o, gv), xv) in gg.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                }
                {
                    let gs = slot(grads, *shift, cols);
                    for grow in g.chunks_exact(cols) {
                        for (o, gv) in gs.iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                }
                let gx = slot(grads, *x, rows * cols);
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let xrow = &xhat[r * cols..(r + 1) * cols];
                    for ((d, gv), gn) in dxhat.iter_mut().zip(grow).zip(&tg) {
                        *d = gv * gn;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dot(&dxhat, xrow) / n;
                    for ((o, d), xv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(&dxhat).zip(xrow)
                    {
                        *o += rstd[r] * (d - mean_d - xv * mean_dx);
                    }
                }
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let ga = slot(grads, *a, g.len());
                for ((orow, grow), garow) in out
                    .data()
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(ga.chunks_exact_mut(cols))
                {
                    let s = dot(orow, grow);
                    for ((o, p), gv) in garow.iter_mut().zip(orow).zip(grow) {
                        *o += p * (gv - s);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *scale, probs, g, grads),
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let gt = slot(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, gv) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += gv;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    axpy(slot(grads, p, n), 1.0, &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let gx = slot(grads, *x, tx.numel());
                axpy(&mut gx[start * cols..start * cols + g.len()], 1.0, g);
            }
            Op::PadRows(x) => {
                let n = self.value(*x).numel();
                axpy(slot(grads, *x, n), 1.0, &g[..n]);
            }
            Op::RowWeightedSum { x, weights } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let gx = slot(grads, *x, tx.numel());
                for (row, &w) in gx.chunks_exact_mut(cols).zip(weights) {
                    axpy(row, w, g);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let tl = self.value(*logits);
                let cols = tl.cols();
                let coef = g[0] / *count as f64;
                let gl = slot(grads, *logits, tl.numel());
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    let row = &mut gl[r * cols..(r + 1) * cols];
                    axpy(row, coef, &probs[r * cols..(r + 1) * cols]);
                    row[t] -= coef;
                }
            }
            Op::PrecomputedGrad { x, grad } => axpy(slot(grads, *x, grad.len()), g[0], grad),
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    axpy(slot(grads, v, g.len()), c, g);
                }
            }
            Op::Dot { x, weights } => axpy(slot(grads, *x, weights.numel()), g[0], weights.data()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, dm) = dims2(tq);
        let sk = tk.rows();
        let dh = dm / heads;
        let mut gq = vec![0.0; sq * dm];
        let mut gk = vec![0.0; sk * dm];
        let mut gv = vec![0.0; sk * dm];
        let mut ds = vec![0.0; sk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..sq {
                let p = &probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
                let gi = &g[i * dm + off..i * dm + off + dh];
                for (j, d) in ds.iter_mut().enumerate() {
                    *d = dot(gi, &tv.data()[j * dm + off..j * dm + off + dh]);
                }
                let s = dot(p, &ds);
                for j in 0..sk {
                    let pj = p[j];
                    if pj == 0.0 {
                        ds[j] = 0.0;
                        continue;
                    }
                    axpy(&mut gv[j * dm + off..j * dm + off + dh], pj, gi);
                    ds[j] = pj * (ds[j] - s) * scale;
                }
                let qi = &tq.data()[i * dm + off..i * dm + off + dh];
                let gqi = &mut gq[i * dm + off..i * dm + off + dh];
                for (j, &d) in ds.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    axpy(gqi, d, &tk.data()[j * dm + off..j * dm + off + dh]);
                    axpy(&mut gk[j * dm + off..j * dm + off + dh], d, qi);
                }
            }
        }
        axpy(slot(grads, q, sq * dm), 1.0, &gq);
        axpy(slot(grads, k, sk * dm), 1.0, &gk);
        axpy(slot(grads, v, sk * dm), 1.0, &gv);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Every parameter leaf of the tape with its gradient (`None` when the
    /// parameter was recorded but did not reach the root).
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> {
        self.params.iter().map(|&(p, v)| (p, self.grads[v.0].as_deref()))
    }
}
