//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] is a write-once arena of matrix nodes. Forward ops append
//! nodes (so the arena is always topologically ordered) and record enough
//! metadata to replay the chain rule backwards. Everything in the model is
//! rank 2; scalars are 1×1 matrices.
//!
//! A forward/backward pass over one tape is single-writer. Independent
//! tapes (one per cloud in a batch) can run concurrently against a shared
//! read-only parameter store; gradient flush into the store happens in a
//! fixed order outside the tape.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParameterStore;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    /// A·B
    Matmul { a: TensorId, b: TensorId },
    /// A·Bᵀ
    MatmulNt { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// N×D plus a 1×D row broadcast over every row.
    AddRow { a: TensorId, row: TensorId },
    Scale { a: TensorId, factor: S },
    Relu { a: TensorId },
    SoftmaxRows { a: TensorId },
    ConcatCols { parts: Vec<(TensorId, usize)> },
    SliceCols { a: TensorId, start: usize, src_cols: usize },
    /// Column-wise max over rows; saves the winning row per column.
    MaxRows { a: TensorId, argmax: Vec<usize> },
    /// 1×D tiled to N×D.
    RepeatRows { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    /// out[q] = Σ_j w[q·k+j] · src[idx[q·k+j]]; idx/w are constants.
    GatherWeighted { src: TensorId, idx: Vec<usize>, w: Vec<S>, k: usize },
    /// Mean softmax cross-entropy over rows; saves the row softmax.
    CrossEntropy { logits: TensorId, targets: Vec<usize>, softmax: Vec<S> },
}

struct Node<S> {
    value: Vec<S>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op<S>,
}

/// Recording arena for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    /// (parameter slot in the bound store, leaf node) in creation order.
    param_leaves: Vec<(usize, TensorId)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), param_leaves: Vec::new() }
    }

    fn push(&mut self, value: Vec<S>, rows: usize, cols: usize, needs_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, needs_grad, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node<S> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.node(id).value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    /// Gradient accumulated on `id` by previous `backward` calls.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── Leaves ──────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Vec<S>, rows: usize, cols: usize, requires_grad: bool) -> Result<TensorId> {
        if value.len() != rows * cols {
            return Err(Error::Dim(format!(
                "leaf: {} elements cannot fill a {rows}×{cols} matrix",
                value.len()
            )));
        }
        Ok(self.push(value, rows, cols, requires_grad, Op::Leaf))
    }

    /// Copies a named parameter in as a gradient-tracked leaf and remembers
    /// its store slot so [`Tape::flush_param_grads`] can write back.
    pub fn param(&mut self, store: &ParameterStore<S>, name: &str) -> Result<TensorId> {
        let slot = store
            .slot(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        let p = store.by_slot(slot);
        let id = self.push(p.value.clone(), p.rows, p.cols, true, Op::Leaf);
        self.param_leaves.push((slot, id));
        Ok(id)
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Dim(format!("matmul: {m}×{ka} · {kb}×{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nn(&self.node(a).value, &self.node(b).value, &mut out, m, ka, n, false);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out, m, n, ng, Op::Matmul { a, b }))
    }

    /// A·Bᵀ where B is stored n×k; avoids materializing transposes in
    /// attention logits.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::Dim(format!("matmul_nt: {m}×{ka} · ({n}×{kb})ᵀ")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nt(&self.node(a).value, &self.node(b).value, &mut out, m, ka, n, false);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out, m, n, ng, Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Dim(format!("add: {ra}×{ca} + {rb}×{cb}")));
        }
        let out: Vec<S> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out, ra, ca, ng, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.shape(a);
        let (rr, cr) = self.shape(row);
        if rr != 1 || cr != ca {
            return Err(Error::Dim(format!("add_row: {ra}×{ca} + {rr}×{cr}")));
        }
        let mut out = self.node(a).value.clone();
        let r = &self.node(row).value;
        for chunk in out.chunks_exact_mut(ca) {
            for (o, &v) in chunk.iter_mut().zip(r) {
                *o += v;
            }
        }
        let ng = self.node(a).needs_grad || self.node(row).needs_grad;
        Ok(self.push(out, ra, ca, ng, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: TensorId, factor: S) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.node(a).value.iter().map(|&x| x * factor).collect();
        let ng = self.node(a).needs_grad;
        Ok(self.push(out, r, c, ng, Op::Scale { a, factor }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self
            .node(a)
            .value
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let ng = self.node(a).needs_grad;
        Ok(self.push(out, r, c, ng, Op::Relu { a }))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if let Some(pos) = self.node(a).value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "softmax_rows: non-finite input at row {} col {}",
                pos / c,
                pos % c
            )));
        }
        let mut out = vec![S::zero(); r * c];
        kernels::softmax_rows(&self.node(a).value, &mut out, r, c);
        let ng = self.node(a).needs_grad;
        Ok(self.push(out, r, c, ng, Op::SoftmaxRows { a }))
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let (rows, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::Dim(format!(
                    "concat_cols: row counts differ ({rows} vs {r})"
                )));
            }
            total += c;
        }
        let mut out = vec![S::zero(); rows * total];
        let mut offset = 0;
        let mut meta = Vec::with_capacity(parts.len());
        let mut ng = false;
        for &p in parts {
            let (_, c) = self.shape(p);
            let src = &self.node(p).value;
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            meta.push((p, offset));
            ng |= self.node(p).needs_grad;
            offset += c;
        }
        Ok(self.push(out, rows, total, ng, Op::ConcatCols { parts: meta }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Dim(format!(
                "slice_cols: [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let src = &self.node(a).value;
        let mut out = vec![S::zero(); r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(out, r, len, ng, Op::SliceCols { a, start, src_cols: c }))
    }

    /// Column-wise max over all rows (N×D → 1×D). Ties go to the earlier
    /// row, so the result is deterministic.
    pub fn max_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        let src = &self.node(a).value;
        let mut out = src[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                let v = src[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(out, 1, c, ng, Op::MaxRows { a, argmax }))
    }

    pub fn repeat_rows(&mut self, a: TensorId, n: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::Dim(format!("repeat_rows: input must be 1×D, got {r}×{c}")));
        }
        let src = &self.node(a).value;
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let ng = self.node(a).needs_grad;
        Ok(self.push(out, n, c, ng, Op::RepeatRows { a }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: S = self.node(a).value.iter().copied().sum();
        let ng = self.node(a).needs_grad;
        Ok(self.push(vec![s], 1, 1, ng, Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.node(a).value.len();
        let s: S = self.node(a).value.iter().copied().sum();
        let mean = s / S::from_f64(n as f64);
        let ng = self.node(a).needs_grad;
        Ok(self.push(vec![mean], 1, 1, ng, Op::MeanAll { a }))
    }

    /// Weighted gather of source rows: out[q] = Σ_j w[q,j]·src[idx[q,j]].
    /// Indices and weights are treated as constants, so gradients flow only
    /// into the source features.
    pub fn gather_weighted(
        &mut self,
        src: TensorId,
        idx: &[usize],
        w: &[S],
        k: usize,
    ) -> Result<TensorId> {
        let (s_rows, d) = self.shape(src);
        if idx.len() != w.len() || idx.len() % k != 0 {
            return Err(Error::Contract(format!(
                "gather_weighted: {} indices / {} weights do not form q×{k}",
                idx.len(),
                w.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s_rows) {
            return Err(Error::Contract(format!(
                "gather_weighted: index {bad} out of {s_rows} source rows"
            )));
        }
        let q = idx.len() / k;
        let sv = &self.node(src).value;
        let mut out = vec![S::zero(); q * d];
        for qi in 0..q {
            let out_row = &mut out[qi * d..(qi + 1) * d];
            for j in 0..k {
                let wqj = w[qi * k + j];
                let src_row = &sv[idx[qi * k + j] * d..idx[qi * k + j] * d + d];
                for (o, &v) in out_row.iter_mut().zip(src_row) {
                    *o += wqj * v;
                }
            }
        }
        let ng = self.node(src).needs_grad;
        Ok(self.push(
            out,
            q,
            d,
            ng,
            Op::GatherWeighted { src, idx: idx.to_vec(), w: w.to_vec(), k },
        ))
    }

    /// Mean softmax cross-entropy of `logits` (R×K) against one target
    /// class per row. Gradient w.r.t. logits is (softmax − onehot)/R.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (r, k) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {bad} out of {k} classes"
            )));
        }
        let mut softmax = vec![S::zero(); r * k];
        kernels::softmax_rows(&self.node(logits).value, &mut softmax, r, k);
        let lv = &self.node(logits).value;
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut lse = S::zero();
            for &v in row {
                lse += (v - max).exp();
            }
            total += max + lse.ln() - row[t];
        }
        let loss = total / S::from_f64(r as f64);
        let ng = self.node(logits).needs_grad;
        Ok(self.push(
            vec![loss],
            1,
            1,
            ng,
            Op::CrossEntropy { logits, targets: targets.to_vec(), softmax },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<S> {
        let len = self.nodes[id.0].value.len();
        self.grads[id.0].get_or_insert_with(|| vec![S::zero(); len])
    }

    /// Accumulates dLoss/d(node) into every ancestor of `loss` that needs a
    /// gradient. Repeated calls keep accumulating until [`Tape::clear_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!("backward: loss must be scalar, got {r}×{c}")));
        }
        self.grad_buf(loss)[0] += S::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        // Ops only reference earlier nodes, so splitting the borrow by
        // taking the op out is safe; it is put back untouched.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.node(*a).needs_grad {
                    let bv = self.node(*b).value.clone();
                    kernels::gemm_nt(g, &bv, self.grad_buf(*a), m, n, k, true);
                }
                if self.node(*b).needs_grad {
                    let av = self.node(*a).value.clone();
                    kernels::gemm_tn(&av, g, self.grad_buf(*b), m, k, n, true);
                }
            }
            Op::MatmulNt { a, b } => {
                // out = A·Bᵀ, A m×k, B n×k, g m×n
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.node(*a).needs_grad {
                    let bv = self.node(*b).value.clone();
                    kernels::gemm_nn(g, &bv, self.grad_buf(*a), m, n, k, true);
                }
                if self.node(*b).needs_grad {
                    let av = self.node(*a).value.clone();
                    kernels::gemm_tn(g, &av, self.grad_buf(*b), m, n, k, true);
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    if self.node(t).needs_grad {
                        for (dst, &src) in self.grad_buf(t).iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                if self.node(*a).needs_grad {
                    for (dst, &src) in self.grad_buf(*a).iter_mut().zip(g) {
                        *dst += src;
                    }
                }
                if self.node(*row).needs_grad {
                    let buf = self.grad_buf(*row);
                    for chunk in g.chunks_exact(cols) {
                        for (dst, &src) in buf.iter_mut().zip(chunk) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.node(*a).needs_grad {
                    let f = *factor;
                    for (dst, &src) in self.grad_buf(*a).iter_mut().zip(g) {
                        *dst += src * f;
                    }
                }
            }
            Op::Relu { a } => {
                if self.node(*a).needs_grad {
                    let mask: Vec<bool> =
                        self.node(*a).value.iter().map(|&x| x > S::zero()).collect();
                    for ((dst, &src), keep) in self.grad_buf(*a).iter_mut().zip(g).zip(mask) {
                        if keep {
                            *dst += src;
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if self.node(*a).needs_grad {
                    // dx = y ⊙ (dy − ⟨dy, y⟩) per row
                    let y = self.nodes[i].value.clone();
                    let buf = self.grad_buf(*a);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for (yv, gv) in yr.iter().zip(gr) {
                            dot += *yv * *gv;
                        }
                        let br = &mut buf[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                for &(p, offset) in parts {
                    if !self.node(p).needs_grad {
                        continue;
                    }
                    let (_, c) = self.shape(p);
                    let buf = self.grad_buf(p);
                    for r in 0..rows {
                        let src = &g[r * cols + offset..r * cols + offset + c];
                        for (dst, &v) in buf[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
            }
            Op::SliceCols { a, start, src_cols } => {
                if self.node(*a).needs_grad {
                    let (start, sc) = (*start, *src_cols);
                    let buf = self.grad_buf(*a);
                    for r in 0..rows {
                        let src = &g[r * cols..(r + 1) * cols];
                        for (dst, &v) in
                            buf[r * sc + start..r * sc + start + cols].iter_mut().zip(src)
                        {
                            *dst += v;
                        }
                    }
                }
            }
            Op::MaxRows { a, argmax } => {
                if self.node(*a).needs_grad {
                    let (_, c) = self.shape(*a);
                    let am = argmax.clone();
                    let buf = self.grad_buf(*a);
                    for j in 0..c {
                        buf[am[j] * c + j] += g[j];
                    }
                }
            }
            Op::RepeatRows { a } => {
                if self.node(*a).needs_grad {
                    let buf = self.grad_buf(*a);
                    for chunk in g.chunks_exact(cols) {
                        for (dst, &v) in buf.iter_mut().zip(chunk) {
                            *dst += v;
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if self.node(*a).needs_grad {
                    let gv = g[0];
                    for dst in self.grad_buf(*a).iter_mut() {
                        *dst += gv;
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.node(*a).needs_grad {
                    let n = self.node(*a).value.len();
                    let gv = g[0] / S::from_f64(n as f64);
                    for dst in self.grad_buf(*a).iter_mut() {
                        *dst += gv;
                    }
                }
            }
            Op::GatherWeighted { src, idx, w, k } => {
                if self.node(*src).needs_grad {
                    let (_, d) = self.shape(*src);
                    let (idx, w, k) = (idx.clone(), w.clone(), *k);
                    let buf = self.grad_buf(*src);
                    let q = idx.len() / k;
                    for qi in 0..q {
                        let gr = &g[qi * d..(qi + 1) * d];
                        for j in 0..k {
                            let wqj = w[qi * k + j];
                            let row = idx[qi * k + j];
                            for (dst, &v) in buf[row * d..(row + 1) * d].iter_mut().zip(gr) {
                                *dst += wqj * v;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, softmax } => {
                if self.node(*logits).needs_grad {
                    let (r, k) = self.shape(*logits);
                    let scale = g[0] / S::from_f64(r as f64);
                    let (targets, softmax) = (targets.clone(), softmax.clone());
                    let buf = self.grad_buf(*logits);
                    for row in 0..r {
                        for j in 0..k {
                            let mut v = softmax[row * k + j];
                            if j == targets[row] {
                                v -= S::one();
                            }
                            buf[row * k + j] += scale * v;
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    // ── Parameter-gradient plumbing ─────────────────────────────────

    /// Adds `scale`·grad of every bound parameter leaf into the store's
    /// gradient accumulators, in leaf creation order.
    pub fn flush_param_grads(&self, store: &mut ParameterStore<S>, scale: S) {
        for &(slot, id) in &self.param_leaves {
            if let Some(g) = self.grad(id) {
                store.accumulate_grad(slot, g, scale);
            }
        }
    }

    /// Extracts (store slot, gradient) pairs so batched callers can reduce
    /// gradients from many tapes in a fixed order.
    pub fn take_param_grads(&mut self) -> Vec<(usize, Vec<S>)> {
        let mut out = Vec::with_capacity(self.param_leaves.len());
        for &(slot, id) in &self.param_leaves {
            if let Some(g) = self.grads[id.0].take() {
                out.push((slot, g));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape64() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut t = tape64();
        let i2 = t.leaf(vec![1.0, 0.0, 0.0, 1.0], 2, 2, false).unwrap();
        let b = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3, false).unwrap();
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c), t.value(b));
    }

    #[test]
    fn matmul_scalar_case() {
        let mut t = tape64();
        let a = t.leaf(vec![2.0], 1, 1, false).unwrap();
        let b = t.leaf(vec![3.0], 1, 1, false).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = 99u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
        let mut t = tape64();
        let ia = t.leaf(a.clone(), m, k, false).unwrap();
        let ib = t.leaf(b.clone(), k, n, false).unwrap();
        let ic = t.matmul(ia, ib).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((t.value(ic)[i * n + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = tape64();
        let a = t.leaf(vec![0.0; 6], 2, 3, false).unwrap();
        let b = t.leaf(vec![0.0; 8], 4, 2, false).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2×3") && msg.contains("4×2"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut t = tape64();
        let zeros = t.leaf(vec![0.0; 4], 1, 4, false).unwrap();
        let s = t.softmax_rows(zeros).unwrap();
        for &v in t.value(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // exp(0)=1, exp(ln 3)=3 → [1/4, 3/4]
        let x = t.leaf(vec![0.0, 3.0_f64.ln()], 1, 2, false).unwrap();
        let s = t.softmax_rows(x).unwrap();
        assert!((t.value(s)[0] - 0.25).abs() < 1e-12);
        assert!((t.value(s)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_saturates_to_one_hot() {
        let mut t = tape64();
        let x = t.leaf(vec![50.0, 0.0, 0.0], 1, 3, false).unwrap();
        let s = t.softmax_rows(x).unwrap();
        assert!(t.value(s)[0] >= 1.0 - 1e-9);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = tape64();
        let x = t.leaf(vec![0.0, f64::NAN], 1, 2, false).unwrap();
        assert!(matches!(t.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_square_gives_two_x() {
        // x² via matmul of the 1×1 leaf with itself: d/dx = 2x = 6.
        let mut t = tape64();
        let x = t.leaf(vec![3.0], 1, 1, true).unwrap();
        let y = t.matmul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = tape64();
        let x = t.leaf(vec![1.0, 2.0], 1, 2, true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_through_softmax_sum_is_zero() {
        // Rows of a softmax sum to 1, so the total is constant in x.
        let mut t = tape64();
        let x = t.leaf(vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1], 2, 3, true).unwrap();
        let s = t.softmax_rows(x).unwrap();
        let total = t.sum_all(s).unwrap();
        t.backward(total).unwrap();
        for &g in t.grad(x).unwrap() {
            assert!(g.abs() < 1e-12, "grad {g} should vanish");
        }
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = tape64();
        let x = t.leaf(vec![3.0], 1, 1, true).unwrap();
        let y = t.matmul(x, x).unwrap();
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
        t.clear_grads();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn sum_of_product_gradients_match_finite_differences() {
        let (m, k, n) = (3, 4, 2);
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| next()).collect();

        let loss = |av: &[f64], bv: &[f64]| -> f64 {
            let mut t = Tape::<f64>::new();
            let ia = t.leaf(av.to_vec(), m, k, false).unwrap();
            let ib = t.leaf(bv.to_vec(), k, n, false).unwrap();
            let ic = t.matmul(ia, ib).unwrap();
            let s = t.sum_all(ic).unwrap();
            t.value(s)[0]
        };

        let mut t = tape64();
        let ia = t.leaf(a.clone(), m, k, true).unwrap();
        let ib = t.leaf(b.clone(), k, n, true).unwrap();
        let ic = t.matmul(ia, ib).unwrap();
        let s = t.sum_all(ic).unwrap();
        t.backward(s).unwrap();

        let h = 1e-5;
        for i in 0..a.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (loss(&ap, &b) - loss(&am, &b)) / (2.0 * h);
            let an = t.grad(ia).unwrap()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            assert!(rel <= 1e-6, "a[{i}]: analytic {an} vs fd {fd}");
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h);
            let an = t.grad(ib).unwrap()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
            assert!(rel <= 1e-6, "b[{i}]: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn concat_slice_roundtrip_and_grads() {
        let mut t = tape64();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], 2, 2, true).unwrap();
        let b = t.leaf(vec![5.0, 6.0], 2, 1, true).unwrap();
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = t.slice_cols(c, 2, 1).unwrap();
        assert_eq!(t.value(back), t.value(b));
        let s = t.sum_all(back).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[1.0, 1.0]);
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_rows_routes_gradient_to_argmax() {
        let mut t = tape64();
        let a = t.leaf(vec![1.0, 5.0, 3.0, 2.0], 2, 2, true).unwrap();
        let m = t.max_rows(a).unwrap();
        assert_eq!(t.value(m), &[3.0, 5.0]);
        let s = t.sum_all(m).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut t = tape64();
        let logits = t.leaf(vec![1.0, -0.5, 0.25], 1, 3, true).unwrap();
        let ce = t.cross_entropy(logits, &[2]).unwrap();
        t.backward(ce).unwrap();
        let mut sm = vec![0.0; 3];
        kernels::softmax_rows_seq(t.value(logits), &mut sm, 1, 3);
        let g = t.grad(logits).unwrap();
        for j in 0..3 {
            let want = sm[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g[j] - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut t = tape64();
        let logits = t.leaf(vec![0.0, 0.0], 1, 2, false).unwrap();
        assert!(matches!(t.cross_entropy(logits, &[2]), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_weighted_forward_and_grad() {
        let mut t = tape64();
        let src = t.leaf(vec![0.0, 10.0, 20.0], 3, 1, true).unwrap();
        // one query mixing rows 1 and 2 at 0.8/0.2
        let out = t.gather_weighted(src, &[1, 2], &[0.8, 0.2], 2).unwrap();
        assert!((t.value(out)[0] - 12.0).abs() < 1e-12);
        let s = t.sum_all(out).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(src).unwrap(), &[0.0, 0.8, 0.2]);
    }
}
