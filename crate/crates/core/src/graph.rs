//! Reverse-mode autodiff on a tape of eagerly evaluated ops.
//!
//! A [`Graph`] owns every tensor produced during one forward pass; insertion
//! order is the topological order, so `backward` is a single reverse sweep
//! that visits each op exactly once. Gradients of unused leaves stay zero.
//!
//! The op set is deliberately small: dense matmul (optionally batched over
//! one leading axis), additive-mask softmax, layer norm, embedding lookup,
//! GELU, concatenation and weighted cross-entropy. There is no broadcasting
//! beyond the batched matmul; callers reshape explicitly.

use crate::error::{CoreError, CoreResult};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, S),
    Sum(TensorId),
    Gelu(TensorId),
    /// C = A * B, or A * B^T when `bt` (B stored row-major as [n, k]).
    Matmul {
        a: TensorId,
        b: TensorId,
        bt: bool,
    },
    /// Row softmax of (x + mask); mask may omit x's leading batch axis.
    /// Gradients flow only through x (the mask is additive and constant).
    SoftmaxMasked {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// (mean, inv_std) per row, saved by the forward pass.
        stats: Vec<(S, S)>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<u32>,
    },
    /// Concatenation along the last axis.
    Concat(TensorId, TensorId),
    /// [T, h*dk] -> [h, T, dk]
    SplitHeads {
        x: TensorId,
        heads: usize,
    },
    /// [h, T, dk] -> [T, h*dk]
    MergeHeads(TensorId),
    /// Weighted mean of per-position negative log-likelihoods.
    CrossEntropy {
        logits: TensorId,
        targets: Vec<u32>,
        weights: Vec<S>,
        /// softmax rows saved by the forward pass; empty when all weights are 0.
        probs: Vec<S>,
        inv_denom: S,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

/// Tape of recorded ops with per-tensor gradient accumulators.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_run: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_run: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> TensorId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> TensorId {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient of a leaf after backward; zeros if the leaf was never touched.
    pub fn grad(&self, id: TensorId) -> Vec<S> {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => g.clone(),
            None => vec![S::zero(); node.data.len()],
        }
    }

    pub fn grad_ref(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clear accumulated gradients so backward can run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_run = false;
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- forward ops -----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> CoreResult<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> CoreResult<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = S::zero();
        for &v in self.data(a) {
            acc += v;
        }
        let needs = self.needs(a);
        self.push(vec![1], vec![acc], needs, Op::Sum(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Gelu(a))
    }

    /// Standard or batched matrix product; see [`Graph::matmul_nt`] for the
    /// transposed-B variant.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> CoreResult<TensorId> {
        self.matmul_impl(a, b, false)
    }

    /// C = A * B^T with B stored as [.., n, k]; used for attention scores.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> CoreResult<TensorId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, bt: bool) -> CoreResult<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || CoreError::ShapeMismatch {
            op: if bt { "matmul_nt" } else { "matmul" },
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, k) = (sa[0], sa[1]);
                let (n, kb) = if bt { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
                if kb != k {
                    return Err(mismatch());
                }
                (1, m, k, n, vec![m, n])
            }
            (3, 3) => {
                if sa[0] != sb[0] {
                    return Err(mismatch());
                }
                let (m, k) = (sa[1], sa[2]);
                let (n, kb) = if bt { (sb[1], sb[2]) } else { (sb[2], sb[1]) };
                if kb != k {
                    return Err(mismatch());
                }
                (sa[0], m, k, n, vec![sa[0], m, n])
            }
            _ => return Err(mismatch()),
        };
        let mut data = vec![S::zero(); batch * m * n];
        for bi in 0..batch {
            let av = &self.nodes[a.0].data[bi * m * k..(bi + 1) * m * k];
            let bv = &self.nodes[b.0].data[bi * k * n..(bi + 1) * k * n];
            let cv = &mut data[bi * m * n..(bi + 1) * m * n];
            if bt {
                kernels::matmul_nt(av, bv, cv, m, k, n);
            } else {
                kernels::matmul_nn(av, bv, cv, m, k, n);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out_shape, data, needs, Op::Matmul { a, b, bt }))
    }

    /// Row-wise softmax of (x + mask). The mask holds 0 or -inf and may have
    /// the same shape as `x` or omit x's leading batch axis, in which case it
    /// is shared across that axis. Rows with no unmasked entry are rejected.
    pub fn softmax_masked(&mut self, x: TensorId, mask: TensorId) -> CoreResult<TensorId> {
        let (sx, sm) = (self.shape(x), self.shape(mask));
        let xlen: usize = sx.iter().product();
        let mlen: usize = sm.iter().product();
        let shared_ok = sx.len() == sm.len() + 1 && &sx[1..] == sm && xlen % mlen.max(1) == 0;
        if sx != sm && !shared_ok {
            return Err(CoreError::ShapeMismatch {
                op: "softmax_masked",
                lhs: sx.to_vec(),
                rhs: sm.to_vec(),
            });
        }
        let cols = *sx.last().unwrap();
        let mut data = self.nodes[x.0].data.clone();
        let mask_data = &self.nodes[mask.0].data;
        let rows = data.len() / cols;
        for r in 0..rows {
            let mrow_start = (r * cols) % mask_data.len();
            let mrow = &mask_data[mrow_start..mrow_start + cols];
            kernels::softmax_masked_row(&mut data[r * cols..(r + 1) * cols], mrow, r)?;
        }
        let needs = self.needs(x);
        Ok(self.push(sx.to_vec(), data, needs, Op::SoftmaxMasked { x }))
    }

    /// Layer norm over the last axis with affine gain/bias, eps 1e-5.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> CoreResult<TensorId> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = S::from_f64(1e-5);
        let rows = self.nodes[x.0].data.len() / d;
        let mut data = vec![S::zero(); rows * d];
        let mut stats = Vec::with_capacity(rows);
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gain.0].data;
            let bd = &self.nodes[bias.0].data;
            for r in 0..rows {
                let st = kernels::layer_norm_row(
                    &xd[r * d..(r + 1) * d],
                    gd,
                    bd,
                    &mut data[r * d..(r + 1) * d],
                    eps,
                );
                stats.push(st);
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            data,
            needs,
            Op::LayerNorm { x, gain, bias, stats },
        ))
    }

    /// Row gather: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: TensorId, ids: &[u32]) -> CoreResult<TensorId> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op: "embedding",
                lhs: st.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (st[0], st[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(CoreError::TokenOutOfRange { id: id as u32, vocab: v });
            }
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            needs,
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// Concatenate along the last axis: [T, a] ++ [T, b] -> [T, a+b].
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> CoreResult<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, da, db) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&self.nodes[a.0].data[r * da..(r + 1) * da]);
            data.extend_from_slice(&self.nodes[b.0].data[r * db..(r + 1) * db]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![rows, da + db], data, needs, Op::Concat(a, b)))
    }

    /// [T, h*dk] -> [h, T, dk]
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> CoreResult<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] % heads != 0 {
            return Err(CoreError::ShapeMismatch {
                op: "split_heads",
                lhs: s.to_vec(),
                rhs: vec![heads],
            });
        }
        let (t, d) = (s[0], s[1]);
        let dk = d / heads;
        let mut data = vec![S::zero(); t * d];
        let xd = &self.nodes[x.0].data;
        for h in 0..heads {
            for i in 0..t {
                let src = i * d + h * dk;
                let dst = h * t * dk + i * dk;
                data[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![heads, t, dk], data, needs, Op::SplitHeads { x, heads }))
    }

    /// [h, T, dk] -> [T, h*dk]
    pub fn merge_heads(&mut self, x: TensorId) -> CoreResult<TensorId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(CoreError::ShapeMismatch {
                op: "merge_heads",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (heads, t, dk) = (s[0], s[1], s[2]);
        let d = heads * dk;
        let mut data = vec![S::zero(); t * d];
        let xd = &self.nodes[x.0].data;
        for h in 0..heads {
            for i in 0..t {
                let src = h * t * dk + i * dk;
                let dst = i * d + h * dk;
                data[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![t, d], data, needs, Op::MergeHeads(x)))
    }

    /// Weighted-mean cross-entropy over rows of [T, V] logits:
    /// (sum_t w_t * -log softmax(logits_t)[targets_t]) / max(1, sum_t w_t).
    /// All-zero weights yield exactly 0 with zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        weights: &[S],
    ) -> CoreResult<TensorId> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || targets.len() != weights.len() {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let (t, v) = (s[0], s[1]);
        for &w in weights {
            if !(w == S::zero() || w == S::one()) {
                return Err(CoreError::InvalidConfig {
                    detail: "cross_entropy weights must be 0 or 1".into(),
                });
            }
        }
        for &y in targets {
            if y as usize >= v {
                return Err(CoreError::TokenOutOfRange { id: y, vocab: v });
            }
        }
        let mut wsum = S::zero();
        for &w in weights {
            wsum += w;
        }
        let needs = self.needs(logits);
        if wsum == S::zero() {
            return Ok(self.push(
                vec![1],
                vec![S::zero()],
                needs,
                Op::CrossEntropy {
                    logits,
                    targets: targets.to_vec(),
                    weights: weights.to_vec(),
                    probs: Vec::new(),
                    inv_denom: S::zero(),
                },
            ));
        }
        let denom = if wsum < S::one() { S::one() } else { wsum };
        let inv_denom = S::one() / denom;
        let xd = &self.nodes[logits.0].data;
        let mut probs = vec![S::zero(); t * v];
        let mut loss = S::zero();
        for r in 0..t {
            let row = &xd[r * v..(r + 1) * v];
            let mut max = S::neg_infinity();
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = S::zero();
            let prow = &mut probs[r * v..(r + 1) * v];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            let inv = S::one() / sum;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            if weights[r] != S::zero() {
                let nll = sum.ln() + max - row[targets[r] as usize];
                loss += nll;
            }
        }
        loss *= inv_denom;
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                inv_denom,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root; each recorded op is visited once.
    pub fn backward(&mut self, root: TensorId) -> CoreResult<()> {
        if self.backward_run {
            return Err(CoreError::BackwardTwice);
        }
        let root_node = &self.nodes[root.0];
        if root_node.data.len() != 1 {
            return Err(CoreError::NonScalarRoot {
                shape: root_node.shape.clone(),
            });
        }
        self.backward_run = true;
        if !root_node.needs_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let gout = node.grad.as_deref().unwrap();
            Self::dispatch_backward(before, node, gout);
        }
        Ok(())
    }

    fn grad_buf<'a>(before: &'a mut [Node<S>], id: TensorId) -> &'a mut [S] {
        let n = &mut before[id.0];
        let len = n.data.len();
        n.grad.get_or_insert_with(|| vec![S::zero(); len])
    }

    fn dispatch_backward(before: &mut [Node<S>], node: &Node<S>, gout: &[S]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if before[a.0].needs_grad {
                    for (g, &d) in Self::grad_buf(before, *a).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
                if before[b.0].needs_grad {
                    for (g, &d) in Self::grad_buf(before, *b).iter_mut().zip(gout) {
                        *g += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if before[a.0].needs_grad {
                    let bv = before[b.0].data.clone();
                    for ((g, &d), &x) in Self::grad_buf(before, *a).iter_mut().zip(gout).zip(&bv) {
                        *g += d * x;
                    }
                }
                if before[b.0].needs_grad {
                    let av = before[a.0].data.clone();
                    for ((g, &d), &x) in Self::grad_buf(before, *b).iter_mut().zip(gout).zip(&av) {
                        *g += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if before[a.0].needs_grad {
                    let c = *c;
                    for (g, &d) in Self::grad_buf(before, *a).iter_mut().zip(gout) {
                        *g += d * c;
                    }
                }
            }
            Op::Sum(a) => {
                if before[a.0].needs_grad {
                    let d = gout[0];
                    for g in Self::grad_buf(before, *a).iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::Gelu(a) => {
                if before[a.0].needs_grad {
                    let xv = before[a.0].data.clone();
                    for ((g, &d), &x) in Self::grad_buf(before, *a).iter_mut().zip(gout).zip(&xv) {
                        *g += d * kernels::gelu_grad(x);
                    }
                }
            }
            Op::Matmul { a, b, bt } => {
                let sa = before[a.0].shape.clone();
                let (batch, m, k) = if sa.len() == 3 {
                    (sa[0], sa[1], sa[2])
                } else {
                    (1, sa[0], sa[1])
                };
                let n = node.data.len() / (batch * m);
                let (bt, a, b) = (*bt, *a, *b);
                if before[a.0].needs_grad {
                    let bv = before[b.0].data.clone();
                    let ga = Self::grad_buf(before, a);
                    for bi in 0..batch {
                        let gc = &gout[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let gaa = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if bt {
                            // C = A B^T (B:[n,k]) => dA = dC * B
                            kernels::matmul_nn(gc, bb, gaa, m, n, k);
                        } else {
                            // dA = dC * B^T
                            kernels::matmul_nt(gc, bb, gaa, m, n, k);
                        }
                    }
                }
                if before[b.0].needs_grad {
                    let av = before[a.0].data.clone();
                    let gb = Self::grad_buf(before, b);
                    for bi in 0..batch {
                        let gc = &gout[bi * m * n..(bi + 1) * m * n];
                        let aa = &av[bi * m * k..(bi + 1) * m * k];
                        let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if bt {
                            // dB = dC^T * A, shapes [n,m]*[m,k]
                            kernels::matmul_tn(gc, aa, gbb, m, n, k);
                        } else {
                            // dB = A^T * dC
                            kernels::matmul_tn(aa, gc, gbb, m, k, n);
                        }
                    }
                }
            }
            Op::SoftmaxMasked { x } => {
                if before[x.0].needs_grad {
                    let y = &node.data;
                    let cols = *node.shape.last().unwrap();
                    let rows = y.len() / cols;
                    let gx = Self::grad_buf(before, *x);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for (&yv, &gv) in yr.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        let gxr = &mut gx[r * cols..(r + 1) * cols];
                        for ((g, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                            *g += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let d = *node.shape.last().unwrap();
                let rows = node.data.len() / d;
                let xv = before[x.0].data.clone();
                let gv = before[gain.0].data.clone();
                let inv_d = S::one() / S::from_usize(d);
                if before[gain.0].needs_grad {
                    let gg = Self::grad_buf(before, *gain);
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        for p in 0..d {
                            let xhat = (xv[r * d + p] - mean) * inv_std;
                            gg[p] += gout[r * d + p] * xhat;
                        }
                    }
                }
                if before[bias.0].needs_grad {
                    let gb = Self::grad_buf(before, *bias);
                    for r in 0..rows {
                        for p in 0..d {
                            gb[p] += gout[r * d + p];
                        }
                    }
                }
                if before[x.0].needs_grad {
                    let gx = Self::grad_buf(before, *x);
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for p in 0..d {
                            let xhat = (xv[r * d + p] - mean) * inv_std;
                            let dxhat = gout[r * d + p] * gv[p];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for p in 0..d {
                            let xhat = (xv[r * d + p] - mean) * inv_std;
                            let dxhat = gout[r * d + p] * gv[p];
                            gx[r * d + p] +=
                                inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if before[table.0].needs_grad {
                    let d = *node.shape.last().unwrap();
                    let gt = Self::grad_buf(before, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        let src = &gout[i * d..(i + 1) * d];
                        for (g, &s) in dst.iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let da = *before[a.0].shape.last().unwrap();
                let db = *before[b.0].shape.last().unwrap();
                let rows = node.data.len() / (da + db);
                if before[a.0].needs_grad {
                    let ga = Self::grad_buf(before, *a);
                    for r in 0..rows {
                        let src = &gout[r * (da + db)..r * (da + db) + da];
                        for (g, &s) in ga[r * da..(r + 1) * da].iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
                if before[b.0].needs_grad {
                    let gb = Self::grad_buf(before, *b);
                    for r in 0..rows {
                        let src = &gout[r * (da + db) + da..(r + 1) * (da + db)];
                        for (g, &s) in gb[r * db..(r + 1) * db].iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if before[x.0].needs_grad {
                    let (h, t, dk) = (node.shape[0], node.shape[1], node.shape[2]);
                    debug_assert_eq!(h, *heads);
                    let d = h * dk;
                    let gx = Self::grad_buf(before, *x);
                    for hh in 0..h {
                        for i in 0..t {
                            let src = hh * t * dk + i * dk;
                            let dst = i * d + hh * dk;
                            for p in 0..dk {
                                gx[dst + p] += gout[src + p];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads(x) => {
                if before[x.0].needs_grad {
                    let sx = before[x.0].shape.clone();
                    let (h, t, dk) = (sx[0], sx[1], sx[2]);
                    let d = h * dk;
                    let gx = Self::grad_buf(before, *x);
                    for hh in 0..h {
                        for i in 0..t {
                            let dst = hh * t * dk + i * dk;
                            let src = i * d + hh * dk;
                            for p in 0..dk {
                                gx[dst + p] += gout[src + p];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                inv_denom,
            } => {
                if before[logits.0].needs_grad && !probs.is_empty() {
                    let v = before[logits.0].shape[1];
                    let d = gout[0] * *inv_denom;
                    let gl = Self::grad_buf(before, *logits);
                    for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        let prow = &probs[r * v..(r + 1) * v];
                        let grow = &mut gl[r * v..(r + 1) * v];
                        for (g, &p) in grow.iter_mut().zip(prow) {
                            *g += d * p;
                        }
                        grow[y as usize] -= d;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_check, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf64(g: &mut Graph<f64>, shape: &[usize], data: &[f64], rg: bool) -> TensorId {
        g.leaf_from(shape.to_vec(), data.to_vec(), rg)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i2 = leaf64(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0], false);
        let b = leaf64(&mut g, &[2, 2], &[5.0, 6.0, 7.0, 8.0], false);
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);

        let a = leaf64(&mut g, &[1, 2], &[1.0, 2.0], false);
        let v = leaf64(&mut g, &[2, 1], &[3.0, 4.0], false);
        let d = g.matmul(a, v).unwrap();
        assert_eq!(g.data(d), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent oracle: naive i/j/p triple loop, accumulation over p.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(4usize, 3usize, 2usize), (16, 16, 16), (5, 9, 7)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut oracle = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p] * b[p * n + j];
                    }
                    oracle[i * n + j] = acc;
                }
            }
            let mut g = Graph::<f64>::new();
            let ta = leaf64(&mut g, &[m, k], &a, false);
            let tb = leaf64(&mut g, &[k, n], &b, false);
            let c = g.matmul(ta, tb).unwrap();
            for (x, y) in g.data(c).iter().zip(&oracle) {
                assert!((x - y).abs() <= 1e-12, "{m}x{k}x{n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_rejects_shape_mismatch_with_report() {
        let mut g = Graph::<f64>::new();
        let a = leaf64(&mut g, &[2, 3], &[0.0; 6], false);
        let b = leaf64(&mut g, &[2, 2], &[0.0; 4], false);
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            CoreError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 2]
            }
        );
    }

    #[test]
    fn softmax_masked_examples() {
        let mut g = Graph::<f64>::new();
        // symmetric logits, no mask
        let x = leaf64(&mut g, &[1, 3], &[1.0, 1.0, 1.0], false);
        let m = leaf64(&mut g, &[1, 3], &[0.0, 0.0, 0.0], false);
        let y = g.softmax_masked(x, m).unwrap();
        for &p in g.data(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        // single unmasked entry
        let x = leaf64(&mut g, &[1, 2], &[5.0, 0.0], false);
        let m = leaf64(&mut g, &[1, 2], &[0.0, f64::NEG_INFINITY], false);
        let y = g.softmax_masked(x, m).unwrap();
        assert_eq!(g.data(y), &[1.0, 0.0]);
        // closed-form two-way softmax: logits [2,1,0], mask [0,0,-inf]
        let x = leaf64(&mut g, &[1, 3], &[2.0, 1.0, 0.0], false);
        let m = leaf64(&mut g, &[1, 3], &[0.0, 0.0, f64::NEG_INFINITY], false);
        let y = g.softmax_masked(x, m).unwrap();
        let e = std::f64::consts::E;
        assert!((g.data(y)[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((g.data(y)[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert_eq!(g.data(y)[2], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, v) = (6, 9);
        let x: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        // random mask with at least one open entry per row
        let mut m = vec![0.0f64; t * v];
        for r in 0..t {
            for c in 0..v {
                if rng.gen_bool(0.4) {
                    m[r * v + c] = f64::NEG_INFINITY;
                }
            }
            m[r * v + rng.gen_range(0..v)] = 0.0;
        }
        let mut g = Graph::<f64>::new();
        let tx = leaf64(&mut g, &[t, v], &x, false);
        let tm = leaf64(&mut g, &[t, v], &m, false);
        let y = g.softmax_masked(tx, tm).unwrap();
        for r in 0..t {
            let row = &g.data(y)[r * v..(r + 1) * v];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            for c in 0..v {
                if m[r * v + c].is_infinite() {
                    assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let ones = leaf64(&mut g, &[3], &[1.0; 3], false);
        let zeros = leaf64(&mut g, &[3], &[0.0; 3], false);
        // constant vector normalizes to zero
        let x = leaf64(&mut g, &[1, 3], &[3.0, 3.0, 3.0], false);
        let y = g.layer_norm(x, ones, zeros).unwrap();
        for &v in g.data(y) {
            assert_eq!(v, 0.0);
        }
        // [1,-1]: mean 0, var 1 -> out = x / sqrt(1 + 1e-5)
        let ones2 = leaf64(&mut g, &[2], &[1.0; 2], false);
        let zeros2 = leaf64(&mut g, &[2], &[0.0; 2], false);
        let x = leaf64(&mut g, &[1, 2], &[1.0, -1.0], false);
        let y = g.layer_norm(x, ones2, zeros2).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.data(y)[0] - expect).abs() < 1e-15);
        assert!((g.data(y)[1] + expect).abs() < 1e-15);
        // zero gain annihilates input, leaves bias
        let g0 = leaf64(&mut g, &[2], &[0.0; 2], false);
        let b = leaf64(&mut g, &[2], &[0.7, -0.3], false);
        let x = leaf64(&mut g, &[1, 2], &[13.0, 5.0], false);
        let y = g.layer_norm(x, g0, b).unwrap();
        assert_eq!(g.data(y), &[0.7, -0.3]);
    }

    #[test]
    fn cross_entropy_examples() {
        // confident correct: one-hot * 1e6
        let mut g = Graph::<f64>::new();
        let mut row = vec![0.0; 4];
        row[2] = 1e6;
        let l = leaf64(&mut g, &[1, 4], &row, false);
        let ce = g.cross_entropy(l, &[2], &[1.0]).unwrap();
        assert!(g.scalar_value(ce).abs() < 1e-12);
        // uniform logits over V=4 -> ln 4
        let l = leaf64(&mut g, &[2, 4], &[0.5; 8], false);
        let ce = g.cross_entropy(l, &[1, 3], &[1.0, 1.0]).unwrap();
        assert!((g.scalar_value(ce) - 4.0f64.ln()).abs() < 1e-12);
        // weights [1,0] equals single-position CE
        let data = [0.3, -0.7, 1.1, 0.0, 2.0, -2.0, 0.5, 0.25];
        let l = leaf64(&mut g, &[2, 4], &data, false);
        let ce = g.cross_entropy(l, &[0, 3], &[1.0, 0.0]).unwrap();
        let l1 = leaf64(&mut g, &[1, 4], &data[..4], false);
        let ce1 = g.cross_entropy(l1, &[0], &[1.0]).unwrap();
        assert!((g.scalar_value(ce) - g.scalar_value(ce1)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_all_zero_weights_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let l = leaf64(&mut g, &[2, 3], &[0.3; 6], true);
        let ce = g.cross_entropy(l, &[0, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(g.scalar_value(ce), 0.0);
        g.backward(ce).unwrap();
        assert!(g.grad(l).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_square_and_softmax_sum() {
        // f = x*x at x=3 -> grad 6
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, &[1], &[3.0], true);
        let f = g.mul(x, x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x), vec![6.0]);

        // f = sum(softmax(x)) -> grad 0 everywhere
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, &[1, 4], &[0.3, -1.0, 2.0, 0.1], true);
        let m = leaf64(&mut g, &[1, 4], &[0.0; 4], false);
        let s = g.softmax_masked(x, m).unwrap();
        let f = g.sum(s);
        g.backward(f).unwrap();
        for v in g.grad(x) {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_rejected_until_reset() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, &[1], &[2.0], true);
        let f = g.mul(x, x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.backward(f).unwrap_err(), CoreError::BackwardTwice);
        g.reset_grads();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x), vec![4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = leaf64(&mut g, &[1], &[2.0], true);
        let unused = leaf64(&mut g, &[2], &[1.0, 1.0], true);
        let f = g.mul(x, x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(unused), vec![0.0, 0.0]);
    }

    /// Builds a scalar loss from composed ops and checks every input
    /// coordinate against central differences.
    fn check_op_grads(
        build: impl Fn(&mut Graph<f64>, TensorId) -> TensorId,
        x0: &[f64],
        shape: &[usize],
        tol: f64,
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf_from(shape.to_vec(), x0.to_vec(), true);
        let loss = build(&mut g, x);
        g.backward(loss).unwrap();
        let analytic = g.grad(x);
        let mut f = |xs: &[f64]| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf_from(shape.to_vec(), xs.to_vec(), false);
            let loss = build(&mut g, x);
            g.scalar_value(loss)
        };
        let coords: Vec<usize> = (0..x0.len()).collect();
        let rep = fd_check(&mut f, x0, &analytic, 1e-5, &coords).unwrap();
        assert!(rep.max_rel_err < tol, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn per_op_gradchecks_pass_at_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.5..1.5)).collect();

        // matmul with a fixed right operand, then sum-of-squares
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc = w.clone();
        check_op_grads(
            move |g, x| {
                let w = g.leaf_from(vec![4, 3], wc.clone(), false);
                let y = g.matmul(x, w).unwrap();
                let y2 = g.mul(y, y).unwrap();
                g.sum(y2)
            },
            &x0,
            &[3, 4],
            1e-6,
        );

        // masked softmax pushed through a quadratic
        check_op_grads(
            |g, x| {
                let m = g.leaf_from(
                    vec![3, 4],
                    vec![
                        0.0,
                        0.0,
                        f64::NEG_INFINITY,
                        0.0,
                        0.0,
                        0.0,
                        0.0,
                        f64::NEG_INFINITY,
                        0.0,
                        0.0,
                        0.0,
                        0.0,
                    ],
                    false,
                );
                let y = g.softmax_masked(x, m).unwrap();
                let y2 = g.mul(y, y).unwrap();
                g.sum(y2)
            },
            &x0,
            &[3, 4],
            1e-6,
        );

        // layer norm with affine params folded into the loss
        check_op_grads(
            |g, x| {
                let gain = g.leaf_from(vec![4], vec![1.1, 0.9, -0.3, 0.5], false);
                let bias = g.leaf_from(vec![4], vec![0.1, -0.2, 0.0, 0.3], false);
                let y = g.layer_norm(x, gain, bias).unwrap();
                let y2 = g.mul(y, y).unwrap();
                g.sum(y2)
            },
            &x0,
            &[3, 4],
            1e-6,
        );

        // gelu
        check_op_grads(
            |g, x| {
                let y = g.gelu(x);
                let y2 = g.mul(y, y).unwrap();
                g.sum(y2)
            },
            &x0,
            &[3, 4],
            1e-6,
        );

        // cross entropy
        check_op_grads(
            |g, x| g.cross_entropy(x, &[1, 0, 3], &[1.0, 0.0, 1.0]).unwrap(),
            &x0,
            &[3, 4],
            1e-6,
        );

        // concat + split/merge heads + batched matmul_nt
        check_op_grads(
            |g, x| {
                let y = g.concat_last(x, x).unwrap(); // [3, 8]
                let h = g.split_heads(y, 2).unwrap(); // [2, 3, 4]
                let s = g.matmul_nt(h, h).unwrap(); // [2, 3, 3]
                let m = g.leaf_from(vec![3, 3], vec![0.0; 9], false);
                let p = g.softmax_masked(s, m).unwrap();
                let c = g.matmul(p, h).unwrap(); // [2, 3, 4]
                let mm = g.merge_heads(c).unwrap(); // [3, 8]
                let y2 = g.mul(mm, mm).unwrap();
                g.sum(y2)
            },
            &x0,
            &[3, 4],
            1e-6,
        );
    }

    #[test]
    fn single_attention_layer_gradcheck() {
        // One full attention layer (QKV projections, scaled masked softmax,
        // output projection) checked against central differences.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, d, heads) = (4usize, 8usize, 2usize);
        let dk = d / heads;
        let x: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nparam = 4 * d * d;
        let w0: Vec<f64> = (0..nparam).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let causal: Vec<f64> = (0..t * t)
            .map(|i| {
                if i % t <= i / t {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();

        let run = |params: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::<f64>::new();
            let xl = g.leaf_from(vec![t, d], x.clone(), false);
            let wq = g.leaf_from(vec![d, d], params[0..d * d].to_vec(), want_grad);
            let wk = g.leaf_from(vec![d, d], params[d * d..2 * d * d].to_vec(), want_grad);
            let wv = g.leaf_from(vec![d, d], params[2 * d * d..3 * d * d].to_vec(), want_grad);
            let wo = g.leaf_from(vec![d, d], params[3 * d * d..4 * d * d].to_vec(), want_grad);
            let q = g.matmul(xl, wq).unwrap();
            let k = g.matmul(xl, wk).unwrap();
            let v = g.matmul(xl, wv).unwrap();
            let qh = g.split_heads(q, heads).unwrap();
            let kh = g.split_heads(k, heads).unwrap();
            let vh = g.split_heads(v, heads).unwrap();
            let scores = g.matmul_nt(qh, kh).unwrap();
            let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
            let mask = g.leaf_from(vec![t, t], causal.clone(), false);
            let probs = g.softmax_masked(scaled, mask).unwrap();
            let ctx = g.matmul(probs, vh).unwrap();
            let merged = g.merge_heads(ctx).unwrap();
            let out = g.matmul(merged, wo).unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.sum(sq);
            if want_grad {
                g.backward(loss).unwrap();
                let mut grad = Vec::with_capacity(nparam);
                grad.extend(g.grad(wq));
                grad.extend(g.grad(wk));
                grad.extend(g.grad(wv));
                grad.extend(g.grad(wo));
                (g.scalar_value(loss), Some(grad))
            } else {
                (g.scalar_value(loss), None)
            }
        };

        let (_, grad) = run(&w0, true);
        let analytic = grad.unwrap();
        let mut f = |p: &[f64]| run(p, false).0;
        let coords: Vec<usize> = (0..nparam).step_by(7).collect();
        let rep = fd_check(&mut f, &w0, &analytic, 1e-5, &coords).unwrap();
        assert!(rep.max_rel_err < 1e-6, "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn rel_err_floor_guards_tiny_gradients() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-3);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf_from(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let y = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(y), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let mut g = Graph::<f64>::new();
        let table = g.leaf_from(vec![3, 2], vec![0.0; 6], false);
        assert!(matches!(
            g.embedding(table, &[3]).unwrap_err(),
            CoreError::TokenOutOfRange { id: 3, vocab: 3 }
        ));
    }
}
