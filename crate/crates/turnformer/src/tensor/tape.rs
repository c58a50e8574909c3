//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Tape::backward`] consumes the tape, sweeps the nodes in reverse,
//! and returns gradients for every leaf registered through [`Tape::watch`].
//! A fresh tape is built for every training step.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, NodeRef, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: E },
    Relu { a: usize },
    Log { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: E },
    MeanRows { a: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    Sum { a: usize },
    CrossEntropyLogits { logits: usize, target: usize },
}

struct Node<E> {
    op: Op<E>,
    value: Arc<Vec<E>>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the watched leaves, keyed by
/// the name given to [`Tape::watch`].
#[derive(Debug)]
pub struct Gradients<E> {
    by_name: HashMap<String, Tensor<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.by_name.get(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.by_name.iter()
    }
}

pub struct Tape<E: Element> {
    id: u64,
    nodes: Vec<Node<E>>,
    watched: Vec<(String, usize)>,
    watched_ids: HashMap<String, usize>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            watched: Vec::new(),
            watched_ids: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op<E>,
        rows: usize,
        cols: usize,
        value: Vec<E>,
        grad: bool,
    ) -> Result<Tensor<E>> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        let id = self.nodes.len();
        let value = Arc::new(value);
        self.nodes.push(Node {
            op,
            value: Arc::clone(&value),
            rows,
            cols,
            requires_grad: grad,
        });
        Ok(Tensor::from_arc(value, rows, cols).with_node(NodeRef { tape: self.id, id }, grad))
    }

    /// Resolves a tensor to a node id on this tape, interning detached
    /// tensors (and tensors from other tapes) as constant leaves.
    fn intern(&mut self, t: &Tensor<E>) -> usize {
        if let Some(nref) = t.node {
            if nref.tape == self.id {
                return nref.id;
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t.data_arc(),
            rows: t.rows(),
            cols: t.cols(),
            requires_grad: false,
        });
        id
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Binds a constant onto the tape. Equivalent to letting an op intern it,
    /// but reusable across several ops.
    pub fn constant(&mut self, t: &Tensor<E>) -> Tensor<E> {
        let id = self.intern(t);
        t.detach().with_node(NodeRef { tape: self.id, id }, false)
    }

    /// Registers a differentiable leaf under a stable name. Watching the same
    /// name twice returns the original binding, so shared parameters unify.
    pub fn watch(&mut self, name: &str, t: &Tensor<E>) -> Tensor<E> {
        if let Some(&id) = self.watched_ids.get(name) {
            let node = &self.nodes[id];
            return Tensor::from_arc(Arc::clone(&node.value), node.rows, node.cols)
                .with_node(NodeRef { tape: self.id, id }, true);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t.data_arc(),
            rows: t.rows(),
            cols: t.cols(),
            requires_grad: true,
        });
        self.watched.push((name.to_string(), id));
        self.watched_ids.insert(name.to_string(), id);
        t.detach().with_node(NodeRef { tape: self.id, id }, true)
    }

    // ── Forward operations ───────────────────────────────────────────

    /// Standard matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.cols() != b.rows() {
            return Err(Error::Dim {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = matmul_raw(a.data(), b.data(), m, k, n);
        let (ia, ib) = (self.intern(a), self.intern(b));
        let grad = self.needs_grad(&[ia, ib]);
        self.push(Op::Matmul { a: ia, b: ib }, m, n, out, grad)
    }

    pub fn transpose(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![E::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = a.get(r, c);
            }
        }
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::Transpose { a: ia }, n, m, out, grad)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::Dim {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
        let (ia, ib) = (self.intern(a), self.intern(b));
        let grad = self.needs_grad(&[ia, ib]);
        self.push(Op::Add { a: ia, b: ib }, a.rows(), a.cols(), out, grad)
    }

    /// Adds a 1×n bias row to every row of `a[m×n]`.
    pub fn add_bias(&mut self, a: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        if bias.rows() != 1 || bias.cols() != a.cols() {
            return Err(Error::Dim {
                op: "add_bias",
                lhs: a.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(a.numel());
        for r in 0..a.rows() {
            for (x, y) in a.row(r).iter().zip(bias.data()) {
                out.push(*x + *y);
            }
        }
        let (ia, ib) = (self.intern(a), self.intern(bias));
        let grad = self.needs_grad(&[ia, ib]);
        self.push(Op::AddBias { a: ia, b: ib }, a.rows(), a.cols(), out, grad)
    }

    /// Hadamard product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.shape() != b.shape() {
            return Err(Error::Dim {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
        let (ia, ib) = (self.intern(a), self.intern(b));
        let grad = self.needs_grad(&[ia, ib]);
        self.push(Op::Mul { a: ia, b: ib }, a.rows(), a.cols(), out, grad)
    }

    pub fn scale(&mut self, a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
        let out = a.data().iter().map(|x| *x * c).collect();
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::Scale { a: ia, c }, a.rows(), a.cols(), out, grad)
    }

    pub fn relu(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let out = a.data().iter().map(|x| x.max(E::zero())).collect();
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::Relu { a: ia }, a.rows(), a.cols(), out, grad)
    }

    /// Natural log, elementwise. Caller must guarantee positive inputs.
    pub fn log(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        if a.data().iter().any(|x| *x <= E::zero()) {
            return Err(Error::Contract("log of non-positive value".into()));
        }
        let out = a.data().iter().map(|x| x.ln()).collect();
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::Log { a: ia }, a.rows(), a.cols(), out, grad)
    }

    /// Row-wise softmax with row-max subtraction, so arbitrary input
    /// magnitudes do not overflow.
    pub fn softmax_rows(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        if a.cols() == 0 {
            return Err(Error::Dim {
                op: "softmax_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = softmax_rows_raw(a.data(), a.rows(), a.cols());
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::SoftmaxRows { a: ia }, a.rows(), a.cols(), out, grad)
    }

    /// Per-row layer normalization with affine rescale:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> Result<Tensor<E>> {
        if gamma.rows() != 1 || gamma.cols() != x.cols() || beta.shape() != gamma.shape() {
            return Err(Error::Dim {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let n = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            let row = x.row(r);
            let (mean, var) = mean_var(row);
            let inv_std = (var + eps).sqrt().recip();
            for (i, v) in row.iter().enumerate() {
                out.push((*v - mean) * inv_std * gamma.data()[i] + beta.data()[i]);
            }
        }
        let (ix, ig, ib) = (self.intern(x), self.intern(gamma), self.intern(beta));
        let grad = self.needs_grad(&[ix, ig, ib]);
        self.push(
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                eps,
            },
            x.rows(),
            n,
            out,
            grad,
        )
    }

    /// Column-wise mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        if a.rows() == 0 {
            return Err(Error::Contract("mean_rows on empty tensor".into()));
        }
        let out = a.mean_rows()?.data().to_vec();
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::MeanRows { a: ia }, 1, a.cols(), out, grad)
    }

    /// Horizontal concatenation of same-height tensors.
    pub fn concat_cols(&mut self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        let value = Tensor::concat_cols(parts)?;
        let ids: Vec<usize> = parts.iter().map(|p| self.intern(p)).collect();
        let grad = self.needs_grad(&ids);
        self.push(
            Op::ConcatCols { parts: ids },
            value.rows(),
            value.cols(),
            value.data().to_vec(),
            grad,
        )
    }

    /// Copies columns `start..start+len`.
    pub fn slice_cols(&mut self, a: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
        if start + len > a.cols() {
            return Err(Error::Contract(format!(
                "column slice {}..{} out of range for {} cols",
                start,
                start + len,
                a.cols()
            )));
        }
        let mut out = Vec::with_capacity(a.rows() * len);
        for r in 0..a.rows() {
            out.extend_from_slice(&a.row(r)[start..start + len]);
        }
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::SliceCols { a: ia, start }, a.rows(), len, out, grad)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let s = a.data().iter().copied().sum();
        let ia = self.intern(a);
        let grad = self.needs_grad(&[ia]);
        self.push(Op::Sum { a: ia }, 1, 1, vec![s], grad)
    }

    /// Cross-entropy `-ln softmax(logits)[target]` fused from pre-softmax
    /// logits (1×C) in log-sum-exp form.
    pub fn cross_entropy_logits(&mut self, logits: &Tensor<E>, target: usize) -> Result<Tensor<E>> {
        if logits.rows() != 1 || logits.cols() < 2 {
            return Err(Error::Contract(format!(
                "cross_entropy expects a 1xC logits row with C >= 2, got {:?}",
                logits.shape()
            )));
        }
        if target >= logits.cols() {
            return Err(Error::Contract(format!(
                "target class {} out of range [0, {})",
                target,
                logits.cols()
            )));
        }
        let row = logits.data();
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<E>().ln();
        let loss = lse - row[target];
        let il = self.intern(logits);
        let grad = self.needs_grad(&[il]);
        self.push(
            Op::CrossEntropyLogits { logits: il, target },
            1,
            1,
            vec![loss],
            grad,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape and returns the
    /// gradient of the loss with respect to every watched leaf.
    pub fn backward(self, loss: &Tensor<E>) -> Result<Gradients<E>> {
        let nref = loss.node.ok_or_else(|| {
            Error::Contract("backward on a detached loss (no tape handle)".into())
        })?;
        if nref.tape != self.id {
            return Err(Error::Contract(
                "backward on a loss from a different tape".into(),
            ));
        }
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }

        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        grads[nref.id] = Some(vec![E::one()]);

        for i in (0..nodes.len()).rev() {
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[i].requires_grad {
                continue;
            }
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (nodes[a].rows, nodes[a].cols);
                    let n = nodes[b].cols;
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let bt = transpose_raw(&nodes[b].value, k, n);
                    let da = matmul_raw(&gout, &bt, m, n, k);
                    let at = transpose_raw(&nodes[a].value, m, k);
                    let db = matmul_raw(&at, &gout, k, m, n);
                    accumulate(&mut grads, &nodes, a, da);
                    accumulate(&mut grads, &nodes, b, db);
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let (m, n) = (nodes[i].rows, nodes[i].cols);
                    accumulate(&mut grads, &nodes, a, transpose_raw(&gout, m, n));
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, &nodes, a, gout.clone());
                    accumulate(&mut grads, &nodes, b, gout);
                }
                Op::AddBias { a, b } => {
                    let (a, b) = (*a, *b);
                    let n = nodes[i].cols;
                    let mut db = vec![E::zero(); n];
                    for r in 0..nodes[i].rows {
                        for c in 0..n {
                            db[c] = db[c] + gout[r * n + c];
                        }
                    }
                    accumulate(&mut grads, &nodes, a, gout);
                    accumulate(&mut grads, &nodes, b, db);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da: Vec<E> = gout
                        .iter()
                        .zip(nodes[b].value.iter())
                        .map(|(g, v)| *g * *v)
                        .collect();
                    let db: Vec<E> = gout
                        .iter()
                        .zip(nodes[a].value.iter())
                        .map(|(g, v)| *g * *v)
                        .collect();
                    accumulate(&mut grads, &nodes, a, da);
                    accumulate(&mut grads, &nodes, b, db);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    accumulate(&mut grads, &nodes, a, gout.iter().map(|g| *g * c).collect());
                }
                Op::Relu { a } => {
                    let a = *a;
                    let da: Vec<E> = gout
                        .iter()
                        .zip(nodes[a].value.iter())
                        .map(|(g, x)| if *x > E::zero() { *g } else { E::zero() })
                        .collect();
                    accumulate(&mut grads, &nodes, a, da);
                }
                Op::Log { a } => {
                    let a = *a;
                    let da: Vec<E> = gout
                        .iter()
                        .zip(nodes[a].value.iter())
                        .map(|(g, x)| *g / *x)
                        .collect();
                    accumulate(&mut grads, &nodes, a, da);
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    let (m, n) = (nodes[i].rows, nodes[i].cols);
                    let s = &nodes[i].value;
                    let mut da = vec![E::zero(); m * n];
                    for r in 0..m {
                        let base = r * n;
                        let mut dot = E::zero();
                        for c in 0..n {
                            dot = dot + gout[base + c] * s[base + c];
                        }
                        for c in 0..n {
                            da[base + c] = s[base + c] * (gout[base + c] - dot);
                        }
                    }
                    accumulate(&mut grads, &nodes, a, da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let (m, n) = (nodes[i].rows, nodes[i].cols);
                    let xv = &nodes[x].value;
                    let gv = &nodes[gamma].value;
                    let nf = E::from_f64(n as f64);
                    let mut dx = vec![E::zero(); m * n];
                    let mut dgamma = vec![E::zero(); n];
                    let mut dbeta = vec![E::zero(); n];
                    for r in 0..m {
                        let base = r * n;
                        let row = &xv[base..base + n];
                        let (mean, var) = mean_var(row);
                        let inv_std = (var + eps).sqrt().recip();
                        let xhat: Vec<E> = row.iter().map(|v| (*v - mean) * inv_std).collect();
                        let g = &gout[base..base + n];
                        let mut dxhat = vec![E::zero(); n];
                        for c in 0..n {
                            dgamma[c] = dgamma[c] + g[c] * xhat[c];
                            dbeta[c] = dbeta[c] + g[c];
                            dxhat[c] = g[c] * gv[c];
                        }
                        let sum_dxhat: E = dxhat.iter().copied().sum();
                        let sum_dxhat_xhat: E =
                            dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum();
                        for c in 0..n {
                            dx[base + c] = inv_std / nf
                                * (nf * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, &nodes, x, dx);
                    accumulate(&mut grads, &nodes, gamma, dgamma);
                    accumulate(&mut grads, &nodes, beta, dbeta);
                }
                Op::MeanRows { a } => {
                    let a = *a;
                    let m = nodes[a].rows;
                    let n = nodes[a].cols;
                    let inv = E::from_f64(1.0 / m as f64);
                    let mut da = vec![E::zero(); m * n];
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = gout[c] * inv;
                        }
                    }
                    accumulate(&mut grads, &nodes, a, da);
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let m = nodes[i].rows;
                    let total = nodes[i].cols;
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p].cols;
                        let mut dp = vec![E::zero(); m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, &nodes, p, dp);
                    }
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    let (m, w) = (nodes[i].rows, nodes[i].cols);
                    let n = nodes[a].cols;
                    let mut da = vec![E::zero(); m * n];
                    for r in 0..m {
                        da[r * n + start..r * n + start + w]
                            .copy_from_slice(&gout[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, &nodes, a, da);
                }
                Op::Sum { a } => {
                    let a = *a;
                    let g = gout[0];
                    accumulate(&mut grads, &nodes, a, vec![g; nodes[a].rows * nodes[a].cols]);
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let row = &nodes[logits].value;
                    let probs = softmax_rows_raw(row, 1, row.len());
                    let g = gout[0];
                    let da: Vec<E> = probs
                        .iter()
                        .enumerate()
                        .map(|(c, p)| {
                            let t = if c == target { E::one() } else { E::zero() };
                            g * (*p - t)
                        })
                        .collect();
                    accumulate(&mut grads, &nodes, logits, da);
                }
            }
        }

        let mut by_name = HashMap::with_capacity(self.watched.len());
        for (name, id) in self.watched {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| vec![E::zero(); nodes[id].rows * nodes[id].cols]);
            by_name.insert(
                name,
                Tensor::from_vec(nodes[id].rows, nodes[id].cols, g).unwrap(),
            );
        }
        Ok(Gradients { by_name })
    }
}

fn op_name<E>(op: &Op<E>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Log { .. } => "log",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MeanRows { .. } => "mean_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::Sum { .. } => "sum",
        Op::CrossEntropyLogits { .. } => "cross_entropy",
    }
}

fn accumulate<E: Element>(
    grads: &mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    id: usize,
    delta: Vec<E>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a = *a + *b;
            }
        }
        slot => *slot = Some(delta),
    }
}

pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + *av * *bv;
            }
        }
    }
    out
}

fn transpose_raw<E: Element>(a: &[E], m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a[r * n + c];
        }
    }
    out
}

pub(crate) fn softmax_rows_raw<E: Element>(a: &[E], m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for r in 0..m {
        let row = &a[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut sum = E::zero();
        for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (*v - max).exp();
            sum = sum + *o;
        }
        for o in out[r * n..(r + 1) * n].iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

fn mean_var<E: Element>(row: &[E]) -> (E, E) {
    let nf = E::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<E>() / nf;
    let var = row
        .iter()
        .map(|v| (*v - mean) * (*v - mean))
        .sum::<E>()
        / nf;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    /// Independent triple-loop reference product (i-j-k order, unlike the
    /// implementation's i-k-j kernel).
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = tape.matmul(&i2, &a).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_scalar_case() {
        let mut tape = Tape::new();
        let a = Tensor::scalar(2.0f64);
        let b = Tensor::scalar(3.0f64);
        assert_eq!(tape.matmul(&a, &b).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let c = tape.matmul(&a, &b).unwrap();
        assert_close(c.data(), &matmul_oracle(&a, &b), 1e-6);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 3);
        match tape.matmul(&a, &b) {
            Err(Error::Dim { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected Dim error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = tape.softmax_rows(&x).unwrap();
        assert_close(s.data(), &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn softmax_ln3_row() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap();
        let s = tape.softmax_rows(&x).unwrap();
        assert_close(s.data(), &[0.25, 0.75], 1e-12);
    }

    #[test]
    fn softmax_large_magnitudes_shift_invariant() {
        let mut tape = Tape::new();
        let big = Tensor::from_rows(&[vec![1000.0, 1000.0, 1001.0]]).unwrap();
        let small = Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let sb = tape.softmax_rows(&big).unwrap();
        let ss = tape.softmax_rows(&small).unwrap();
        assert!(sb.is_finite());
        assert_close(sb.data(), ss.data(), 1e-12);
    }

    #[test]
    fn softmax_empty_row_extent_is_dimension_error() {
        let mut tape = Tape::new();
        let x = Tensor::<f64>::zeros(2, 0);
        assert!(matches!(tape.softmax_rows(&x), Err(Error::Dim { .. })));
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = Tape::new();
        let x = tape.watch("x", &Tensor::scalar(3.0f64));
        let y = tape.mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_close(grads.get("x").unwrap().data(), &[6.0], 1e-12);
    }

    #[test]
    fn backward_cross_entropy_closed_form() {
        // d loss / d logits = softmax(logits) - one_hot(target)
        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.0]]).unwrap();
        let target = 2;
        let mut tape = Tape::new();
        let z = tape.watch("z", &logits);
        let loss = tape.cross_entropy_logits(&z, target).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let p = softmax_rows_raw(logits.data(), 1, 4);
        let expected: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, p)| p - if c == target { 1.0 } else { 0.0 })
            .collect();
        assert_close(grads.get("z").unwrap().data(), &expected, 1e-12);
    }

    #[test]
    fn backward_composed_graph_matches_finite_differences() {
        // loss = sum(softmax_rows(x · w) ⊙ r) wiggled elementwise.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random_tensor(&mut rng, 2, 3);
        let w0 = random_tensor(&mut rng, 3, 3);
        let r = random_tensor(&mut rng, 2, 3);

        let eval = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let h = tape.matmul(x, w).unwrap();
            let s = tape.softmax_rows(&h).unwrap();
            let weighted = tape.mul(&s, &r).unwrap();
            tape.sum(&weighted).unwrap().item()
        };

        let mut tape = Tape::new();
        let x = tape.watch("x", &x0);
        let w = tape.watch("w", &w0);
        let h = tape.matmul(&x, &w).unwrap();
        let s = tape.softmax_rows(&h).unwrap();
        let weighted = tape.mul(&s, &r).unwrap();
        let loss = tape.sum(&weighted).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let eps = 1e-5;
        for (name, base) in [("x", &x0), ("w", &w0)] {
            let g = grads.get(name).unwrap();
            for i in 0..base.numel() {
                let mut plus = base.data().to_vec();
                let mut minus = base.data().to_vec();
                plus[i] += eps;
                minus[i] -= eps;
                let tp = Tensor::from_vec(base.rows(), base.cols(), plus).unwrap();
                let tm = Tensor::from_vec(base.rows(), base.cols(), minus).unwrap();
                let (fp, fm) = match name {
                    "x" => (eval(&tp, &w0), eval(&tm, &w0)),
                    _ => (eval(&x0, &tp), eval(&x0, &tm)),
                };
                let fd = (fp - fm) / (2.0 * eps);
                let ad = g.data()[i];
                let rel = (ad - fd).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-4, "{name}[{i}]: ad={ad} fd={fd} rel={rel}");
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.watch("x", &Tensor::<f64>::zeros(2, 2));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let tape = Tape::<f64>::new();
        let loss = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&loss), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_watched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.watch("x", &Tensor::scalar(2.0f64));
        let _unused = tape.watch("u", &Tensor::<f64>::zeros(2, 2));
        let y = tape.mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.get("u").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn watch_same_name_reuses_binding() {
        let mut tape = Tape::new();
        let w = Tensor::scalar(5.0f64);
        let a = tape.watch("w", &w);
        let b = tape.watch("w", &w);
        // y = w * w through two bindings of the same leaf
        let y = tape.mul(&a, &b).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_close(grads.get("w").unwrap().data(), &[10.0], 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in proptest::collection::vec(
                proptest::collection::vec(-50.0f64..50.0, 1..6), 1..5),
            shift in -100.0f64..100.0,
        ) {
            let cols = rows[0].len();
            prop_assume!(rows.iter().all(|r| r.len() == cols));
            let x = Tensor::from_rows(&rows).unwrap();
            let shifted_rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|v| v + shift).collect())
                .collect();
            let y = Tensor::from_rows(&shifted_rows).unwrap();
            let mut tape = Tape::new();
            let sx = tape.softmax_rows(&x).unwrap();
            let sy = tape.softmax_rows(&y).unwrap();
            for r in 0..sx.rows() {
                let sum: f64 = sx.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(sx.row(r).iter().all(|v| *v >= 0.0));
            }
            for (a, b) in sx.data().iter().zip(sy.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_scalar_associativity(seed in 0u64..1000, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, 3, 4);
            let b = random_tensor(&mut rng, 4, 2);
            let mut tape = Tape::new();
            let ca = tape.scale(&a, c).unwrap();
            let lhs = tape.matmul(&ca, &b).unwrap();
            let ab = tape.matmul(&a, &b).unwrap();
            let rhs = tape.scale(&ab, c).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

