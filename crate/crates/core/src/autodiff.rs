//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records each forward op as a node holding its output tensor
//! plus whatever the backward rule needs. [`Graph::backward`] walks the tape
//! in exact reverse order, accumulating gradients per node; a graph can be
//! consumed by backward only once.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// A trainable tensor: value plus an explicitly managed gradient slot.
///
/// Gradients accumulate across backward passes until [`Parameter::zero_grad`]
/// is called; batch-size-1 training makes that accumulation visible.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

enum Op {
    Leaf,
    /// Row gather from an embedding table: out[t] = table[ids[t]].
    Embed { table: NodeId, ids: Vec<u32> },
    /// C = A·B
    Matmul { a: NodeId, b: NodeId },
    /// C = A·Bᵀ (B stored row-major as [n×k])
    MatmulNt { a: NodeId, b: NodeId },
    /// Same-shape elementwise sum.
    Add { a: NodeId, b: NodeId },
    /// Matrix plus a bias vector broadcast over rows.
    AddBias { x: NodeId, bias: NodeId },
    Gelu { x: NodeId },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    },
    /// Softmax along `axis`; the saved output is the node value itself.
    Softmax { x: NodeId, axis: usize },
    /// Fused multi-head causal self-attention over q,k,v of shape [seq×d].
    /// `probs` holds the post-softmax attention weights laid out as
    /// [t][head][u] with zeros above the diagonal.
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        probs: Vec<f32>,
    },
    /// Row selection: out[r] = x[rows[r]].
    GatherRows { x: NodeId, rows: Vec<usize> },
    /// Summed token-level cross-entropy: one target per logits row.
    /// `probs` saves softmax(logits) rows for the backward rule.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        probs: Vec<f32>,
    },
    SumAll { x: NodeId },
    /// Σ w_i · x_i — scalar projection used to gradient-check ops.
    WeightedSum { x: NodeId, weights: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Topologically ordered record of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let tab = self.value(table);
        let (rows, cols) = (tab.rows(), tab.cols());
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id as usize,
                    size: rows,
                });
            }
        }
        let mut out = vec![0.0; ids.len() * cols];
        for (t, &id) in ids.iter().enumerate() {
            out[t * cols..(t + 1) * cols].copy_from_slice(tab.row(id as usize));
        }
        let value = Tensor::from_vec(vec![ids.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&mut out, ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// a · bᵀ, with b given row-major as [n×k]; used for weight-tied heads.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, kb) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(&mut out, ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f32> = ta.iter().zip(tb.iter()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.ndim() != 1 || tb.cols() != tx.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let cols = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f32) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.ndim() != 1 || tg.cols() != d || tb.ndim() != 1 || tb.cols() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; tx.len()];
        for (row, orow) in tx.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let (mean, inv_std) = row_stats(row, eps);
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if axis >= tx.ndim() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                size: tx.ndim(),
            });
        }
        let shape = tx.shape().to_vec();
        let (outer, span, inner) = axis_strides(&shape, axis);
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let mut lane: Vec<f32> = (0..span)
                    .map(|s| out[o * span * inner + s * inner + i])
                    .collect();
                kernels::softmax_in_place(&mut lane);
                for (s, v) in lane.into_iter().enumerate() {
                    out[o * span * inner + s * inner + i] = v;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }))
    }

    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
    ) -> Result<NodeId> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (seq, d) = (tq.rows(), tq.cols());
        if tk.shape() != tq.shape() || tv.shape() != tq.shape() {
            return Err(Error::Shape {
                op: "causal_attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        let mut out = vec![0.0; seq * d];
        let mut probs = vec![0.0; seq * n_heads * seq];
        attention_forward(
            &mut out,
            &mut probs,
            tq.data(),
            tk.data(),
            tv.data(),
            seq,
            d,
            n_heads,
        );
        let value = Tensor::from_vec(vec![seq, d], out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        for &row in rows {
            if row >= r {
                return Err(Error::Index {
                    what: "gather row",
                    index: row,
                    size: r,
                });
            }
        }
        let mut out = vec![0.0; rows.len() * c];
        for (i, &row) in rows.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(tx.row(row));
        }
        let value = Tensor::from_vec(vec![rows.len(), c], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// −log softmax(logits)[target] for a single logits vector.
    pub fn cross_entropy(&mut self, logits: NodeId, target: u32) -> Result<NodeId> {
        self.cross_entropy_rows(logits, &[target])
    }

    /// Sum of per-row cross-entropies; `targets[p]` indexes row p's classes.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let tl = self.value(logits);
        let (rows, classes) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t as usize >= classes {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t as usize,
                    size: classes,
                });
            }
        }
        let mut probs = vec![0.0; rows * classes];
        let mut loss = 0.0f32;
        for (p, &t) in targets.iter().enumerate() {
            let row = &tl.data()[p * classes..(p + 1) * classes];
            let lse = kernels::log_sum_exp(row);
            loss += lse - row[t as usize];
            let prow = &mut probs[p * classes..(p + 1) * classes];
            prow.copy_from_slice(row);
            kernels::softmax_in_place(prow);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.value(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f32>) -> Result<NodeId> {
        let tx = self.value(x);
        if weights.len() != tx.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: vec![tx.len()],
                rhs: vec![weights.len()],
            });
        }
        let s: f32 = tx.iter().zip(&weights).map(|(a, w)| a * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Consumes the graph: a second
    /// call is a graph-state error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph".to_string(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.grads = self.nodes.iter().map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[f32]) {
        let slot = &mut self.grads[id.0];
        match slot {
            Some(g) => kernels::axpy(g, 1.0, delta),
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backward_node(&mut self, i: usize, grad: &[f32]) {
        // Ops store only NodeIds and saved buffers, so the per-op data is
        // reconstructed locally before touching `self.grads`.
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Embed { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let cols = self.value(table).cols();
                let mut dt = vec![0.0; self.value(table).len()];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * cols..(id as usize + 1) * cols];
                    kernels::axpy(dst, 1.0, &grad[t * cols..(t + 1) * cols]);
                }
                self.accumulate(table, &dt);
            }

            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt(&mut da, grad, self.value(b).data(), m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn(&mut db, self.value(a).data(), grad, m, k, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }

            Op::MatmulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).rows();
                let mut da = vec![0.0; m * k];
                kernels::matmul(&mut da, grad, self.value(b).data(), m, n, k);
                let mut db = vec![0.0; n * k];
                kernels::matmul_tn(&mut db, grad, self.value(a).data(), m, n, k);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }

            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let cols = self.value(bias).cols();
                let mut db = vec![0.0; cols];
                for row in grad.chunks_exact(cols) {
                    kernels::axpy(&mut db, 1.0, row);
                }
                self.accumulate(x, grad);
                self.accumulate(bias, &db);
            }

            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<f32> = self
                    .value(x)
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| g * gelu_grad_scalar(v))
                    .collect();
                self.accumulate(x, &dx);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let d = self.value(x).cols();
                let xd = self.value(x).data().to_vec();
                let gd = self.value(gain).data().to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (row_idx, row) in xd.chunks_exact(d).enumerate() {
                    let grow = &grad[row_idx * d..(row_idx + 1) * d];
                    let (mean, inv_std) = row_stats(row, eps);
                    let xhat: Vec<f32> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut dxhat_sum = 0.0;
                    let mut dxhat_dot = 0.0;
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gd[j];
                        dxhat_sum += dxhat[j];
                        dxhat_dot += dxhat[j] * xhat[j];
                    }
                    let dn = d as f32;
                    for j in 0..d {
                        dx[row_idx * d + j] =
                            inv_std / dn * (dn * dxhat[j] - dxhat_sum - xhat[j] * dxhat_dot);
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }

            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[i].value.shape().to_vec();
                let sm = self.nodes[i].value.data().to_vec();
                let (outer, span, inner) = axis_strides(&shape, axis);
                let mut dx = vec![0.0; sm.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |s: usize| o * span * inner + s * inner + ii;
                        let dot: f32 = (0..span).map(|s| grad[idx(s)] * sm[idx(s)]).sum();
                        for s in 0..span {
                            dx[idx(s)] = sm[idx(s)] * (grad[idx(s)] - dot);
                        }
                    }
                }
                self.accumulate(x, &dx);
            }

            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
                let probs = probs.clone();
                let seq = self.value(q).rows();
                let d = self.value(q).cols();
                let mut dq = vec![0.0; seq * d];
                let mut dk = vec![0.0; seq * d];
                let mut dv = vec![0.0; seq * d];
                attention_backward(
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    grad,
                    &probs,
                    self.value(q).data(),
                    self.value(k).data(),
                    self.value(v).data(),
                    seq,
                    d,
                    n_heads,
                );
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
            }

            Op::GatherRows { x, rows } => {
                let (x, rows) = (*x, rows.clone());
                let cols = self.value(x).cols();
                let mut dx = vec![0.0; self.value(x).len()];
                for (r, &row) in rows.iter().enumerate() {
                    let dst = &mut dx[row * cols..(row + 1) * cols];
                    kernels::axpy(dst, 1.0, &grad[r * cols..(r + 1) * cols]);
                }
                self.accumulate(x, &dx);
            }

            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (logits, targets) = (*logits, targets.clone());
                let classes = self.value(logits).cols();
                let g = grad[0];
                let mut dl = probs.clone();
                for (p, &t) in targets.iter().enumerate() {
                    dl[p * classes + t as usize] -= 1.0;
                }
                for v in dl.iter_mut() {
                    *v *= g;
                }
                self.accumulate(logits, &dl);
            }

            Op::SumAll { x } => {
                let x = *x;
                let dx = vec![grad[0]; self.value(x).len()];
                self.accumulate(x, &dx);
            }

            Op::WeightedSum { x, weights } => {
                let (x, weights) = (*x, weights.clone());
                let dx: Vec<f32> = weights.iter().map(|w| w * grad[0]).collect();
                self.accumulate(x, &dx);
            }
        }
    }
}

#[inline]
fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

#[inline]
fn row_stats(row: &[f32], eps: f32) -> (f32, f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// (outer, span, inner) strides for iterating lanes along `axis`.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let span = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, span, inner)
}

// ── fused attention kernels ──────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    out: &mut [f32],
    probs: &mut [f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    seq: usize,
    d: usize,
    n_heads: usize,
) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let row = |t: usize, out_row: &mut [f32], prob_row: &mut [f32]| {
        // prob_row is this position's [head][u] block.
        for h in 0..n_heads {
            let hs = h * dh;
            let qv = &q[t * d + hs..t * d + hs + dh];
            let scores = &mut prob_row[h * seq..h * seq + t + 1];
            for (u, s) in scores.iter_mut().enumerate() {
                *s = kernels::dot(qv, &k[u * d + hs..u * d + hs + dh]) * scale;
            }
            kernels::softmax_in_place(scores);
            let dst = &mut out_row[hs..hs + dh];
            for (u, &p) in scores.iter().enumerate() {
                kernels::axpy(dst, p, &v[u * d + hs..u * d + hs + dh]);
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        if seq * seq * d * 2 >= kernels::PAR_MIN_MACS {
            use rayon::prelude::*;
            out.par_chunks_exact_mut(d)
                .zip(probs.par_chunks_exact_mut(n_heads * seq))
                .enumerate()
                .for_each(|(t, (out_row, prob_row))| row(t, out_row, prob_row));
            return;
        }
    }
    for (t, (out_row, prob_row)) in out
        .chunks_exact_mut(d)
        .zip(probs.chunks_exact_mut(n_heads * seq))
        .enumerate()
    {
        row(t, out_row, prob_row);
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
    dout: &[f32],
    probs: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    seq: usize,
    d: usize,
    n_heads: usize,
) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();

    // Pass 1 (rows t): dS from the softmax Jacobian, then dQ.
    let mut dscores = vec![0.0; seq * n_heads * seq];
    let pass1 = |t: usize, dq_row: &mut [f32], ds_block: &mut [f32]| {
        for h in 0..n_heads {
            let hs = h * dh;
            let dout_h = &dout[t * d + hs..t * d + hs + dh];
            let prow = &probs[t * n_heads * seq + h * seq..t * n_heads * seq + h * seq + t + 1];
            let ds = &mut ds_block[h * seq..h * seq + t + 1];
            let mut dot = 0.0;
            for (u, dp) in ds.iter_mut().enumerate() {
                *dp = kernels::dot(dout_h, &v[u * d + hs..u * d + hs + dh]);
                dot += *dp * prow[u];
            }
            let dst = &mut dq_row[hs..hs + dh];
            for (u, dp) in ds.iter_mut().enumerate() {
                *dp = prow[u] * (*dp - dot) * scale;
                kernels::axpy(dst, *dp, &k[u * d + hs..u * d + hs + dh]);
            }
        }
    };

    // Pass 2 (rows u): dK and dV gathered over all later positions t.
    let pass2 = |u: usize, dk_row: &mut [f32], dv_row: &mut [f32], ds_all: &[f32]| {
        for h in 0..n_heads {
            let hs = h * dh;
            let dkh = &mut dk_row[hs..hs + dh];
            let dvh = &mut dv_row[hs..hs + dh];
            for t in u..seq {
                let ds = ds_all[t * n_heads * seq + h * seq + u];
                let p = probs[t * n_heads * seq + h * seq + u];
                kernels::axpy(dkh, ds, &q[t * d + hs..t * d + hs + dh]);
                kernels::axpy(dvh, p, &dout[t * d + hs..t * d + hs + dh]);
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        if seq * seq * d * 4 >= kernels::PAR_MIN_MACS {
            use rayon::prelude::*;
            dq.par_chunks_exact_mut(d)
                .zip(dscores.par_chunks_exact_mut(n_heads * seq))
                .enumerate()
                .for_each(|(t, (dq_row, ds_block))| pass1(t, dq_row, ds_block));
            dk.par_chunks_exact_mut(d)
                .zip(dv.par_chunks_exact_mut(d))
                .enumerate()
                .for_each(|(u, (dk_row, dv_row))| pass2(u, dk_row, dv_row, &dscores));
            return;
        }
    }
    for (t, (dq_row, ds_block)) in dq
        .chunks_exact_mut(d)
        .zip(dscores.chunks_exact_mut(n_heads * seq))
        .enumerate()
    {
        pass1(t, dq_row, ds_block);
    }
    for (u, (dk_row, dv_row)) in dk.chunks_exact_mut(d).zip(dv.chunks_exact_mut(d)).enumerate() {
        pass2(u, dk_row, dv_row, &dscores);
    }
}
