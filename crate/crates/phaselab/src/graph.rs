//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into per-node slots.
//! Only nodes that (transitively) depend on a gradient-requiring leaf carry
//! gradients, so frozen parameters cost nothing in the backward pass and can
//! never receive an update.
//!
//! The op set is deliberately small: exactly what a pre-norm causal
//! transformer with low-rank adapter branches and a logistic preference loss
//! needs. Fused ops (attention, layer norm, sequence log-probability) keep
//! the tape short and make each backward rule independently checkable
//! against finite differences.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// Rows of `table` selected by index: out[r, :] = table[ids[r], :].
    Gather { table: NodeId, ids: Vec<usize> },
    /// Elementwise sum of two same-shape tensors.
    Add { lhs: NodeId, rhs: NodeId },
    /// Elementwise difference.
    Sub { lhs: NodeId, rhs: NodeId },
    /// x * c for a compile-time constant c.
    Scale { x: NodeId, c: f64 },
    /// x + c elementwise (c is constant, so backward is pass-through).
    AddConst { x: NodeId },
    /// y = x · wᵀ with x: [t, d_in], w: [d_out, d_in].
    Linear { x: NodeId, w: NodeId },
    /// Per-row layer norm with learned gain/bias.
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Tanh-approximation GELU, elementwise.
    Gelu { x: NodeId },
    /// Multi-head causal self-attention over projected q, k, v (each [t, d]).
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, n_heads: usize },
    /// Elementwise product with a constant mask (inverted dropout).
    Mask { x: NodeId, mask: Tensor },
    /// Σ log softmax(logits[pos])[tok] over the (pos, tok) picks → scalar.
    LogProbSum { logits: NodeId, picks: Vec<(usize, usize)> },
    /// ln(1 + eˣ), elementwise (used on scalars for the preference loss).
    Softplus { x: NodeId },
    /// -x elementwise.
    Neg { x: NodeId },
    /// Arithmetic mean of scalar nodes → scalar.
    MeanStack { xs: Vec<NodeId> },
    /// Sum of all entries → scalar.
    Sum { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let cols = t.cols();
        let mut out = Tensor::zeros(&[ids.len(), cols]);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let (a, b) = (self.value(lhs), self.value(rhs));
        debug_assert_eq!(a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(a.shape(), data);
        let rg = self.rg(lhs) || self.rg(rhs);
        self.push(out, Op::Add { lhs, rhs }, rg)
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let (a, b) = (self.value(lhs), self.value(rhs));
        debug_assert_eq!(a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(a.shape(), data);
        let rg = self.rg(lhs) || self.rg(rhs);
        self.push(out, Op::Sub { lhs, rhs }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::AddConst { x }, rg)
    }

    /// y[t, o] = Σ_i x[t, i] · w[o, i]
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        let (t, d_in) = (xv.rows(), xv.cols());
        let (d_out, wd_in) = (wv.rows(), wv.cols());
        debug_assert_eq!(d_in, wd_in, "linear: dim mismatch");
        let mut out = Tensor::zeros(&[t, d_out]);
        for r in 0..t {
            let xr = xv.row(r);
            let or = out.row_mut(r);
            for o in 0..d_out {
                let wr = wv.row(o);
                let mut acc = 0.0;
                for i in 0..d_in {
                    acc += xr[i] * wr[i];
                }
                or[o] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Linear { x, w }, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let (t, d) = (xv.rows(), xv.cols());
        debug_assert_eq!(g.len(), d);
        let mut out = Tensor::zeros(&[t, d]);
        for r in 0..t {
            let xr = xv.row(r);
            let (mean, rstd) = row_stats(xr);
            let or = out.row_mut(r);
            for i in 0..d {
                or[i] = (xr[i] - mean) * rstd * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let out = attention_forward(qv, kv, vv, n_heads);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::CausalAttention { q, k, v, n_heads }, rg)
    }

    pub fn mask(&mut self, x: NodeId, mask: Tensor) -> NodeId {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape(), mask.shape());
        let data = xv.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
        let out = Tensor::from_vec(xv.shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Mask { x, mask }, rg)
    }

    /// Teacher-forced sequence log-probability: for each `(pos, tok)` pick,
    /// adds `log softmax(logits[pos])[tok]`.
    pub fn log_prob_sum(&mut self, logits: NodeId, picks: &[(usize, usize)]) -> NodeId {
        let lv = self.value(logits);
        let mut total = 0.0;
        for &(pos, tok) in picks {
            let row = lv.row(pos);
            total += row[tok] - log_sum_exp(row);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total),
            Op::LogProbSum {
                logits,
                picks: picks.to_vec(),
            },
            rg,
        )
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| softplus(v)).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Softplus { x }, rg)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| -v).collect();
        let out = Tensor::from_vec(self.value(x).shape(), data);
        let rg = self.rg(x);
        self.push(out, Op::Neg { x }, rg)
    }

    pub fn mean_stack(&mut self, xs: &[NodeId]) -> NodeId {
        debug_assert!(!xs.is_empty());
        let mut acc = 0.0;
        for &id in xs {
            acc += self.scalar(id);
        }
        let out = Tensor::scalar(acc / xs.len() as f64);
        let rg = xs.iter().any(|&id| self.rg(id));
        self.push(out, Op::MeanStack { xs: xs.to_vec() }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Backpropagates from a scalar root. Returns per-node gradient slots;
    /// only gradient-requiring nodes are populated.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let go = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &go, &mut grads);
            grads[idx] = Some(go);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(delta.clone()),
        }
    }

    fn backward_node(&self, idx: usize, go: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let mut d = Tensor::zeros(&shape);
                    for (r, &i) in ids.iter().enumerate() {
                        let src = go.row(r);
                        let dst = d.row_mut(i);
                        for c in 0..src.len() {
                            dst[c] += src[c];
                        }
                    }
                    self.accumulate(grads, *table, &d);
                }
            }
            Op::Add { lhs, rhs } => {
                self.accumulate(grads, *lhs, go);
                self.accumulate(grads, *rhs, go);
            }
            Op::Sub { lhs, rhs } => {
                self.accumulate(grads, *lhs, go);
                if self.rg(*rhs) {
                    let d = Tensor::from_vec(go.shape(), go.data().iter().map(|v| -v).collect());
                    self.accumulate(grads, *rhs, &d);
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let d = Tensor::from_vec(go.shape(), go.data().iter().map(|v| v * c).collect());
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::AddConst { x, .. } => {
                self.accumulate(grads, *x, go);
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (t, d_in) = (xv.rows(), xv.cols());
                let d_out = wv.rows();
                if self.rg(*x) {
                    // dx[t, i] = Σ_o go[t, o] · w[o, i]
                    let mut dx = Tensor::zeros(&[t, d_in]);
                    for r in 0..t {
                        let gr = go.row(r);
                        let dr = dx.row_mut(r);
                        for o in 0..d_out {
                            let g = gr[o];
                            if g == 0.0 {
                                continue;
                            }
                            let wr = wv.row(o);
                            for i in 0..d_in {
                                dr[i] += g * wr[i];
                            }
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                if self.rg(*w) {
                    // dw[o, i] = Σ_t go[t, o] · x[t, i]
                    let mut dw = Tensor::zeros(&[d_out, d_in]);
                    for r in 0..t {
                        let gr = go.row(r);
                        let xr = xv.row(r);
                        for o in 0..d_out {
                            let g = gr[o];
                            if g == 0.0 {
                                continue;
                            }
                            let dr = dw.row_mut(o);
                            for i in 0..d_in {
                                dr[i] += g * xr[i];
                            }
                        }
                    }
                    self.accumulate(grads, *w, &dw);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let g = self.value(*gain).data();
                let (t, d) = (xv.rows(), xv.cols());
                let inv_d = 1.0 / d as f64;
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[t, d]);
                    for r in 0..t {
                        let xr = xv.row(r);
                        let (mean, rstd) = row_stats(xr);
                        let gr = go.row(r);
                        // dyg = go ⊙ gain; dx = rstd · (dyg − mean(dyg) − x̂ · mean(dyg ⊙ x̂))
                        let mut sum_dyg = 0.0;
                        let mut sum_dyg_xhat = 0.0;
                        for i in 0..d {
                            let dyg = gr[i] * g[i];
                            let xhat = (xr[i] - mean) * rstd;
                            sum_dyg += dyg;
                            sum_dyg_xhat += dyg * xhat;
                        }
                        let m1 = sum_dyg * inv_d;
                        let m2 = sum_dyg_xhat * inv_d;
                        let dr = dx.row_mut(r);
                        for i in 0..d {
                            let dyg = gr[i] * g[i];
                            let xhat = (xr[i] - mean) * rstd;
                            dr[i] = rstd * (dyg - m1 - xhat * m2);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                if self.rg(*gain) {
                    let mut dg = Tensor::zeros(&[d]);
                    for r in 0..t {
                        let xr = xv.row(r);
                        let (mean, rstd) = row_stats(xr);
                        let gr = go.row(r);
                        for i in 0..d {
                            dg.data_mut()[i] += gr[i] * (xr[i] - mean) * rstd;
                        }
                    }
                    self.accumulate(grads, *gain, &dg);
                }
                if self.rg(*bias) {
                    let mut db = Tensor::zeros(&[d]);
                    for r in 0..t {
                        let gr = go.row(r);
                        for i in 0..d {
                            db.data_mut()[i] += gr[i];
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::Gelu { x } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(go.data())
                        .map(|(&v, &g)| g * gelu_grad(v))
                        .collect();
                    let d = Tensor::from_vec(xv.shape(), data);
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::CausalAttention { q, k, v, n_heads } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = attention_backward(qv, kv, vv, *n_heads, go);
                self.accumulate(grads, *q, &dq);
                self.accumulate(grads, *k, &dk);
                self.accumulate(grads, *v, &dv);
            }
            Op::Mask { x, mask } => {
                if self.rg(*x) {
                    let data = go.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect();
                    let d = Tensor::from_vec(go.shape(), data);
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::LogProbSum { logits, picks } => {
                if self.rg(*logits) {
                    let lv = self.value(*logits);
                    let g = go.item();
                    let mut d = Tensor::zeros(&[lv.rows(), lv.cols()]);
                    for &(pos, tok) in picks {
                        let row = lv.row(pos);
                        let lse = log_sum_exp(row);
                        let dr = d.row_mut(pos);
                        for c in 0..row.len() {
                            let p = (row[c] - lse).exp();
                            dr[c] -= g * p;
                        }
                        dr[tok] += g;
                    }
                    self.accumulate(grads, *logits, &d);
                }
            }
            Op::Softplus { x } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(go.data())
                        .map(|(&v, &g)| g * sigmoid(v))
                        .collect();
                    let d = Tensor::from_vec(xv.shape(), data);
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::Neg { x } => {
                if self.rg(*x) {
                    let d = Tensor::from_vec(go.shape(), go.data().iter().map(|v| -v).collect());
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::MeanStack { xs } => {
                let g = go.item() / xs.len() as f64;
                let d = Tensor::scalar(g);
                for &id in xs {
                    self.accumulate(grads, id, &d);
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let g = go.item();
                    let shape = self.value(*x).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let d = Tensor::from_vec(&shape, vec![g; n]);
                    self.accumulate(grads, *x, &d);
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Numerically stable ln(1 + eˣ).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize) -> Tensor {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(&[t, d]);
    let mut probs = vec![0.0; t];
    for h in 0..n_heads {
        let off = h * dh;
        for ti in 0..t {
            // scores over u ≤ ti, softmaxed in place
            let qr = &q.row(ti)[off..off + dh];
            let mut m = f64::NEG_INFINITY;
            for (u, p) in probs.iter_mut().enumerate().take(ti + 1) {
                let kr = &k.row(u)[off..off + dh];
                let mut s = 0.0;
                for i in 0..dh {
                    s += qr[i] * kr[i];
                }
                *p = s * scale;
                m = m.max(*p);
            }
            let mut z = 0.0;
            for p in probs.iter_mut().take(ti + 1) {
                *p = (*p - m).exp();
                z += *p;
            }
            let or = &mut out.row_mut(ti)[off..off + dh];
            for u in 0..=ti {
                let w = probs[u] / z;
                let vr = &v.row(u)[off..off + dh];
                for i in 0..dh {
                    or[i] += w * vr[i];
                }
            }
        }
    }
    out
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    go: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(&[t, d]);
    let mut dk = Tensor::zeros(&[t, d]);
    let mut dv = Tensor::zeros(&[t, d]);
    let mut probs = vec![0.0; t];
    let mut dp = vec![0.0; t];
    for h in 0..n_heads {
        let off = h * dh;
        for ti in 0..t {
            // recompute softmax row
            let qr = &q.row(ti)[off..off + dh];
            let mut m = f64::NEG_INFINITY;
            for (u, p) in probs.iter_mut().enumerate().take(ti + 1) {
                let kr = &k.row(u)[off..off + dh];
                let mut s = 0.0;
                for i in 0..dh {
                    s += qr[i] * kr[i];
                }
                *p = s * scale;
                m = m.max(*p);
            }
            let mut z = 0.0;
            for p in probs.iter_mut().take(ti + 1) {
                *p = (*p - m).exp();
                z += *p;
            }
            for p in probs.iter_mut().take(ti + 1) {
                *p /= z;
            }
            let gr = &go.row(ti)[off..off + dh];
            // dv and dp
            let mut dot = 0.0;
            for u in 0..=ti {
                let vr = &v.row(u)[off..off + dh];
                let mut acc = 0.0;
                for i in 0..dh {
                    acc += gr[i] * vr[i];
                }
                dp[u] = acc;
                dot += probs[u] * acc;
                let dvr = &mut dv.row_mut(u)[off..off + dh];
                for i in 0..dh {
                    dvr[i] += probs[u] * gr[i];
                }
            }
            // softmax backward → scores grad → dq, dk
            for u in 0..=ti {
                let ds = probs[u] * (dp[u] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kr = &k.row(u)[off..off + dh];
                let dqr = &mut dq.row_mut(ti)[off..off + dh];
                for i in 0..dh {
                    dqr[i] += ds * kr[i];
                }
                let dkr = &mut dk.row_mut(u)[off..off + dh];
                for i in 0..dh {
                    dkr[i] += ds * qr[i];
                }
            }
        }
    }
    (dq, dk, dv)
}
