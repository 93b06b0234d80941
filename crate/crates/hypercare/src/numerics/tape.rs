use super::{NumericsError, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Log-argument clamp shared by the cross-entropy and KL primitives.
pub const LOG_CLAMP: f64 = 1e-12;

enum Op {
    /// Parameter leaf wired from a store (gradient flows out to the key).
    Param(String),
    /// Plain data leaf; gradients are computed but discarded.
    Constant,
    Matmul(NodeId, NodeId),
    /// A * B^T
    MatmulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Broadcast a `1 x n` bias over every row of an `m x n` input.
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Learned-query attention pooling over a row subset of key/value
    /// matrices. Saves the softmax weights for the backward pass.
    SetAttention {
        query: NodeId,
        keys: NodeId,
        values: NodeId,
        rows: Vec<usize>,
        weights: Vec<f64>,
    },
    SumAll(NodeId),
    /// Mean binary cross-entropy against fixed 0/1 labels.
    Bce(NodeId, Tensor),
    /// Mean Bernoulli KL divergence against a fixed (detached) target.
    BernoulliKl(NodeId, Tensor),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of executed primitives, replayable backward to
/// accumulate exact gradients of a scalar loss.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        }
    }

    /// Wires a parameter from the store as a leaf; its gradient is written
    /// back to the store by [`backward`](Tape::backward).
    pub fn param(&mut self, store: &ParamStore, key: &str) -> Result<NodeId, NumericsError> {
        let value = store.get(key)?.clone();
        Ok(self.push(Op::Param(key.to_string()), value))
    }

    /// Leaf that participates in the forward pass but receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    /// `A * B^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatmulNT(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", ta, tb));
        }
        let mut value = ta.clone();
        value.add_scaled(tb, 1.0);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("sub", ta, tb));
        }
        let mut value = ta.clone();
        value.add_scaled(tb, -1.0);
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let mut value = ta.clone();
        for (v, &w) in value.data_mut().iter_mut().zip(tb.data()) {
            *v *= w;
        }
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Self::shape_err("add_bias", tx, tb));
        }
        let mut value = tx.clone();
        let b = tb.row(0).to_vec();
        for r in 0..value.rows() {
            for (v, &bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x), value)
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let mut value = tx.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(Op::SoftmaxRows(x), value)
    }

    /// Row-wise layer normalization with population variance:
    /// `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != (1, d) {
            return Err(Self::shape_err("layer_norm_rows", tx, tg));
        }
        if tb.shape() != (1, d) {
            return Err(Self::shape_err("layer_norm_rows", tx, tb));
        }
        let mut value = Tensor::zeros(tx.rows(), d);
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let (mean, inv_std) = row_norm_stats(row, eps);
            for c in 0..d {
                let y = (row[c] - mean) * inv_std;
                value.set(r, c, y * tg.get(0, c) + tb.get(0, c));
            }
        }
        Ok(self.push(Op::LayerNormRows { x, gain, bias, eps }, value))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let tx = self.value(x);
        let mut value = Tensor::zeros(rows.len(), tx.cols());
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(tx.row(r));
        }
        self.push(Op::GatherRows(x, rows), value)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId, NumericsError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut value = Tensor::zeros(total, cols);
        let mut offset = 0;
        for &p in &parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Self::shape_err("concat_rows", self.value(parts[0]), t));
            }
            for r in 0..t.rows() {
                value.row_mut(offset + r).copy_from_slice(t.row(r));
            }
            offset += t.rows();
        }
        Ok(self.push(Op::ConcatRows(parts), value))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId, NumericsError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in &parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Self::shape_err("concat_cols", self.value(parts[0]), t));
            }
            for r in 0..rows {
                value.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        Ok(self.push(Op::ConcatCols(parts), value))
    }

    /// Pools the `rows` subset of `values` into a single `1 x d_h` vector
    /// using softmax attention scored by a learned `1 x d_h` query:
    /// `softmax(q K_rows^T / sqrt(d_h)) V_rows`.
    pub fn set_attention(
        &mut self,
        query: NodeId,
        keys: NodeId,
        values: NodeId,
        rows: Vec<usize>,
    ) -> Result<NodeId, NumericsError> {
        let (tq, tk, tv) = (self.value(query), self.value(keys), self.value(values));
        let d_h = tq.cols();
        if tq.rows() != 1 || tk.cols() != d_h {
            return Err(Self::shape_err("set_attention", tq, tk));
        }
        if tk.rows() != tv.rows() {
            return Err(Self::shape_err("set_attention", tk, tv));
        }
        assert!(!rows.is_empty(), "set_attention over an empty row set");
        let inv_sqrt = 1.0 / (d_h as f64).sqrt();
        let q = tq.row(0);
        let mut weights: Vec<f64> = rows
            .iter()
            .map(|&r| dot(q, tk.row(r)) * inv_sqrt)
            .collect();
        softmax_in_place(&mut weights);
        let mut pooled = vec![0.0; tv.cols()];
        for (&r, &w) in rows.iter().zip(&weights) {
            for (p, &v) in pooled.iter_mut().zip(tv.row(r)) {
                *p += w * v;
            }
        }
        let value = Tensor::row_vec(pooled);
        Ok(self.push(
            Op::SetAttention {
                query,
                keys,
                values,
                rows,
                weights,
            },
            value,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    /// Mean over samples and labels of `-y ln p - (1-y) ln(1-p)`, with log
    /// arguments clamped at `LOG_CLAMP`.
    pub fn bce_loss(&mut self, pred: NodeId, labels: &Tensor) -> Result<NodeId, NumericsError> {
        let tp = self.value(pred);
        if tp.shape() != labels.shape() {
            return Err(Self::shape_err("bce_loss", tp, labels));
        }
        let n = tp.numel() as f64;
        let mut acc = 0.0;
        for (&p, &y) in tp.data().iter().zip(labels.data()) {
            acc += -y * p.max(LOG_CLAMP).ln() - (1.0 - y) * (1.0 - p).max(LOG_CLAMP).ln();
        }
        let value = Tensor::scalar(acc / n);
        Ok(self.push(Op::Bce(pred, labels.clone()), value))
    }

    /// Mean over samples and labels of `D_KL(Bern(p) || Bern(q))` where `q`
    /// is a detached target; gradient flows through `p` only.
    pub fn bernoulli_kl(&mut self, p: NodeId, q: &Tensor) -> Result<NodeId, NumericsError> {
        let tp = self.value(p);
        if tp.shape() != q.shape() {
            return Err(Self::shape_err("bernoulli_kl", tp, q));
        }
        let n = tp.numel() as f64;
        let mut acc = 0.0;
        for (&pv, &qv) in tp.data().iter().zip(q.data()) {
            acc += pv * (pv.max(LOG_CLAMP).ln() - qv.max(LOG_CLAMP).ln())
                + (1.0 - pv) * ((1.0 - pv).max(LOG_CLAMP).ln() - (1.0 - qv).max(LOG_CLAMP).ln());
        }
        let value = Tensor::scalar(acc / n);
        Ok(self.push(Op::BernoulliKl(p, q.clone()), value))
    }

    /// Accumulates `d loss / d parameter` into the store's gradient
    /// buffers. Buffers are overwritten per call; parameters the loss does
    /// not depend on receive a zero gradient.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<(), NumericsError> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(NumericsError::NotScalarLoss(
                loss_val.rows(),
                loss_val.cols(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        store.zero_grads();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Param(key) => {
                    store.set_grad(key, g);
                    continue;
                }
                Op::Constant => continue,
                op => self.propagate(op, idx, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => existing.add_scaled(&delta, 1.0),
                slot => *slot = Some(delta),
            }
        };
        match op {
            Op::Param(_) | Op::Constant => unreachable!("leaves handled by caller"),
            Op::Matmul(a, b) => {
                let da = g.matmul_nt(self.value(*b)).expect("shape checked");
                let db = self.value(*a).matmul_tn(g).expect("shape checked");
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::MatmulNT(a, b) => {
                // C = A B^T: dA = G B, dB = G^T A.
                let da = g.matmul(self.value(*b)).expect("shape checked");
                let db = g.matmul_tn(self.value(*a)).expect("shape checked");
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (v, &w) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *v *= w;
                }
                let mut db = g.clone();
                for (v, &w) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *v *= w;
                }
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Scale(x, c) => accum(grads, *x, g.map(|v| v * c)),
            Op::AddBias(x, bias) => {
                accum(grads, *x, g.clone());
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accum(grads, *bias, db);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (v, &inp) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if inp <= 0.0 {
                        *v = 0.0;
                    }
                }
                accum(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let out = &self.nodes[idx].value;
                let mut dx = g.clone();
                for (v, &y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *v *= y * (1.0 - y);
                }
                accum(grads, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let out = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let inner = dot(gr, y);
                    for c in 0..g.cols() {
                        dx.set(r, c, y[c] * (gr[c] - inner));
                    }
                }
                accum(grads, *x, dx);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let d = tx.cols() as f64;
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                let mut dgain = Tensor::zeros(1, tx.cols());
                let mut dbias = Tensor::zeros(1, tx.cols());
                for r in 0..tx.rows() {
                    let row = tx.row(r);
                    let (mean, inv_std) = row_norm_stats(row, *eps);
                    let gr = g.row(r);
                    // dy = g * gain; dx = inv_std * (dy - mean(dy) - y_hat * mean(dy * y_hat))
                    let mut dy_mean = 0.0;
                    let mut dyy_mean = 0.0;
                    for c in 0..row.len() {
                        let y_hat = (row[c] - mean) * inv_std;
                        let dy = gr[c] * tg.get(0, c);
                        dy_mean += dy;
                        dyy_mean += dy * y_hat;
                        dgain.data_mut()[c] += gr[c] * y_hat;
                        dbias.data_mut()[c] += gr[c];
                    }
                    dy_mean /= d;
                    dyy_mean /= d;
                    for c in 0..row.len() {
                        let y_hat = (row[c] - mean) * inv_std;
                        let dy = gr[c] * tg.get(0, c);
                        dx.set(r, c, inv_std * (dy - dy_mean - y_hat * dyy_mean));
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *gain, dgain);
                accum(grads, *bias, dbias);
            }
            Op::GatherRows(x, rows) => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &v) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accum(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let mut dp = Tensor::zeros(rows, g.cols());
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(g.row(offset + r));
                    }
                    offset += rows;
                    accum(grads, p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut dp = Tensor::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        dp.row_mut(r)
                            .copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    accum(grads, p, dp);
                }
            }
            Op::SetAttention {
                query,
                keys,
                values,
                rows,
                weights,
            } => {
                let tq = self.value(*query);
                let tk = self.value(*keys);
                let tv = self.value(*values);
                let d_h = tq.cols();
                let inv_sqrt = 1.0 / (d_h as f64).sqrt();
                let gr = g.row(0);

                let mut dv = Tensor::zeros(tv.rows(), tv.cols());
                let mut dw: Vec<f64> = Vec::with_capacity(rows.len());
                for (&r, &w) in rows.iter().zip(weights) {
                    for (d, &gv) in dv.row_mut(r).iter_mut().zip(gr) {
                        *d += w * gv;
                    }
                    dw.push(dot(gr, tv.row(r)));
                }
                // Softmax backward on the attention weights.
                let inner: f64 = dw.iter().zip(weights).map(|(&a, &b)| a * b).sum();
                let dscores: Vec<f64> = dw
                    .iter()
                    .zip(weights)
                    .map(|(&dwj, &wj)| wj * (dwj - inner))
                    .collect();

                let mut dq = Tensor::zeros(1, d_h);
                let mut dk = Tensor::zeros(tk.rows(), tk.cols());
                let q = tq.row(0);
                for (&r, &ds) in rows.iter().zip(&dscores) {
                    let coeff = ds * inv_sqrt;
                    for (d, &kv) in dq.row_mut(0).iter_mut().zip(tk.row(r)) {
                        *d += coeff * kv;
                    }
                    for (d, &qv) in dk.row_mut(r).iter_mut().zip(q) {
                        *d += coeff * qv;
                    }
                }
                accum(grads, *query, dq);
                accum(grads, *keys, dk);
                accum(grads, *values, dv);
            }
            Op::SumAll(x) => {
                let s = g.scalar_value();
                let tx = self.value(*x);
                accum(grads, *x, Tensor::from_fn(tx.rows(), tx.cols(), |_, _| s));
            }
            Op::Bce(pred, labels) => {
                let tp = self.value(*pred);
                let n = tp.numel() as f64;
                let scale = g.scalar_value() / n;
                let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                for ((d, &p), &y) in dp
                    .data_mut()
                    .iter_mut()
                    .zip(tp.data())
                    .zip(labels.data())
                {
                    let mut v = 0.0;
                    if p > LOG_CLAMP {
                        v -= y / p;
                    }
                    if 1.0 - p > LOG_CLAMP {
                        v += (1.0 - y) / (1.0 - p);
                    }
                    *d = scale * v;
                }
                accum(grads, *pred, dp);
            }
            Op::BernoulliKl(p, q) => {
                let tp = self.value(*p);
                let n = tp.numel() as f64;
                let scale = g.scalar_value() / n;
                let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                for ((d, &pv), &qv) in dp.data_mut().iter_mut().zip(tp.data()).zip(q.data()) {
                    // d/dp [p ln(p/q) + (1-p) ln((1-p)/(1-q))], clamp-aware.
                    let mut v = pv.max(LOG_CLAMP).ln() - qv.max(LOG_CLAMP).ln();
                    v -= (1.0 - pv).max(LOG_CLAMP).ln() - (1.0 - qv).max(LOG_CLAMP).ln();
                    if pv > LOG_CLAMP {
                        v += 1.0;
                    }
                    if 1.0 - pv > LOG_CLAMP {
                        v -= 1.0;
                    }
                    *d = scale * v;
                }
                accum(grads, *p, dp);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Mean and 1/sqrt(var + eps) of a row, population variance.
fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}
