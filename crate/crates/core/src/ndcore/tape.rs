use std::collections::HashMap;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Packing of `batch` padded sequences of length `seq` into `batch * seq`
/// rows. `valid[r]` is false for padding rows; padding never influences a
/// valid row through attention or pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLayout {
    pub batch: usize,
    pub seq: usize,
    pub valid: Vec<bool>,
}

impl BatchLayout {
    pub fn new(batch: usize, seq: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != batch * seq {
            return Err(Error::Dimension(format!(
                "layout {batch}x{seq} needs {} mask entries, got {}",
                batch * seq,
                valid.len()
            )));
        }
        Ok(Self { batch, seq, valid })
    }

    /// Single unpadded sequence.
    pub fn dense(seq: usize) -> Self {
        Self {
            batch: 1,
            seq,
            valid: vec![true; seq],
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    PlaceRows {
        sources: Vec<(Var, Vec<usize>)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: BatchLayout,
        probs: Vec<f64>,
    },
    MaskedMean {
        x: Var,
        layout: BatchLayout,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Borrowing the [`ParamStore`] for the tape's lifetime means parameters
/// cannot change while a graph that reads them is alive.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Reference a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.store.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).matrix_dims()?;
        let (k2, n) = self.value(b).matrix_dims()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).matrix_dims()?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, bias), ng))
    }

    /// `x W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| gelu(v)).collect())
            .expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).matrix_dims()?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::Dimension("layer norm affine width".into()));
        }
        let xhat = normalize_rows(self.value(x).data(), n);
        let inv_std = xhat.1;
        let xhat = xhat.0;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        for (orow, hrow) in out.chunks_mut(n).zip(xhat.chunks(n)) {
            for j in 0..n {
                orow[j] = g[j] * hrow[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Select rows `ids` of `table[v, d]` into `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).matrix_dims()?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Dimension(format!("row {bad} outside table of {v} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Build a `[rows, d]` matrix where row `r` of each source lands at
    /// `targets[r]`. Rows not targeted are zero; a row may be targeted once.
    pub fn place_rows(&mut self, rows: usize, sources: &[(Var, Vec<usize>)]) -> Result<Var> {
        let d = match sources.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(Error::Dimension("place_rows with no sources".into())),
        };
        let mut out = vec![0.0; rows * d];
        let mut seen = vec![false; rows];
        for (src, targets) in sources {
            let t = self.value(*src);
            if t.cols() != d || t.rows() != targets.len() {
                return Err(Error::Dimension("place_rows source shape".into()));
            }
            for (r, &dst) in targets.iter().enumerate() {
                if dst >= rows || seen[dst] {
                    return Err(Error::Dimension(format!("bad target row {dst}")));
                }
                seen[dst] = true;
                out[dst * d..(dst + 1) * d].copy_from_slice(t.row(r));
            }
        }
        let ng = sources.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::PlaceRows {
                sources: sources.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q`, `k`, `v` of shape `[batch*seq, d]`. Each sequence attends only
    /// within itself and only to valid key rows. Scale is `1/sqrt(d/heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &BatchLayout,
    ) -> Result<Var> {
        let (rows, d) = self.value(q).matrix_dims()?;
        if self.value(k).shape() != [rows, d] || self.value(v).shape() != [rows, d] {
            return Err(Error::Dimension("q/k/v shapes differ".into()));
        }
        if rows != layout.rows() {
            return Err(Error::Dimension(format!(
                "{rows} rows for a {}x{} layout",
                layout.batch, layout.seq
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let s = layout.seq;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; layout.batch * heads * s * s];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; s];
        for b in 0..layout.batch {
            let base = b * s;
            let valid = &layout.valid[base..base + s];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s {
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..s {
                        scores[j] = if valid[j] {
                            let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                            dot(qi, kj) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    let p = &mut probs[((b * heads + h) * s + i) * s..][..s];
                    masked_softmax(&scores, valid, p);
                    let oi = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..s {
                        if p[j] != 0.0 {
                            let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                            axpy(p[j], vj, oi);
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout: layout.clone(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over the valid rows of each sequence: `[batch*seq, d] -> [batch, d]`.
    pub fn masked_mean(&mut self, x: Var, layout: &BatchLayout) -> Result<Var> {
        let (rows, d) = self.value(x).matrix_dims()?;
        if rows != layout.rows() {
            return Err(Error::Dimension("masked_mean layout".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; layout.batch * d];
        for b in 0..layout.batch {
            let count = layout.valid[b * layout.seq..(b + 1) * layout.seq]
                .iter()
                .filter(|&&v| v)
                .count();
            if count == 0 {
                return Err(Error::Dimension(format!("sequence {b} has no valid rows")));
            }
            let o = &mut out[b * d..(b + 1) * d];
            for i in 0..layout.seq {
                let r = b * layout.seq + i;
                if layout.valid[r] {
                    axpy(1.0 / count as f64, &xd[r * d..(r + 1) * d], o);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![layout.batch, d], out)?,
            Op::MaskedMean {
                x,
                layout: layout.clone(),
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `logits[batch, C]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.value(logits).matrix_dims()?;
        if labels.len() != m {
            return Err(Error::Dimension(format!(
                "{} labels for {m} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let ld = self.value(logits).data();
        let mut probs = ld.to_vec();
        let mut loss = 0.0;
        for ((row, raw), &y) in probs.chunks_mut(c).zip(ld.chunks(c)).zip(labels) {
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            loss += z.ln() - (raw[y] - max);
            row.iter_mut().for_each(|v| *v /= z);
        }
        loss /= m as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `sum(x * weights)`; scalarizes an output for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(Error::Dimension("weighted_sum weights".into()));
        }
        let s = dot(self.value(x).data(), weights);
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let w = vec![1.0; self.value(x).len()];
        self.weighted_sum(x, &w).expect("matching length")
    }

    /// Reverse pass from a scalar node. Returns gradients for every
    /// trainable parameter that the scalar depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Value::Param(_) = node.value {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_op(&node.op, Var(idx), &g, &mut grads);
        }
        let mut out = Gradients::with_len(self.store.len());
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads[v.0].take() {
                out.accumulate(id, &g);
            }
        }
        Ok(out)
    }

    fn backward_op(&self, op: &Op, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).matrix_dims().expect("checked");
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    // dA[i,p] = sum_j dC[i,j] B[p,j]
                    let bd = self.value(*b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] = dot(gi, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    acc(grads, *a, &da);
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip != 0.0 {
                                axpy(aip, gi, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    acc(grads, *b, &db);
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    acc(grads, *x, g);
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(grads, *bias, &db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g);
                }
                if self.needs(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::Scale(x, f) => {
                let dx: Vec<f64> = g.iter().map(|v| v * f).collect();
                acc(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                acc(grads, *x, &dx);
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = g.iter().zip(xd).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
                acc(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let gd = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    if self.needs(*gamma) {
                        acc(grads, *gamma, &dg);
                    }
                    if self.needs(*beta) {
                        acc(grads, *beta, &db);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; n];
                    for (r, ((grow, hrow), drow)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dh = dot(&dxhat, hrow) / n as f64;
                        for j in 0..n {
                            drow[j] = inv_std[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (r, &i) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[i * d..(i + 1) * d]);
                }
                acc(grads, *table, &dt);
            }
            Op::PlaceRows { sources } => {
                let d = self.value(out).cols();
                for (src, targets) in sources {
                    if !self.needs(*src) {
                        continue;
                    }
                    let mut ds = Vec::with_capacity(targets.len() * d);
                    for &dst in targets {
                        ds.extend_from_slice(&g[dst * d..(dst + 1) * d]);
                    }
                    acc(grads, *src, &ds);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (rows, d) = self.value(*q).matrix_dims().expect("checked");
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let dh = d / heads;
                let s = layout.seq;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; s];
                for b in 0..layout.batch {
                    let base = b * s;
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..s {
                            let p = &probs[((b * heads + h) * s + i) * s..][..s];
                            let gi = &g[(base + i) * d + off..(base + i) * d + off + dh];
                            let mut weighted = 0.0;
                            for j in 0..s {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let r = (base + j) * d + off;
                                dp[j] = dot(gi, &vd[r..r + dh]);
                                axpy(p[j], gi, &mut dv[r..r + dh]);
                                weighted += p[j] * dp[j];
                            }
                            let qi_off = (base + i) * d + off;
                            for j in 0..s {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let r = (base + j) * d + off;
                                axpy(ds, &kd[r..r + dh], &mut dq[qi_off..qi_off + dh]);
                                axpy(ds, &qd[qi_off..qi_off + dh], &mut dk[r..r + dh]);
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    acc(grads, *q, &dq);
                }
                if self.needs(*k) {
                    acc(grads, *k, &dk);
                }
                if self.needs(*v) {
                    acc(grads, *v, &dv);
                }
            }
            Op::MaskedMean { x, layout } => {
                let d = self.value(*x).cols();
                let mut dx = vec![0.0; layout.rows() * d];
                for b in 0..layout.batch {
                    let valid = &layout.valid[b * layout.seq..(b + 1) * layout.seq];
                    let count = valid.iter().filter(|&&v| v).count() as f64;
                    for (i, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
                        let r = b * layout.seq + i;
                        axpy(1.0 / count, &g[b * d..(b + 1) * d], &mut dx[r * d..(r + 1) * d]);
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let m = labels.len() as f64;
                let mut dl = probs.clone();
                for (row, &y) in dl.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[0] / m);
                }
                acc(grads, *logits, &dl);
            }
            Op::WeightedSum { x, weights } => {
                let dx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                acc(grads, *x, &dx);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

const LN_EPS: f64 = 1e-9;

/// Normalize each row of width `n` to zero mean and unit (population)
/// variance. Returns the normalized rows and per-row `1/sqrt(var + eps)`.
pub(crate) fn normalize_rows(x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / n);
    for (orow, xrow) in out.chunks_mut(n).zip(x.chunks(n)) {
        let mean = xrow.iter().sum::<f64>() / n as f64;
        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in orow.iter_mut().zip(xrow) {
            *o = (v - mean) * r;
        }
        inv.push(r);
    }
    (out, inv)
}

/// Softmax over the entries of `scores` where `valid` holds; invalid
/// entries get probability exactly zero.
fn masked_softmax(scores: &[f64], valid: &[bool], out: &mut [f64]) {
    let max = scores
        .iter()
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut z = 0.0;
    for ((o, s), &v) in out.iter_mut().zip(scores).zip(valid) {
        *o = if v { (s - max).exp() } else { 0.0 };
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
