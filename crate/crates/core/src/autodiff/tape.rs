//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node whose inputs are earlier nodes, so the node list
//! is already in topological order and `backward` is a single reverse sweep.

use super::ops::{gelu, gelu_grad, gemm_strided, layer_norm_row, log_sum_exp, softmax_in_place};
use super::tensor::{gemm, Scalar, Tensor, Trans};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var, cols: usize },
    Scale { x: Var, c: F },
    Sum { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, mean: Vec<F>, rstd: Vec<F> },
    Softmax { x: Var, cols: usize },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    CausalAttention { q: Var, k: Var, v: Var, seq: usize, heads: usize, probs: Vec<F> },
    RoutedAttention {
        q: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        routes: Vec<u8>,
        heads: usize,
        slots: usize,
        probs: Vec<F>,
    },
    GatedAdd { s: Var, u: Var, gates: Var, routes: Vec<u8>, cols: usize },
    CrossEntropy { logits: Var, picks: Vec<(usize, usize)>, cols: usize },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    sizes: Vec<usize>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a node, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a node, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<F> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![F::zero(); self.sizes[v.0]])
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
        }
    }

    /// Records a leaf, copying the tensor's values and its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf from raw parts.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!("input {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), Trans::No, self.value(b), Trans::No, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(bias).len() != cols {
            return Err(Error::Shape(format!("bias of {} for {cols} columns", self.value(bias).len())));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            out[r * cols..(r + 1) * cols].iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(vec![rows, cols], out, Op::AddRowBias { x, bias, cols }, rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum { x }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu { x }, rg)
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::Shape("layer_norm affine parameters".into()));
        }
        let mut out = vec![F::zero(); rows * cols];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        {
            let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                let (mu, rs) = layer_norm_row(
                    &xv[r * cols..(r + 1) * cols],
                    g,
                    b,
                    eps,
                    &mut out[r * cols..(r + 1) * cols],
                );
                mean.push(mu);
                rstd.push(rs);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm { x, gamma, beta, cols, mean, rstd };
        Ok(self.push(vec![rows, cols], out, op, rg))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, cols], out, Op::Softmax { x, cols }, rg))
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table)?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        let t = self.value(table);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("row {id} of a {rows}-row table")));
            }
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        let op = Op::Gather { table, ids: ids.to_vec(), cols };
        Ok(self.push(vec![ids.len(), cols], out, op, rg))
    }

    /// Multi-head scaled dot-product attention where row `i` sees rows `0..=i`.
    ///
    /// `q`, `k`, `v` are `S×d`; head `h` uses columns `h*d/heads..(h+1)*d/heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (seq, d) = self.dims2(q)?;
        if self.shape(k) != [seq, d] || self.shape(v) != [seq, d] {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} columns over {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); heads * seq * seq];
        let mut out = vec![F::zero(); seq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * seq * seq..(h + 1) * seq * seq];
            gemm_strided(seq, dh, seq, &qv[h * dh..], (d, 1), &kv[h * dh..], (1, d), p, (seq, 1), false);
            for i in 0..seq {
                let row = &mut p[i * seq..(i + 1) * seq];
                row[..=i].iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].iter_mut().for_each(|x| *x = F::zero());
            }
            gemm_strided(seq, seq, dh, p, (seq, 1), &vv[h * dh..], (d, 1), &mut out[h * dh..], (d, 1), false);
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::CausalAttention { q, k, v, seq, heads, probs };
        Ok(self.push(vec![seq, d], out, op, rg))
    }

    /// Per-row attention over one of several small key/value banks.
    ///
    /// Row `i` of `q` attends to the `slots` rows of `keys[routes[i]]` /
    /// `values[routes[i]]` with the same head split as [`Self::causal_attention`].
    pub fn routed_attention(
        &mut self,
        q: Var,
        keys: &[Var],
        values: &[Var],
        routes: &[u8],
        heads: usize,
    ) -> Result<Var> {
        let (seq, d) = self.dims2(q)?;
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::Shape("routed attention needs matching key/value banks".into()));
        }
        if routes.len() != seq {
            return Err(Error::Shape(format!("{} routes for {seq} rows", routes.len())));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} columns over {heads} heads")));
        }
        let (slots, kd) = self.dims2(keys[0])?;
        for (&kb, &vb) in keys.iter().zip(values) {
            if self.shape(kb) != [slots, kd] || self.shape(vb) != [slots, kd] || kd != d {
                return Err(Error::Shape("routed attention bank shapes differ".into()));
            }
        }
        if let Some(&r) = routes.iter().find(|&&r| r as usize >= keys.len()) {
            return Err(Error::Index(format!("route {r} with {} banks", keys.len())));
        }
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); seq * heads * slots];
        let mut out = vec![F::zero(); seq * d];
        let qv = self.value(q);
        for i in 0..seq {
            let r = routes[i] as usize;
            let (kb, vb) = (self.value(keys[r]), self.value(values[r]));
            for h in 0..heads {
                let qi = &qv[i * d + h * dh..i * d + (h + 1) * dh];
                let p = &mut probs[(i * heads + h) * slots..(i * heads + h + 1) * slots];
                for j in 0..slots {
                    let kj = &kb[j * d + h * dh..j * d + (h + 1) * dh];
                    p[j] = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                }
                softmax_in_place(p);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..slots {
                    let vj = &vb[j * d + h * dh..j * d + (h + 1) * dh];
                    o.iter_mut().zip(vj).for_each(|(x, &y)| *x += p[j] * y);
                }
            }
        }
        let mut deps = vec![q];
        deps.extend_from_slice(keys);
        deps.extend_from_slice(values);
        let rg = self.rg(&deps);
        let op = Op::RoutedAttention {
            q,
            keys: keys.to_vec(),
            values: values.to_vec(),
            routes: routes.to_vec(),
            heads,
            slots,
            probs,
        };
        Ok(self.push(vec![seq, d], out, op, rg))
    }

    /// `out[i] = s[i] + gates[routes[i]] * u[i]` row-wise.
    pub fn gated_add(&mut self, s: Var, u: Var, gates: Var, routes: &[u8]) -> Result<Var> {
        let (rows, cols) = self.dims2(s)?;
        if self.shape(u) != [rows, cols] || routes.len() != rows {
            return Err(Error::Shape("gated_add operand shapes".into()));
        }
        let g = self.value(gates);
        if let Some(&r) = routes.iter().find(|&&r| r as usize >= g.len()) {
            return Err(Error::Index(format!("route {r} with {} gates", g.len())));
        }
        let (sv, uv) = (self.value(s), self.value(u));
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let gi = g[routes[i] as usize];
            for c in 0..cols {
                out.push(sv[i * cols + c] + gi * uv[i * cols + c]);
            }
        }
        let rg = self.rg(&[s, u, gates]);
        let op = Op::GatedAdd { s, u, gates, routes: routes.to_vec(), cols };
        Ok(self.push(vec![rows, cols], out, op, rg))
    }

    /// Mean cross-entropy over `(row, target)` picks of a logit matrix.
    pub fn cross_entropy(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits)?;
        if picks.is_empty() {
            return Err(Error::Contract("cross_entropy over zero targets".into()));
        }
        let lv = self.value(logits);
        let mut total = F::zero();
        for &(r, t) in picks {
            if r >= rows || t >= cols {
                return Err(Error::Index(format!("pick ({r}, {t}) in {rows}x{cols} logits")));
            }
            let row = &lv[r * cols..(r + 1) * cols];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / F::lit(picks.len() as f64);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, picks: picks.to_vec(), cols };
        Ok(self.push(Vec::new(), vec![loss], op, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(Error::Index(format!("node {} on a tape of {n}", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(node, &gout, &mut grads, &sizes);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads, sizes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<F>, gout: &[F], grads: &mut [Option<Vec<F>>], sizes: &[usize]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let ga = accumulate(&mut grads[a.0], sizes[a.0]);
                    gemm(m, n, k, gout, Trans::No, self.value(b), Trans::Yes, ga, true);
                }
                if self.wants(b) {
                    let gb = accumulate(&mut grads[b.0], sizes[b.0]);
                    gemm(k, m, n, self.value(a), Trans::Yes, gout, Trans::No, gb, true);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(v) {
                        let g = accumulate(&mut grads[v.0], sizes[v.0]);
                        g.iter_mut().zip(gout).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(v) {
                        let ov = self.value(other);
                        let g = accumulate(&mut grads[v.0], sizes[v.0]);
                        for i in 0..g.len() {
                            g[i] += gout[i] * ov[i];
                        }
                    }
                }
            }
            &Op::AddRowBias { x, bias, cols } => {
                if self.wants(x) {
                    let g = accumulate(&mut grads[x.0], sizes[x.0]);
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b);
                }
                if self.wants(bias) {
                    let g = accumulate(&mut grads[bias.0], sizes[bias.0]);
                    for row in gout.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            &Op::Scale { x, c } => {
                if self.wants(x) {
                    let g = accumulate(&mut grads[x.0], sizes[x.0]);
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += c * b);
                }
            }
            &Op::Sum { x } => {
                if self.wants(x) {
                    let g = accumulate(&mut grads[x.0], sizes[x.0]);
                    g.iter_mut().for_each(|a| *a += gout[0]);
                }
            }
            &Op::Gelu { x } => {
                if self.wants(x) {
                    let xv = self.value(x);
                    let g = accumulate(&mut grads[x.0], sizes[x.0]);
                    for i in 0..g.len() {
                        g[i] += gout[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, mean, rstd } => {
                let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                let xv = self.value(x);
                let gv = self.value(gamma);
                let rows = mean.len();
                let xhat = |r: usize, c: usize| (xv[r * cols + c] - mean[r]) * rstd[r];
                if self.wants(gamma) {
                    let g = accumulate(&mut grads[gamma.0], sizes[gamma.0]);
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += gout[r * cols + c] * xhat(r, c);
                        }
                    }
                }
                if self.wants(beta) {
                    let g = accumulate(&mut grads[beta.0], sizes[beta.0]);
                    for row in gout.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                }
                if self.wants(x) {
                    let g = accumulate(&mut grads[x.0], sizes[x.0]);
                    let inv_d = F::lit(1.0 / cols as f64);
                    for r in 0..rows {
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for c in 0..cols {
                            let dxh = gout[r * cols + c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat(r, c);
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for c in 0..cols {
                            let dxh = gout[r * cols + c] * gv[c];
                            g[r * cols + c] += rstd[r] * (dxh - mean_dxh - xhat(r, c) * mean_dxh_xh);
                        }
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if self.wants(x) {
                    let y = &node.value;
                    let g = accumulate(&mut grads[x.0], sizes[x.0]);
                    for r in 0..y.len() / cols {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &gout[r * cols..(r + 1) * cols]);
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            g[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids, cols } => {
                let (table, cols) = (*table, *cols);
                if self.wants(table) {
                    let g = accumulate(&mut grads[table.0], sizes[table.0]);
                    for (i, &id) in ids.iter().enumerate() {
                        g[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(&gout[i * cols..(i + 1) * cols])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::CausalAttention { q, k, v, seq, heads, probs } => {
                self.backprop_attention(*q, *k, *v, *seq, *heads, probs, gout, grads, sizes)
            }
            Op::RoutedAttention { q, keys, values, routes, heads, slots, probs } => self
                .backprop_routed(*q, keys, values, routes, *heads, *slots, probs, gout, grads, sizes),
            Op::GatedAdd { s, u, gates, routes, cols } => {
                let (s, u, gates, cols) = (*s, *u, *gates, *cols);
                if self.wants(s) {
                    let g = accumulate(&mut grads[s.0], sizes[s.0]);
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b);
                }
                let gv = self.value(gates);
                if self.wants(u) {
                    let g = accumulate(&mut grads[u.0], sizes[u.0]);
                    for (i, &r) in routes.iter().enumerate() {
                        let gi = gv[r as usize];
                        for c in 0..cols {
                            g[i * cols + c] += gi * gout[i * cols + c];
                        }
                    }
                }
                if self.wants(gates) {
                    let uv = self.value(u);
                    let g = accumulate(&mut grads[gates.0], sizes[gates.0]);
                    for (i, &r) in routes.iter().enumerate() {
                        let dot: F = (0..cols).map(|c| gout[i * cols + c] * uv[i * cols + c]).sum();
                        g[r as usize] += dot;
                    }
                }
            }
            Op::CrossEntropy { logits, picks, cols } => {
                let (logits, cols) = (*logits, *cols);
                if self.wants(logits) {
                    let lv = self.value(logits);
                    let w = gout[0] / F::lit(picks.len() as f64);
                    let g = accumulate(&mut grads[logits.0], sizes[logits.0]);
                    let mut p = vec![F::zero(); cols];
                    for &(r, t) in picks {
                        p.copy_from_slice(&lv[r * cols..(r + 1) * cols]);
                        softmax_in_place(&mut p);
                        p[t] -= F::one();
                        g[r * cols..(r + 1) * cols].iter_mut().zip(&p).for_each(|(a, &b)| *a += w * b);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[F],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
        sizes: &[usize],
    ) {
        let d = sizes[q.0] / seq;
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = self.wants(q).then(|| vec![F::zero(); seq * d]);
        let mut gk = self.wants(k).then(|| vec![F::zero(); seq * d]);
        let mut gv = self.wants(v).then(|| vec![F::zero(); seq * d]);
        let mut dp = vec![F::zero(); seq * seq];
        for h in 0..heads {
            let p = &probs[h * seq * seq..(h + 1) * seq * seq];
            if let Some(gv) = gv.as_mut() {
                // dV = P^T dO
                gemm_strided(seq, seq, dh, p, (1, seq), &gout[h * dh..], (d, 1), &mut gv[h * dh..], (d, 1), true);
            }
            if gq.is_none() && gk.is_none() {
                continue;
            }
            // dP = dO V^T, then the softmax Jacobian row by row.
            gemm_strided(seq, dh, seq, &gout[h * dh..], (d, 1), &vv[h * dh..], (1, d), &mut dp, (seq, 1), false);
            for i in 0..seq {
                let pr = &p[i * seq..=i * seq + i];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                dr[i + 1..].iter_mut().for_each(|x| *x = F::zero());
            }
            if let Some(gq) = gq.as_mut() {
                gemm_strided(seq, seq, dh, &dp, (seq, 1), &kv[h * dh..], (d, 1), &mut gq[h * dh..], (d, 1), true);
            }
            if let Some(gk) = gk.as_mut() {
                gemm_strided(seq, seq, dh, &dp, (1, seq), &qv[h * dh..], (d, 1), &mut gk[h * dh..], (d, 1), true);
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(g) = g {
                let slot = accumulate(&mut grads[var.0], sizes[var.0]);
                slot.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_routed(
        &self,
        q: Var,
        keys: &[Var],
        values: &[Var],
        routes: &[u8],
        heads: usize,
        slots: usize,
        probs: &[F],
        gout: &[F],
        grads: &mut [Option<Vec<F>>],
        sizes: &[usize],
    ) {
        let seq = routes.len();
        let d = sizes[q.0] / seq;
        let dh = d / heads;
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let qv = self.value(q);
        let banks = keys.len();
        let mut gq = self.wants(q).then(|| vec![F::zero(); seq * d]);
        let mut gk: Vec<Option<Vec<F>>> =
            keys.iter().map(|&kb| self.wants(kb).then(|| vec![F::zero(); slots * d])).collect();
        let mut gv: Vec<Option<Vec<F>>> =
            values.iter().map(|&vb| self.wants(vb).then(|| vec![F::zero(); slots * d])).collect();
        let mut ds = vec![F::zero(); slots];
        for i in 0..seq {
            let r = routes[i] as usize;
            let (kb, vb) = (self.value(keys[r]), self.value(values[r]));
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let go = &gout[i * d + cols.start..i * d + cols.end];
                let p = &probs[(i * heads + h) * slots..(i * heads + h + 1) * slots];
                if let Some(g) = gv[r].as_mut() {
                    for j in 0..slots {
                        g[j * d + cols.start..j * d + cols.end]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(a, &b)| *a += p[j] * b);
                    }
                }
                if gq.is_none() && gk[r].is_none() {
                    continue;
                }
                let mut dot = F::zero();
                for j in 0..slots {
                    let vj = &vb[j * d + cols.start..j * d + cols.end];
                    ds[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot += p[j] * ds[j];
                }
                for j in 0..slots {
                    ds[j] = p[j] * (ds[j] - dot) * scale;
                }
                if let Some(g) = gq.as_mut() {
                    for j in 0..slots {
                        let kj = &kb[j * d + cols.start..j * d + cols.end];
                        g[i * d + cols.start..i * d + cols.end]
                            .iter_mut()
                            .zip(kj)
                            .for_each(|(a, &b)| *a += ds[j] * b);
                    }
                }
                if let Some(g) = gk[r].as_mut() {
                    let qi = &qv[i * d + cols.start..i * d + cols.end];
                    for j in 0..slots {
                        g[j * d + cols.start..j * d + cols.end]
                            .iter_mut()
                            .zip(qi)
                            .for_each(|(a, &b)| *a += ds[j] * b);
                    }
                }
            }
        }
        let mut merge = |var: Var, g: Option<Vec<F>>| {
            if let Some(g) = g {
                let slot = accumulate(&mut grads[var.0], sizes[var.0]);
                slot.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            }
        };
        merge(q, gq);
        for (b, g) in gk.into_iter().enumerate().take(banks) {
            merge(keys[b], g);
        }
        for (b, g) in gv.into_iter().enumerate().take(banks) {
            merge(values[b], g);
        }
    }
}
