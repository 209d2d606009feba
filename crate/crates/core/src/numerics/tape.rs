//! Reverse-mode differentiation over a per-pass operation tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough context to run the backward rule.
//! [`Tape::backward`] walks the nodes in reverse and returns [`Gradients`] for
//! every node and every parameter that was placed on the tape.

use super::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Recip(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SelectBlocks(Var, Vec<usize>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Attention(Box<AttentionCtx>),
}

struct AttentionCtx {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    neighbors: Vec<Vec<usize>>,
    /// Per query row: `heads * neighbors[r].len()` weights, head-major.
    weights: Vec<Vec<f64>>,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// Operation tape for one forward/backward pass.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: Some(params),
        }
    }

    /// A tape with no parameter store; only leaves and constants are available.
    pub fn detached() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param node on detached tape")
                .value(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input. Gradients with respect to it are reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same as [`Tape::leaf`]; reads better for data that is never queried.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "param() on detached tape");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims2() != tb.dims2() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2();
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(m, n, data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        Tensor::matrix(m, n, ta.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn row_check(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize), NumericsError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims2();
        if tr.dims2() != (1, n) {
            return Err(shape_err(op, ta, tr));
        }
        Ok((m, n))
    }

    /// `a[m x n] + row[1 x n]`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.row_check("add_row", a, row)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|x| x.iter().zip(r).map(|(u, v)| u + v))
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::AddRow(a, row)))
    }

    /// `a[m x n] * row[1 x n]`, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.row_check("mul_row", a, row)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|x| x.iter().zip(r).map(|(u, v)| u * v))
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        self.push(t, Op::Offset(a))
    }

    /// Element-wise product with a constant tensor of the same size
    /// (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(shape_err("mul_const", ta, c));
        }
        let (m, n) = ta.dims2();
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::matrix(m, n, data), Op::MulConst(a, c.data().to_vec())))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::recip);
        self.push(t, Op::Recip(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.map(a, softplus);
        self.push(t, Op::Softplus(a))
    }

    /// `max(a, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.map(a, |x| x.max(floor));
        self.push(t, Op::ClampMin(a, floor))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::matrix(m, n, data), Op::Softmax(a))
    }

    /// Row-wise log-softmax, stable for very negative logits.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(Tensor::matrix(m, n, data), Op::LogSoftmax(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in ta.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|x| (x - mean) * is));
        }
        let out = Tensor::matrix(m, n, xhat.clone());
        self.push(out, Op::LayerNorm { x: a, xhat, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != n {
                return Err(shape_err("concat_rows", self.value(parts[0]), self.value(p)));
            }
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let m = data.len() / n.max(1);
        Ok(self.push(Tensor::matrix(m, n, data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if start + len > n {
            return Err(NumericsError::Index {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(Tensor::matrix(m, len, data), Op::SliceCols(a, start)))
    }

    /// Rows `idx[0], idx[1], ...` of `a`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(NumericsError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        Ok(self.push(Tensor::matrix(idx.len(), n, data), Op::GatherRows(a, idx.to_vec())))
    }

    /// For row `r`, the `width` columns starting at `offsets[r]`.
    pub fn select_blocks(&mut self, a: Var, offsets: &[usize], width: usize) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if offsets.len() != m {
            return Err(NumericsError::Index {
                op: "select_blocks",
                index: offsets.len(),
                bound: m,
            });
        }
        let mut data = Vec::with_capacity(m * width);
        for (r, &off) in offsets.iter().enumerate() {
            if off + width > n {
                return Err(NumericsError::Index {
                    op: "select_blocks",
                    index: off + width,
                    bound: n,
                });
            }
            data.extend_from_slice(&ta.row(r)[off..off + width]);
        }
        Ok(self.push(
            Tensor::matrix(m, width, data),
            Op::SelectBlocks(a, offsets.to_vec()),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, data), Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Column sums: `[m x n] -> [1 x n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, n) = ta.dims2();
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    /// Sparse multi-head scaled dot-product attention.
    ///
    /// Query row `r` attends over key/value rows `neighbors[r]`. Columns are
    /// split evenly into `heads` heads; each head uses its own softmax with
    /// scale `1/sqrt(d_head)`. A query with no neighbors yields a zero row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        neighbors: Vec<Vec<usize>>,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = tq.dims2();
        let (nk, dk) = tk.dims2();
        let (nv, dv) = tv.dims2();
        if d != dk {
            return Err(shape_err("attention(q,k)", tq, tk));
        }
        if nk != nv {
            return Err(shape_err("attention(k,v)", tk, tv));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(NumericsError::Heads { width: d, heads });
        }
        if neighbors.len() != nq {
            return Err(NumericsError::Index {
                op: "attention",
                index: neighbors.len(),
                bound: nq,
            });
        }
        if let Some(&bad) = neighbors.iter().flatten().find(|&&j| j >= nk) {
            return Err(NumericsError::Index {
                op: "attention",
                index: bad,
                bound: nk,
            });
        }
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; nq * dv];
        let mut weights = Vec::with_capacity(nq);
        for (r, nbrs) in neighbors.iter().enumerate() {
            let m = nbrs.len();
            let mut w = vec![0.0; heads * m];
            if m > 0 {
                let qrow = tq.row(r);
                for h in 0..heads {
                    let qh = &qrow[h * dh..(h + 1) * dh];
                    let wh = &mut w[h * m..(h + 1) * m];
                    for (slot, &j) in wh.iter_mut().zip(nbrs) {
                        *slot = scale * dot(qh, &tk.row(j)[h * dh..(h + 1) * dh]);
                    }
                    softmax_in_place(wh);
                    let orow = &mut out[r * dv + h * dvh..r * dv + (h + 1) * dvh];
                    for (&a, &j) in wh.iter().zip(nbrs) {
                        let vrow = &tv.row(j)[h * dvh..(h + 1) * dvh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += a * x;
                        }
                    }
                }
            }
            weights.push(w);
        }
        let ctx = AttentionCtx {
            q,
            k,
            v,
            heads,
            neighbors,
            weights,
        };
        Ok(self.push(Tensor::matrix(nq, dv, out), Op::Attention(Box::new(ctx))))
    }

    /// Attention weights recorded by an [`Tape::attention`] node: for each
    /// query row and head, the softmax over that row's neighbors.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Vec<Vec<f64>>>> {
        match &self.nodes[node.0].op {
            Op::Attention(ctx) => Some(
                ctx.weights
                    .iter()
                    .zip(&ctx.neighbors)
                    .map(|(w, nbrs)| {
                        let m = nbrs.len();
                        (0..ctx.heads).map(|h| w[h * m..(h + 1) * m].to_vec()).collect()
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Runs reverse accumulation from a scalar output with seed gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        self.backward_with_seed(output, 1.0)
    }

    pub fn backward_with_seed(&self, output: Var, seed: f64) -> Result<Gradients, NumericsError> {
        let out_len = self.value(output).len();
        if out_len != 1 {
            return Err(NumericsError::NonScalarOutput(self.value(output).shape().to_vec()));
        }
        let n_nodes = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n_nodes).map(|_| None).collect();
        grads[output.0] = Some(vec![seed]);
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut param_grads: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();

        for idx in (0..n_nodes).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(idx, node, &g, &mut grads, &mut param_grads);
            grads[idx] = Some(g);
        }

        let node_grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    let (m, n) = self.value(Var(i)).dims2();
                    Tensor::matrix(m, n, data)
                })
            })
            .collect();
        Ok(Gradients {
            node_grads,
            param_grads,
        })
    }

    fn backprop_node(
        &self,
        idx: usize,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut [Option<Tensor>],
    ) {
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = param_grads[id.0]
                    .get_or_insert_with(|| Tensor::zeros(out.shape().to_vec()));
                for (a, b) in slot.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2();
                let n = tb.cols();
                let ga = acc(grads, *a, m * k);
                matmul_bt_acc(g, tb.data(), ga, m, k, n);
                let gb = acc(grads, *b, k * n);
                matmul_at_acc(ta.data(), g, gb, m, k, n);
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let ga = acc(grads, *a, g.len());
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(tb) {
                    *o += gv * y;
                }
                let gb = acc(grads, *b, g.len());
                for ((o, gv), x) in gb.iter_mut().zip(g).zip(ta) {
                    *o += gv * x;
                }
            }
            Op::AddRow(a, row) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                let n = self.value(*row).cols();
                let gr = acc(grads, *row, n);
                for chunk in g.chunks(n) {
                    add_into(gr, chunk, 1.0);
                }
            }
            Op::MulRow(a, row) => {
                let ta = self.value(*a).data();
                let tr = self.value(*row).data();
                let n = tr.len();
                let ga = acc(grads, *a, g.len());
                for (i, (o, gv)) in ga.iter_mut().zip(g).enumerate() {
                    *o += gv * tr[i % n];
                }
                let gr = acc(grads, *row, n);
                for (i, (gv, x)) in g.iter().zip(ta).enumerate() {
                    gr[i % n] += gv * x;
                }
            }
            Op::Scale(a, c) => add_into(acc(grads, *a, g.len()), g, *c),
            Op::Offset(a) => add_into(acc(grads, *a, g.len()), g, 1.0),
            Op::MulConst(a, c) => {
                let ga = acc(grads, *a, g.len());
                for ((o, gv), cv) in ga.iter_mut().zip(g).zip(c) {
                    *o += gv * cv;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
            Op::Exp(a) => {
                let y = out.data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *o += gv * yv;
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    *o += gv / xv;
                }
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    *o += gv * sign(*xv);
                }
            }
            Op::Recip(a) => {
                let y = out.data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                    *o -= gv * yv * yv;
                }
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    *o += gv * sigmoid(*xv);
                }
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((o, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                    if *xv > *floor {
                        *o += gv;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let ga = acc(grads, *a, g.len());
                for ((o_row, g_row), y_row) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let inner = dot(g_row, y_row);
                    for ((o, gv), yv) in o_row.iter_mut().zip(g_row).zip(y_row) {
                        *o += yv * (gv - inner);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let ga = acc(grads, *a, g.len());
                for ((o_row, g_row), y_row) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let total: f64 = g_row.iter().sum();
                    for ((o, gv), yv) in o_row.iter_mut().zip(g_row).zip(y_row) {
                        *o += gv - yv.exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = out.cols();
                let nf = n as f64;
                let ga = acc(grads, *x, g.len());
                for (r, ((o_row, g_row), xh)) in ga
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(xhat.chunks(n))
                    .enumerate()
                {
                    let mean_g = g_row.iter().sum::<f64>() / nf;
                    let mean_gx = dot(g_row, xh) / nf;
                    for ((o, gv), xv) in o_row.iter_mut().zip(g_row).zip(xh) {
                        *o += inv_std[r] * (gv - mean_g - xv * mean_gx);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let m = self.value(p).rows();
                    let gp = acc(grads, p, m * w);
                    for r in 0..m {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + col..r * n + col + w], 1.0);
                    }
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(acc(grads, p, len), &g[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2();
                let w = out.cols();
                let ga = acc(grads, *a, m * n);
                for r in 0..m {
                    add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w], 1.0);
                }
            }
            Op::GatherRows(a, idx_list) => {
                let (m, n) = self.value(*a).dims2();
                let ga = acc(grads, *a, m * n);
                for (r, &i) in idx_list.iter().enumerate() {
                    add_into(&mut ga[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                }
            }
            Op::SelectBlocks(a, offsets) => {
                let (m, n) = self.value(*a).dims2();
                let w = out.cols();
                let ga = acc(grads, *a, m * n);
                for (r, &off) in offsets.iter().enumerate() {
                    add_into(&mut ga[r * n + off..r * n + off + w], &g[r * w..(r + 1) * w], 1.0);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                for o in acc(grads, *a, len) {
                    *o += g[0];
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                let s = g[0] / len.max(1) as f64;
                for o in acc(grads, *a, len) {
                    *o += s;
                }
            }
            Op::SumRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let ga = acc(grads, *a, m * n);
                for row in ga.chunks_mut(n) {
                    add_into(row, g, 1.0);
                }
            }
            Op::Attention(ctx) => self.backprop_attention(ctx, g, grads),
        }
    }

    fn backprop_attention(&self, ctx: &AttentionCtx, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tq, tk, tv) = (self.value(ctx.q), self.value(ctx.k), self.value(ctx.v));
        let (nq, d) = tq.dims2();
        let nk = tk.rows();
        let dv = tv.cols();
        let heads = ctx.heads;
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * dv];
        let mut ga = Vec::new();
        for (r, nbrs) in ctx.neighbors.iter().enumerate() {
            let m = nbrs.len();
            if m == 0 {
                continue;
            }
            let w = &ctx.weights[r];
            for h in 0..heads {
                let wh = &w[h * m..(h + 1) * m];
                let g_out = &g[r * dv + h * dvh..r * dv + (h + 1) * dvh];
                // dL/dweight_j = g_out . v_j ; dL/dv_j += weight_j * g_out
                ga.clear();
                for (&a, &j) in wh.iter().zip(nbrs) {
                    let vrow = &tv.data()[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                    ga.push(dot(g_out, vrow));
                    let gvrow = &mut gv[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                    for (o, x) in gvrow.iter_mut().zip(g_out) {
                        *o += a * x;
                    }
                }
                let inner = dot(&ga, wh);
                let qh = &tq.data()[r * d + h * dh..r * d + (h + 1) * dh];
                for (idx, &j) in nbrs.iter().enumerate() {
                    let gs = wh[idx] * (ga[idx] - inner) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    let krow = &tk.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    let gqrow = &mut gq[r * d + h * dh..r * d + (h + 1) * dh];
                    for (o, x) in gqrow.iter_mut().zip(krow) {
                        *o += gs * x;
                    }
                    let gkrow = &mut gk[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, x) in gkrow.iter_mut().zip(qh) {
                        *o += gs * x;
                    }
                }
            }
        }
        add_into(acc(grads, ctx.q, nq * d), &gq, 1.0);
        add_into(acc(grads, ctx.k, nk * d), &gk, 1.0);
        add_into(acc(grads, ctx.v, nk * dv), &gv, 1.0);
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a tape node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> &[Option<Tensor>] {
        &self.param_grads
    }

    pub fn into_param_grads(self) -> Vec<Option<Tensor>> {
        self.param_grads
    }
}
