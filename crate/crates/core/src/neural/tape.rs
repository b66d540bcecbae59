use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::params::ParameterStore;
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_row, Tensor};
use super::NeuralError;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Reverse-mode gradient tape. Values are computed eagerly as ops are
/// recorded; [`Tape::backward`] consumes the tape.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize), NeuralError> {
    t.dims2().ok_or_else(|| NeuralError::ShapeMismatch {
        op,
        detail: format!("expected a rank-2 tensor, got shape {:?}", t.shape()),
    })
}

fn mismatch(op: &'static str, detail: String) -> NeuralError {
    NeuralError::ShapeMismatch { op, detail }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Records the named parameter once per tape and returns its handle.
    pub fn param(&mut self, store: &'a ParameterStore, name: &str) -> Result<Var, NeuralError> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| NeuralError::MissingParameter(name.to_string()))?;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let (m, k) = dims(self.value(a), "matmul")?;
        let (k2, n) = dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NeuralError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NeuralError> {
        let (m, n) = dims(self.value(x), op)?;
        let (r, c) = dims(self.value(row), op)?;
        if r != 1 || c != n {
            return Err(mismatch(op, format!("[{m}x{n}] with row [{r}x{c}]")));
        }
        let rv = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(a, b)| f(*a, *b)).collect::<Vec<_>>())
            .collect();
        Tensor::matrix(m, n, data)
    }

    /// `x[m x n] + row[1 x n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NeuralError> {
        let t = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    /// `x[m x n] * row[1 x n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NeuralError> {
        let t = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(t, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect()).expect("shape preserved");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| f(*a)).collect()).expect("shape preserved")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| 1.0 / (1.0 + (-a).exp()));
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        let rg = self.rg(x);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |a| a.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NeuralError> {
        let (m, n) = dims(self.value(x), "softmax")?;
        if n == 0 {
            return Err(mismatch("softmax", format!("[{m}x0] has no columns")));
        }
        let data = self.value(x).data().chunks(n).flat_map(softmax_row).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::Softmax(x), rg))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, NeuralError> {
        let (m, n) = dims(self.value(x), "layernorm")?;
        if n == 0 {
            return Err(mismatch("layernorm", format!("[{m}x0] has no columns")));
        }
        let mut normed = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in self.value(x).data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            normed.extend(row.iter().map(|v| (v - mean) * is));
        }
        let t = Tensor::matrix(m, n, normed.clone())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LayerNorm { x, normed, inv_std }, rg))
    }

    /// Gathers rows of `table` by id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, NeuralError> {
        let (v, d) = dims(self.value(table), "embed")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(mismatch("embed", format!("id {id} outside table [{v}x{d}]")));
            }
            data.extend_from_slice(self.value(table).row_slice(id));
        }
        let rg = self.rg(table);
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            t,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_cols", "no inputs".into()))?;
        let (m, _) = dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = dims(self.value(*p), "concat_cols")?;
            if r != m {
                return Err(mismatch("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::matrix(m, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NeuralError> {
        let (m, n) = dims(self.value(x), "slice_cols")?;
        if start > end || end > n {
            return Err(mismatch("slice_cols", format!("{start}..{end} of [{m}x{n}]")));
        }
        let data = (0..m)
            .flat_map(|r| self.value(x).row_slice(r)[start..end].to_vec())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, end - start, data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_rows", "no inputs".into()))?;
        let (_, n) = dims(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = dims(self.value(*p), "concat_rows")?;
            if c != n {
                return Err(mismatch("concat_rows", format!("column counts {n} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NeuralError> {
        let (m, n) = dims(self.value(x), "slice_rows")?;
        if start > end || end > m {
            return Err(mismatch("slice_rows", format!("{start}..{end} of [{m}x{n}]")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(end - start, n, data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NeuralError> {
        let (m, n) = dims(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Transpose(x), rg))
    }

    /// Column means, `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NeuralError> {
        let (m, n) = dims(self.value(x), "mean_rows")?;
        if m == 0 {
            return Err(mismatch("mean_rows", format!("[0x{n}] has no rows")));
        }
        let mut data = vec![0.0; n];
        for row in self.value(x).data().chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::row(data), Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean softmax cross-entropy of `logits[T x V]` against `targets[T]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NeuralError> {
        let (t, v) = dims(self.value(logits), "cross_entropy")?;
        if t != targets.len() || t == 0 {
            return Err(mismatch(
                "cross_entropy",
                format!("[{t}x{v}] logits with {} targets", targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(t * v);
        let mut loss = 0.0;
        for (row, &y) in self.value(logits).data().chunks(v).zip(targets) {
            if y >= v {
                return Err(mismatch("cross_entropy", format!("target {y} outside {v} classes")));
            }
            let p = softmax_row(row);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(p);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / t as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, NeuralError> {
        if self.nodes.is_empty() {
            return Err(NeuralError::EmptyTape);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(NeuralError::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, &mut grads, node, &g);
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (i, node) in nodes.into_iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
            let t = Tensor::new(node.value.shape().to_vec(), g)?;
            if let Some(name) = node.param {
                out.named.insert(name, t.clone());
            }
            out.leaves.insert(i, t);
        }
        Ok(out)
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().unwrap();
            let n = val(*b).dims2().unwrap().1;
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(nodes, grads, *a) {
                matmul_bt_acc(g, bd, ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                matmul_at_acc(ad, g, gb, m, k, n);
            }
        }
        Op::Add(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(ga) = acc(nodes, grads, v) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(ga) = acc(nodes, grads, v) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bd[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for i in 0..gb.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
        }
        Op::AddRow(x, row) => {
            let n = val(*row).numel();
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gr) = acc(nodes, grads, *row) {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::MulRow(x, row) => {
            let n = val(*row).numel();
            let (xd, rd) = (val(*x).data(), val(*row).data());
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, gi) in g.iter().enumerate() {
                    gx[i] += gi * rd[i % n];
                }
            }
            if let Some(gr) = acc(nodes, grads, *row) {
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi * xd[i];
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, y) in out.data().iter().enumerate() {
                    gx[i] += g[i] * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, y) in out.data().iter().enumerate() {
                    gx[i] += g[i] * (1.0 - y * y);
                }
            }
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..gx.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let n = out.dims2().unwrap().1;
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((y, gy), gxr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, normed, inv_std } => {
            let n = out.dims2().unwrap().1;
            let nf = n as f64;
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, ((xh, gy), gxr)) in normed.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let sum_g: f64 = gy.iter().sum();
                    let sum_gx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] += inv_std[r] / nf * (nf * gy[j] - sum_g - xh[j] * sum_gx);
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            let d = val(*table).dims2().unwrap().1;
            if let Some(gt) = acc(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = out.dims2().unwrap();
            let mut offset = 0;
            for p in parts {
                let c = val(*p).dims2().unwrap().1;
                if let Some(gp) = acc(nodes, grads, *p) {
                    for r in 0..m {
                        for j in 0..c {
                            gp[r * c + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += c;
            }
        }
        Op::SliceCols { x, start } => {
            let (m, w) = out.dims2().unwrap();
            let n = val(*x).dims2().unwrap().1;
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..m {
                    for j in 0..w {
                        gx[r * n + start + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).numel();
                if let Some(gp) = acc(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                }
                offset += len;
            }
        }
        Op::SliceRows { x, start } => {
            let n = out.dims2().unwrap().1;
            if let Some(gx) = acc(nodes, grads, *x) {
                gx[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
        Op::Transpose(x) => {
            let (m, n) = val(*x).dims2().unwrap();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::MeanRows(x) => {
            let (m, n) = val(*x).dims2().unwrap();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (i, v) in gx.iter_mut().enumerate() {
                    *v += g[i % n] / m as f64;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let v = val(*logits).dims2().unwrap().1;
            let scale = g[0] / targets.len() as f64;
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &y) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_half_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::identity(3));
        let a = Tensor::matrix(3, 2, vec![1.5, -2.0, 0.25, 7.0, 3.0, -0.5]).unwrap();
        let av = tape.constant(a.clone());
        let out = tape.matmul(i3, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn layer_norm_gives_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x).unwrap();
        let d = tape.value(y).data();
        // mean 2, population variance 2/3
        let expected = 1.0 / (2.0f64 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert!((d[0] + expected).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12);
        assert!((d[2] - expected).abs() < 1e-12);
        let mean: f64 = d.iter().sum::<f64>() / 3.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn product_rule_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad(true));
        let y = tape.leaf(Tensor::scalar(3.0).with_grad(true));
        let p = tape.mul(x, y).unwrap();
        let grads = tape.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn shape_errors_name_the_op_and_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2x3] * [2x3]"), "{err}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]).with_grad(true));
        assert!(matches!(tape.backward(a), Err(NeuralError::NonScalarLoss(_))));
        assert!(matches!(Tape::new().backward(Var(0)), Err(NeuralError::EmptyTape)));
    }
}
