//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation applied during one forward pass. Model
//! parameters live in a [`ParamStore`] and are referenced from the tape without
//! copying; calling [`Tape::backward`] yields per-parameter gradients plus the
//! gradient of every recorded node.
//!
//! The operation set is deliberately narrow: it covers what the text encoder,
//! the graph encoders, the prototype layer and the training objectives need.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        let id = ParamId(self.values.len());
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Gradients keyed by parameter, allocated lazily.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(param_count: usize) -> Self {
        Self {
            grads: vec![None; param_count],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.slot(id, g.shape()).add_assign(g);
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Value {
    Owned(Matrix),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    GatherParam(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddColRow(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Abs(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    SqDist(Var, Var),
    LogRatio(Var, f64),
    CosineMatrix(Var, Vec<f64>),
    MinMasked(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
}

/// A single forward pass. Parameters are borrowed from the store.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Backward {
    node_grads: Vec<Option<Matrix>>,
    pub params: Gradients,
}

impl Backward {
    /// Gradient with respect to any recorded node (zeros when unreachable).
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.node_grads[v.0].as_ref()
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of a parameter table, e.g. an embedding lookup.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.store.get(id);
        let mut out = Matrix::zeros(rows.len(), table.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        self.push(out, Op::GatherParam(id, rows.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(am.rows(), bm.rows());
        gemm(am, false, bm, true, &mut out, 0.0);
        self.push(out, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "elementwise shape mismatch");
        let data = am.data().iter().zip(bm.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(am.rows(), am.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let am = self.value(a);
        let rm = self.value(row);
        assert_eq!(rm.shape(), (1, am.cols()), "add_row shape mismatch");
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(rm.data()) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `out[i][j] = col[i] + row[j]` for an `n x 1` column and `1 x m` row.
    pub fn add_col_row(&mut self, col: Var, row: Var) -> Var {
        let c = self.value(col);
        let r = self.value(row);
        assert_eq!(c.cols(), 1, "add_col_row expects a column");
        assert_eq!(r.rows(), 1, "add_col_row expects a row");
        let mut out = Matrix::zeros(c.rows(), r.cols());
        for i in 0..c.rows() {
            for j in 0..r.cols() {
                out.set(i, j, c.data()[i] + r.data()[j]);
            }
        }
        self.push(out, Op::AddColRow(col, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = am.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), None);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// get probability zero. Every row needs at least one allowed entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let am = self.value(a);
        assert_eq!(mask.len(), am.len(), "mask shape mismatch");
        let cols = am.cols();
        let mut out = am.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), Some(&mask[r * cols..(r + 1) * cols]));
        }
        self.push(out, Op::MaskedSoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = am.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Per-row layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let n = xm.cols();
        let mut xhat = Matrix::zeros(xm.rows(), n);
        let mut out = Matrix::zeros(xm.rows(), n);
        let mut inv_std = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        let c = am.cols();
        let out = Matrix::from_vec(len, c, am.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        let mut out = Matrix::zeros(am.rows(), len);
        for r in 0..am.rows() {
            out.row_mut(r).copy_from_slice(&am.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Column-wise mean over rows: `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows() > 0, "mean of zero rows");
        let mut out = Matrix::zeros(1, am.cols());
        for r in 0..am.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(am.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / am.rows() as f64);
        self.push(out, Op::MeanRows(a))
    }

    /// Column-wise max over rows: `n x m -> 1 x m`, ties to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows() > 0, "max of zero rows");
        let mut arg = vec![0usize; am.cols()];
        let mut out = am.row_matrix(0);
        for r in 1..am.rows() {
            for c in 0..am.cols() {
                if am.get(r, c) > out.data()[c] {
                    out.data_mut()[c] = am.get(r, c);
                    arg[c] = r;
                }
            }
        }
        self.push(out, Op::MaxRows(a, arg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    /// Pairwise squared Euclidean distances between the rows of `e` (`n x d`)
    /// and the rows of `p` (`m x d`), giving `n x m`.
    pub fn sq_dist(&mut self, e: Var, p: Var) -> Var {
        let (em, pm) = (self.value(e), self.value(p));
        assert_eq!(em.cols(), pm.cols(), "sq_dist dimension mismatch");
        let mut out = Matrix::zeros(em.rows(), pm.rows());
        for i in 0..em.rows() {
            for j in 0..pm.rows() {
                out.set(i, j, crate::tensor::squared_distance(em.row(i), pm.row(j)));
            }
        }
        self.push(out, Op::SqDist(e, p))
    }

    /// Elementwise `ln((x + 1) / (x + eps))`.
    pub fn log_ratio(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).map(|x| crate::protonet::similarity_from_sq_distance(x, eps));
        self.push(out, Op::LogRatio(a, eps))
    }

    /// Cosine similarity between every pair of rows; zero-norm rows give 0.
    pub fn cosine_matrix(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let norms: Vec<f64> = (0..am.rows()).map(|r| crate::tensor::norm(am.row(r))).collect();
        let n = am.rows();
        let mut out = Matrix::zeros(n, n);
        for q in 0..n {
            for r in 0..n {
                let v = if norms[q] == 0.0 || norms[r] == 0.0 {
                    0.0
                } else {
                    crate::tensor::dot(am.row(q), am.row(r)) / (norms[q] * norms[r])
                };
                out.set(q, r, v);
            }
        }
        self.push(out, Op::CosineMatrix(a, norms))
    }

    /// Row-wise minimum over the entries allowed by `mask`: `n x m -> n x 1`.
    /// Ties go to the lowest column index.
    pub fn min_masked(&mut self, a: Var, mask: &[bool]) -> Var {
        let am = self.value(a);
        assert_eq!(mask.len(), am.len(), "mask shape mismatch");
        let cols = am.cols();
        let mut arg = Vec::with_capacity(am.rows());
        let mut out = Matrix::zeros(am.rows(), 1);
        for r in 0..am.rows() {
            let mut best: Option<(usize, f64)> = None;
            for c in 0..cols {
                if !mask[r * cols + c] {
                    continue;
                }
                let v = am.get(r, c);
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((c, v));
                }
            }
            let (c, v) = best.expect("min_masked row without allowed entries");
            arg.push(c);
            out.set(r, 0, v);
        }
        self.push(out, Op::MinMasked(a, arg))
    }

    /// Selects one column per row: `n x m -> n x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let am = self.value(a);
        assert_eq!(cols.len(), am.rows(), "pick index count mismatch");
        let data = cols.iter().enumerate().map(|(r, &c)| am.get(r, c)).collect();
        self.push(Matrix::from_vec(am.rows(), 1, data), Op::Pick(a, cols.to_vec()))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Backward {
        let shape = self.value(loss).shape();
        assert_eq!(shape, (1, 1), "backward from a non-scalar node");
        self.backward_with(loss, Matrix::filled(1, 1, 1.0))
    }

    /// Backpropagates an explicit upstream gradient from any node.
    pub fn backward_with(&self, root: Var, seed: Matrix) -> Backward {
        assert_eq!(self.value(root).shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(seed);
        let mut params = Gradients::new(self.store.len());

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads, &mut params);
            grads[idx] = Some(g);
        }
        Backward {
            node_grads: grads,
            params,
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>], params: &mut Gradients) {
        let node = &self.nodes[idx];
        let out = match &node.value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::GatherParam(id, rows) => {
                let shape = self.store.get(*id).shape();
                let slot = params.slot(*id, shape);
                for (i, &r) in rows.iter().enumerate() {
                    for (s, x) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                gemm(g, false, bm, true, &mut ga, 0.0);
                let mut gb = Matrix::zeros(bm.rows(), bm.cols());
                gemm(am, true, g, false, &mut gb, 0.0);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                gemm(g, false, bm, false, &mut ga, 0.0);
                let mut gb = Matrix::zeros(bm.rows(), bm.cols());
                gemm(g, true, am, false, &mut gb, 0.0);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                acc(grads, *a, hadamard(g, bm));
                acc(grads, *b, hadamard(g, am));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                acc(grads, *row, gr);
            }
            Op::AddColRow(col, row) => {
                let mut gc = Matrix::zeros(g.rows(), 1);
                let mut gr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let v = g.get(i, j);
                        gc.data_mut()[i] += v;
                        gr.data_mut()[j] += v;
                    }
                }
                acc(grads, *col, gc);
                acc(grads, *row, gr);
            }
            Op::Relu(a) => {
                let am = self.value(*a);
                acc(grads, *a, zip(g, am, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let am = self.value(*a);
                acc(grads, *a, zip(g, am, |gv, x| if x > 0.0 { gv } else { slope * gv }));
            }
            Op::Tanh(a) => acc(grads, *a, zip(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Abs(a) => {
                let am = self.value(*a);
                acc(grads, *a, zip(g, am, |gv, x| gv * sign(x)));
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let inner: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = y[c] * (gy[c] - inner);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let gy = g.row(r);
                    let total: f64 = gy.iter().sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = gy[c] - out.get(r, c).exp() * total;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let n = xhat.cols() as f64;
                let mut gx = Matrix::zeros(xhat.rows(), xhat.cols());
                let mut gg = Matrix::zeros(1, xhat.cols());
                let mut gb = Matrix::zeros(1, xhat.cols());
                for r in 0..xhat.rows() {
                    let gy = g.row(r);
                    let xh = xhat.row(r);
                    let dxhat: Vec<f64> = gy.iter().zip(gm.data()).map(|(a, b)| a * b).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for c in 0..xh.len() {
                        gx.set(r, c, inv_std[r] / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx));
                        gg.data_mut()[c] += gy[c] * xh[c];
                        gb.data_mut()[c] += gy[c];
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::SliceRows(a, start) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                let c = am.cols();
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let part = Matrix::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec());
                    acc(grads, p, part);
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let mut part = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        part.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    acc(grads, p, part);
                    off += cols;
                }
            }
            Op::MeanRows(a) => {
                let am = self.value(*a);
                let inv = 1.0 / am.rows() as f64;
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x * inv;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::MaxRows(a, arg) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (c, &r) in arg.iter().enumerate() {
                    ga.set(r, c, g.data()[c]);
                }
                acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::SqDist(e, p) => {
                let (em, pm) = (self.value(*e), self.value(*p));
                let mut ge = Matrix::zeros(em.rows(), em.cols());
                let mut gp = Matrix::zeros(pm.rows(), pm.cols());
                for i in 0..em.rows() {
                    for j in 0..pm.rows() {
                        let w = 2.0 * g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..em.cols() {
                            let diff = em.get(i, k) - pm.get(j, k);
                            ge.data_mut()[i * em.cols() + k] += w * diff;
                            gp.data_mut()[j * pm.cols() + k] -= w * diff;
                        }
                    }
                }
                acc(grads, *e, ge);
                acc(grads, *p, gp);
            }
            Op::LogRatio(a, eps) => {
                let am = self.value(*a);
                acc(grads, *a, zip(g, am, |gv, x| gv * (1.0 / (x + 1.0) - 1.0 / (x + eps))));
            }
            Op::CosineMatrix(a, norms) => {
                let am = self.value(*a);
                let (n, d) = am.shape();
                let mut ga = Matrix::zeros(n, d);
                for q in 0..n {
                    for r in 0..n {
                        let w = g.get(q, r);
                        if q == r || w == 0.0 || norms[q] == 0.0 || norms[r] == 0.0 {
                            continue;
                        }
                        let c = out.get(q, r);
                        let nq = norms[q];
                        let nr = norms[r];
                        for k in 0..d {
                            let pq = am.get(q, k);
                            let pr = am.get(r, k);
                            ga.data_mut()[q * d + k] += w * (pr / (nq * nr) - c * pq / (nq * nq));
                            ga.data_mut()[r * d + k] += w * (pq / (nq * nr) - c * pr / (nr * nr));
                        }
                    }
                }
                acc(grads, *a, ga);
            }
            Op::MinMasked(a, arg) | Op::Pick(a, arg) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (r, &c) in arg.iter().enumerate() {
                    ga.set(r, c, g.data()[r]);
                }
                acc(grads, *a, ga);
            }
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip(a, b, |x, y| x * y)
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

pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (i, x) in row.iter_mut().enumerate() {
        if allowed(i) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to every parameter that received a gradient.
    /// Parameters listed in `frozen` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, frozen: &[ParamId]) {
        self.step += 1;
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if frozen.contains(&id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let decay = 1.0 - self.learning_rate * self.weight_decay;
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let pi = p.data()[i] * decay;
                p.data_mut()[i] = pi - self.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` with respect to every entry of every
    /// parameter, compared with the tape's analytic gradient.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Tape<'_>) -> Var) {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss).params
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let plus = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.get_mut(id).data_mut()[i] = orig - h;
                let minus = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
                let tol = 1e-5 * a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (a - numeric).abs() <= tol,
                    "{}[{i}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (n, r, c) in shapes {
            s.add(*n, Matrix::random_uniform(*r, *c, 1.0, &mut rng));
        }
        s
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let mut s = rand_store(&[("a", 3, 4), ("b", 4, 2), ("r", 1, 2), ("g", 1, 2), ("be", 1, 2)], 1);
        check_grads(&mut s, |t| {
            let a = t.param(ParamId(0));
            let b = t.param(ParamId(1));
            let r = t.param(ParamId(2));
            let x = t.matmul(a, b);
            let x = t.add_row(x, r);
            let x = t.tanh(x);
            let gamma = t.param(ParamId(3));
            let beta = t.param(ParamId(4));
            let ln = t.layer_norm(x, gamma, beta);
            let sm = t.softmax_rows(ln);
            let ls = t.log_softmax_rows(x);
            let m = t.mul(sm, ls);
            let tr = t.transpose(m);
            let mm = t.matmul_t(tr, tr);
            let y = t.mean_rows(mm);
            let y = t.abs(y);
            t.sum_all(y)
        });
    }

    #[test]
    fn distance_ops_match_finite_differences() {
        let mut s = rand_store(&[("e", 3, 4), ("p", 4, 4)], 2);
        check_grads(&mut s, |t| {
            let e = t.param(ParamId(0));
            let p = t.param(ParamId(1));
            let d = t.sq_dist(e, p);
            let sim = t.log_ratio(d, 1e-4);
            let mask: Vec<bool> = (0..12).map(|i| i % 4 < 2).collect();
            let mn = t.min_masked(d, &mask);
            let mx = t.max_rows(sim);
            let cos = t.cosine_matrix(p);
            let hinge = t.add_scalar(cos, -0.3);
            let hinge = t.relu(hinge);
            let a = t.sum_all(mn);
            let b = t.sum_all(mx);
            let c = t.sum_all(hinge);
            let ab = t.add(a, b);
            let abc = t.sub(ab, c);
            t.scale(abc, 0.7)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut s = rand_store(&[("x", 4, 3), ("c", 4, 1), ("r", 1, 4)], 3);
        check_grads(&mut s, |t| {
            let x = t.param(ParamId(0));
            let c = t.param(ParamId(1));
            let r = t.param(ParamId(2));
            let e = t.add_col_row(c, r);
            let e = t.leaky_relu(e, 0.2);
            let mask: Vec<bool> = (0..16).map(|i| i % 5 != 1).collect();
            let att = t.masked_softmax_rows(e, &mask);
            let h = t.matmul(att, x);
            let a = t.slice_cols(h, 1, 2);
            let b = t.slice_rows(h, 0, 2);
            let bt = t.transpose(b);
            let cat = t.concat_cols(&[a, x]);
            let cat2 = t.concat_rows(&[bt, a]);
            let pk = t.pick(cat2, &[0, 1, 0, 1, 0, 1, 1]);
            let pk = t.relu(pk);
            let s1 = t.sum_all(pk);
            let sq = t.mul(cat, cat);
            let s2 = t.sum_all(sq);
            t.add(s1, s2)
        });
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut s = ParamStore::new();
        let id = s.add("emb", Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let mut t = Tape::new(&s);
        let g = t.gather(id, &[1, 1, 0]);
        let l = t.sum_all(g);
        let b = t.backward(l);
        assert_eq!(b.params.get(id).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zero_masked() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let a = t.constant(Matrix::from_rows(&[vec![1.0, 5.0, 2.0]]));
        let y = t.masked_softmax_rows(a, &[true, false, true]);
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adamw_moves_against_gradient_and_decays() {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut g = Gradients::new(1);
        g.accumulate(id, &Matrix::from_vec(1, 2, vec![1.0, 0.0]));
        let mut opt = AdamW::new(0.1, 0.1);
        opt.step(&mut s, &g, &[]);
        let w = s.get(id).data();
        assert!((w[0] - (1.0 * 0.99 - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-0.99)).abs() < 1e-12);
    }
}
