//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the records in exact reverse
//! order and accumulates gradients for every trainable matrix that entered
//! the computation through [`Tape::param`]. Variables are plain indices into
//! the tape, so a tape is single-threaded and lives for one episode.

use serde::{Deserialize, Serialize};

use super::matrix::{exact_sum, sigmoid_scalar, Matrix, LOG_FLOOR};
use crate::error::{DrlError, Result};

/// Offset added by [`Tape::row_shift`] so every shifted entry is strictly positive.
pub const SHIFT_EPS: f64 = 1e-12;
/// Lower guard on row sums in [`Tape::row_normalize`].
pub const SUM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered registry of named trainable matrices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    #[serde(flatten)]
    pub value: Matrix,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` under `name`, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        if let Some(id) = self.id(&name) {
            self.entries[id.0].value = value;
            return id;
        }
        self.entries.push(NamedMatrix { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| DrlError::Config(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn total_entries(&self) -> usize {
        self.entries.iter().map(|e| e.value.as_slice().len()).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Recip(Var),
    RowSoftmax(Var),
    PickNll(Var, Vec<(usize, usize)>),
    GroupMeanRows(Var, usize),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Slice(Var, usize, usize),
    CenterRows(Var),
    NormalizeRowsL2(Var),
    SetDiagonal(Var),
    RowNormalize(Var),
    RowShift(Var, Vec<Option<usize>>),
    ReplaceRows(Var, Vec<bool>),
    PairwiseAbsDiff(Var),
    PairwiseSqDist(Var),
    PairwiseDist(Var),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one backward pass, indexed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros of the parameter's shape when it did not
    /// take part in the computation.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = store.get(id).shape();
            Matrix::zeros(r, c)
        })
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> DrlError {
    DrlError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// [`Matrix::matmul_exact`] on the tape; gradients as for `matmul`.
    pub fn matmul_exact(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_exact(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err("add_row", x, b));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().contains(&0.0) {
            return Err(DrlError::NonFinite("reciprocal of zero".into()));
        }
        let v = self.value(a).map(|x| 1.0 / x);
        Ok(self.push(v, Op::Recip(a)))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = super::matrix::row_softmax(self.value(a));
        self.push(v, Op::RowSoftmax(a))
    }

    /// Mean negative log of one picked entry per row: `-(1/n) Σ_r ln max(x[r, labels[r]], 1e-12)`.
    pub fn nll_mean(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(probs);
        if labels.len() != x.rows() {
            return Err(DrlError::Shape {
                op: "nll_mean",
                left: x.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
            return Err(DrlError::Label {
                label: bad,
                width: x.cols(),
            });
        }
        let n = labels.len() as f64;
        let mut logs: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(r, &c)| x.get(r, c).max(LOG_FLOOR).ln())
            .collect();
        let total = exact_sum(&mut logs);
        let picks = labels.iter().copied().enumerate().collect();
        Ok(self.push(Matrix::filled(1, 1, -total / n), Op::PickNll(probs, picks)))
    }

    /// Averages consecutive blocks of `group` rows.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let x = self.value(a);
        if group == 0 || !x.rows().is_multiple_of(group) {
            return Err(DrlError::Shape {
                op: "group_mean_rows",
                left: x.shape(),
                right: (group, 1),
            });
        }
        let out_rows = x.rows() / group;
        let mut out = Matrix::zeros(out_rows, x.cols());
        for g in 0..out_rows {
            for r in g * group..(g + 1) * group {
                for (o, v) in out.row_mut(g).iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            for o in out.row_mut(g) {
                *o /= group as f64;
            }
        }
        Ok(self.push(out, Op::GroupMeanRows(a, group)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), self.value(p)));
            }
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols;
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Output row `i` is input row `indices[i]`; indices may repeat.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if indices.is_empty() || indices.iter().any(|&i| i >= x.rows()) {
            return Err(DrlError::Shape {
                op: "select_rows",
                left: x.shape(),
                right: (indices.len(), 1),
            });
        }
        let mut out = Matrix::zeros(indices.len(), x.cols());
        for (o, &i) in indices.iter().enumerate() {
            out.row_mut(o).copy_from_slice(x.row(i));
        }
        Ok(self.push(out, Op::SelectRows(a, indices.to_vec())))
    }

    /// Builds a `rows x cols` matrix whose entry `(r, c)` is `a[picks[r * cols + c]]`.
    pub fn gather(&mut self, a: Var, picks: &[(usize, usize)], rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if picks.len() != rows * cols || picks.iter().any(|&(r, c)| r >= x.rows() || c >= x.cols()) {
            return Err(DrlError::Shape {
                op: "gather",
                left: x.shape(),
                right: (rows, cols),
            });
        }
        let flat: Vec<usize> = picks.iter().map(|&(r, c)| r * x.cols() + c).collect();
        let data = flat.iter().map(|&i| x.as_slice()[i]).collect();
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::Gather(a, flat)))
    }

    /// Contiguous block starting at `(r0, c0)`.
    pub fn slice(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if rows == 0 || cols == 0 || r0 + rows > x.rows() || c0 + cols > x.cols() {
            return Err(DrlError::Shape {
                op: "slice",
                left: x.shape(),
                right: (r0 + rows, c0 + cols),
            });
        }
        let out = Matrix::from_fn(rows, cols, |r, c| x.get(r0 + r, c0 + c));
        Ok(self.push(out, Op::Slice(a, r0, c0)))
    }

    /// Subtracts each row's mean from that row.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        self.push(out, Op::CenterRows(a))
    }

    /// Scales each row to unit Euclidean norm. A zero row is a degenerate
    /// feature and is reported by index.
    pub fn normalize_rows_l2(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
                return Err(DrlError::DegenerateFeature {
                    node: r,
                    reason: "zero norm",
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.push(out, Op::NormalizeRowsL2(a)))
    }

    /// Overwrites the diagonal of a square matrix with ones.
    pub fn set_diagonal_one(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != x.cols() {
            return Err(shape_err("set_diagonal_one", x, x));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            out.set(i, i, 1.0);
        }
        Ok(self.push(out, Op::SetDiagonal(a)))
    }

    /// Divides each row by its sum, with the sum guarded below at 1e-12.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let s = row.iter().sum::<f64>().max(SUM_GUARD);
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::RowNormalize(a))
    }

    /// Per row: `x - min(0, min(x)) + 1e-12`, making every entry positive
    /// while preserving order within the row.
    pub fn row_shift(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut argmins = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mut arg = 0;
            for (i, &v) in row.iter().enumerate() {
                if v < row[arg] {
                    arg = i;
                }
            }
            let shift = row[arg].min(0.0);
            argmins.push((shift < 0.0).then_some(arg));
            row.iter_mut().for_each(|v| *v = *v - shift + SHIFT_EPS);
        }
        self.push(out, Op::RowShift(a, argmins))
    }

    /// Rows where `mask` is set are replaced by the corresponding rows of
    /// `replacement` (a constant); the others pass through.
    pub fn replace_rows(&mut self, a: Var, mask: &[bool], replacement: &Matrix) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.rows() || replacement.shape() != x.shape() {
            return Err(shape_err("replace_rows", x, replacement));
        }
        let mut out = x.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(replacement.row(r));
            }
        }
        Ok(self.push(out, Op::ReplaceRows(a, mask.to_vec())))
    }

    /// `(M*M) x d` matrix whose row `m*M + n` is `|a_m - a_n|`.
    pub fn pairwise_abs_diff(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.rows();
        let mut out = Matrix::zeros(m * m, x.cols());
        for i in 0..m {
            for j in 0..m {
                for (o, (p, q)) in out.row_mut(i * m + j).iter_mut().zip(x.row(i).iter().zip(x.row(j))) {
                    *o = (p - q).abs();
                }
            }
        }
        self.push(out, Op::PairwiseAbsDiff(a))
    }

    /// Squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let out = sq_dist_matrix(self.value(a));
        self.push(out, Op::PairwiseSqDist(a))
    }

    /// Euclidean distances between rows. The derivative at zero distance is taken as zero.
    pub fn pairwise_dist(&mut self, a: Var) -> Var {
        let out = sq_dist_matrix(self.value(a)).map(f64::sqrt);
        self.push(out, Op::PairwiseDist(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        let out = Matrix::from_vec(rows, cols, x.as_slice().to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    /// Sum of 1x1 terms.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from the scalar `root`. Records are visited in exact
    /// reverse order; parameter accumulators start at zero on every call.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let (r, c) = self.value(root).shape();
        grads[root.0] = Some(Matrix::filled(r, c, 1.0));
        let mut by_param: Vec<Option<Matrix>> = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if by_param.len() <= id.0 {
                        by_param.resize(id.0 + 1, None);
                    }
                    accumulate(&mut by_param[id.0], g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&bv.transpose()).expect("matmul backward");
                    let gb = av.transpose().matmul(&g).expect("matmul backward");
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b)).expect("mul backward");
                    let gb = g.hadamard(self.value(*a)).expect("mul backward");
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g.scale(*k)),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::Relu(a) => {
                    let ga = g
                        .zip_map(self.value(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })
                        .expect("relu backward");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(y, "sigmoid", |gv, s| gv * s * (1.0 - s)).expect("sigmoid");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => {
                    let ga = g.hadamard(y).expect("exp backward");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(y, "recip", |gv, inv| -gv * inv * inv).expect("recip");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::RowSoftmax(a) => {
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::PickNll(a, picks) => {
                    let x = self.value(*a);
                    let n = picks.len() as f64;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for &(r, c) in picks {
                        let p = x.get(r, c);
                        if p > LOG_FLOOR {
                            ga.set(r, c, ga.get(r, c) - g.get(0, 0) / (n * p));
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::GroupMeanRows(a, group) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let src = g.row(r / group);
                        for (o, v) in ga.row_mut(r).iter_mut().zip(src) {
                            *o = v / *group as f64;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let gp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        accumulate(&mut grads[p.0], gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        let gp = Matrix::from_fn(h, g.cols(), |r, c| g.get(off + r, c));
                        accumulate(&mut grads[p.0], gp);
                        off += h;
                    }
                }
                Op::SelectRows(a, indices) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for (o, &i) in indices.iter().enumerate() {
                        for (dst, v) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather(a, flat) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for (k, &i) in flat.iter().enumerate() {
                        ga.as_mut_slice()[i] += g.as_slice()[k];
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Slice(a, r0, c0) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            ga.set(r0 + r, c0 + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::CenterRows(a) => {
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let row = ga.row_mut(r);
                        let mean = row.iter().sum::<f64>() / row.len() as f64;
                        row.iter_mut().for_each(|v| *v -= mean);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::NormalizeRowsL2(a) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SetDiagonal(a) => {
                    let mut ga = g;
                    for i in 0..ga.rows() {
                        ga.set(i, i, 0.0);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::RowNormalize(a) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let raw = x.row(r).iter().sum::<f64>();
                        let s = raw.max(SUM_GUARD);
                        let dot: f64 = if raw > SUM_GUARD {
                            g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        };
                        for (o, gv) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = (gv - dot) / s;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::RowShift(a, argmins) => {
                    let mut ga = g;
                    for (r, arg) in argmins.iter().enumerate() {
                        if let Some(c) = arg {
                            let total: f64 = ga.row(r).iter().sum();
                            ga.set(r, *c, ga.get(r, *c) - total);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ReplaceRows(a, mask) => {
                    let mut ga = g;
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            ga.row_mut(r).fill(0.0);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::PairwiseAbsDiff(a) => {
                    let x = self.value(*a);
                    let m = x.rows();
                    let mut ga = Matrix::zeros(m, x.cols());
                    for i in 0..m {
                        for j in 0..m {
                            for c in 0..x.cols() {
                                let d = x.get(i, c) - x.get(j, c);
                                let s = if d > 0.0 {
                                    1.0
                                } else if d < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                let gv = g.get(i * m + j, c) * s;
                                ga.set(i, c, ga.get(i, c) + gv);
                                ga.set(j, c, ga.get(j, c) - gv);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::PairwiseSqDist(a) | Op::PairwiseDist(a) => {
                    let is_dist = matches!(node.op, Op::PairwiseDist(_));
                    let x = self.value(*a);
                    let m = x.rows();
                    let mut ga = Matrix::zeros(m, x.cols());
                    for i in 0..m {
                        for j in 0..m {
                            // d(d²)/dx_i = 2 (x_i - x_j); d(d)/dx_i = (x_i - x_j) / d
                            let w = if is_dist {
                                let d = y.get(i, j);
                                if d > 0.0 {
                                    g.get(i, j) / d
                                } else {
                                    0.0
                                }
                            } else {
                                2.0 * g.get(i, j)
                            };
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..x.cols() {
                                let diff = x.get(i, c) - x.get(j, c);
                                ga.set(i, c, ga.get(i, c) + w * diff);
                                ga.set(j, c, ga.get(j, c) - w * diff);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    let ga = Matrix::from_vec(r, c, g.into_vec()).expect("reshape backward");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads[a.0], Matrix::filled(r, c, g.get(0, 0)));
                }
            }
        }
        Gradients { by_param }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        None => *slot = Some(g),
    }
}

fn sq_dist_matrix(x: &Matrix) -> Matrix {
    let m = x.rows();
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}
