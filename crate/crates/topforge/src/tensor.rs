//! Dense `f64` matrices with reverse-mode automatic differentiation.
//!
//! The operator set is deliberately closed: exactly what the policy network
//! needs (matmul, concatenation, softmax, tanh, normalization, masking,
//! gather/slice plumbing) and nothing else. A [`Graph`] records operations
//! as they execute; [`Graph::backward`] replays them once in reverse
//! topological order and accumulates gradients into `requires_grad` leaves.
//!
//! Masking convention: "minus infinity" is represented by [`MASK_VALUE`],
//! the most negative finite float. A numerically stabilized softmax then
//! produces exactly 0.0 at masked positions without ever forming a NaN from
//! an `inf - inf` subtraction. Rows whose maximum falls below the sentinel
//! threshold are treated as fully masked and rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

/// Stand-in for −∞ in logits; see the module docs.
pub const MASK_VALUE: f64 = f64::MIN;

/// ε added to variances in batch and layer normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Rows whose maximum is below this are considered fully masked.
const ALL_MASKED: f64 = -1e300;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("softmax: row {row} is fully masked")]
    InvalidMask { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// A dense tensor. Graph operations work on rank-2 tensors (matrices) with
/// row vectors standing in for biases and scalars stored as 1×1; the
/// checkpoint archive accepts any rank.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    /// Value identity: shape and data. Gradient state is bookkeeping.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn from_shape(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || len != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "from_shape",
                msg: format!("shape {shape:?} does not describe {} values", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, TensorError> {
        Tensor::from_shape(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { shape: vec![rows, cols], data: vec![0.0; rows * cols], requires_grad: false, grad: None }
    }

    /// A 1×d row vector.
    pub fn row(data: Vec<f64>) -> Tensor {
        let d = data.len();
        Tensor { shape: vec![1, d], data, requires_grad: false, grad: None }
    }

    /// A 1×1 scalar.
    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1, 1], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a 1×1 tensor.
    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }
}

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Batch statistics observed (or frozen) for one normalization site, one
/// entry per feature column.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Scale(TensorId, f64),
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    RepeatRows(TensorId, usize),
    MeanRows(TensorId),
    Softmax(TensorId),
    Tanh(TensorId),
    Ln(TensorId),
    MaskedFill(TensorId, Vec<bool>),
    GatherRows(TensorId, Vec<usize>),
    SliceRows(TensorId, usize),
    SliceCols(TensorId, usize),
    SumAll(TensorId),
    Pick(TensorId, usize, usize),
    BatchNormTrain { x: TensorId, gamma: TensorId, beta: TensorId, stats: BnStats },
    BatchNormInfer { x: TensorId, gamma: TensorId, beta: TensorId, stats: BnStats },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, var: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// A single-owner recording context: build one per rollout or training
/// step. Node ids are only valid within the graph that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "{op} produced a non-finite value"
    );
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient accumulated into a leaf, if backward has run.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    fn insert(&mut self, mut tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        tensor.requires_grad = needs_grad;
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn require_matrix(&self, op: &'static str, id: TensorId) -> Result<(usize, usize), TensorError> {
        let t = &self.nodes[id.0].tensor;
        if t.shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("expected a matrix, got shape {:?}", t.shape),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    /// Inserts a tensor that gradients never flow into.
    pub fn constant(&mut self, tensor: Tensor) -> Result<TensorId, TensorError> {
        self.insert_leaf(tensor, false)
    }

    /// Inserts a differentiable leaf; backward accumulates into its grad.
    pub fn parameter(&mut self, tensor: Tensor) -> Result<TensorId, TensorError> {
        self.insert_leaf(tensor, true)
    }

    fn insert_leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Result<TensorId, TensorError> {
        if tensor.shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "leaf",
                msg: format!("graph tensors must be matrices, got shape {:?}", tensor.shape),
            });
        }
        Ok(self.insert(tensor, Op::Leaf, requires_grad))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ar, ac) = self.require_matrix("matmul", a)?;
        let (br, bc) = self.require_matrix("matmul", b)?;
        if ac != br {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![ar, ac],
                right: vec![br, bc],
            });
        }
        let av = self.nodes[a.0].tensor.data();
        let bv = self.nodes[b.0].tensor.data();
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            for k in 0..ac {
                let aik = av[i * ac + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * bc..(k + 1) * bc];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        check_finite("matmul", &out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.insert(Tensor::matrix(ar, bc, out)?, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("transpose", a)?;
        let av = self.nodes[a.0].tensor.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(c, r, out)?, Op::Transpose(a), needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        let (ar, ac) = self.require_matrix(name, a)?;
        let (br, bc) = self.require_matrix(name, b)?;
        if (ar, ac) != (br, bc) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: vec![ar, ac],
                right: vec![br, bc],
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data()
            .iter()
            .zip(self.nodes[b.0].tensor.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.insert(Tensor::matrix(ar, ac, out)?, op, needs))
    }

    /// Adds a 1×c row vector to every row of an r×c matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let (ar, ac) = self.require_matrix("add_row", a)?;
        let (rr, rc) = self.require_matrix("add_row", row)?;
        if rr != 1 || rc != ac {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vec![ar, ac],
                right: vec![rr, rc],
            });
        }
        let rv = self.nodes[row.0].tensor.data().to_vec();
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data()
            .chunks(ac)
            .flat_map(|chunk| chunk.iter().zip(&rv).map(|(&x, &y)| x + y))
            .collect();
        check_finite("add_row", &out);
        let needs = self.needs(a) || self.needs(row);
        Ok(self.insert(Tensor::matrix(ar, ac, out)?, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("scale", a)?;
        let out: Vec<f64> = self.nodes[a.0].tensor.data().iter().map(|&x| x * factor).collect();
        check_finite("scale", &out);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(r, c, out)?, Op::Scale(a, factor), needs))
    }

    /// x·W + b, the workhorse projection.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Concatenates matrices with equal row counts along the last dimension.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat_cols", msg: "no inputs".into() });
        }
        let (rows, c0) = self.require_matrix("concat_cols", parts[0])?;
        let mut total = c0;
        for &p in &parts[1..] {
            let (r, c) = self.require_matrix("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![rows, c0],
                    right: vec![r, c],
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = &self.nodes[p.0].tensor;
                let c = t.cols();
                out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.insert(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument { op: "concat_rows", msg: "no inputs".into() });
        }
        let (r0, cols) = self.require_matrix("concat_rows", parts[0])?;
        let mut total = r0;
        for &p in &parts[1..] {
            let (r, c) = self.require_matrix("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![r0, cols],
                    right: vec![r, c],
                });
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * cols);
        for &p in parts {
            out.extend_from_slice(self.nodes[p.0].tensor.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.insert(Tensor::matrix(total, cols, out)?, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Tiles a 1×c row into an r×c matrix.
    pub fn repeat_rows(&mut self, row: TensorId, times: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("repeat_rows", row)?;
        if r != 1 || times == 0 {
            return Err(TensorError::InvalidArgument {
                op: "repeat_rows",
                msg: format!("need a 1×c row and times >= 1, got shape [{r}, {c}], times {times}"),
            });
        }
        let rv = self.nodes[row.0].tensor.data().to_vec();
        let out: Vec<f64> = rv.iter().cycle().take(times * c).cloned().collect();
        let needs = self.needs(row);
        Ok(self.insert(Tensor::matrix(times, c, out)?, Op::RepeatRows(row, times), needs))
    }

    /// Column-wise mean over rows, returning a 1×c row.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("mean_rows", a)?;
        let av = self.nodes[a.0].tensor.data();
        let mut out = vec![0.0; c];
        for row in av.chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        check_finite("mean_rows", &out);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(1, c, out)?, Op::MeanRows(a), needs))
    }

    /// Row-stabilized softmax along the last dimension. Entries at or below
    /// the mask sentinel become exactly 0.0; a fully masked row is an error.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("softmax", a)?;
        let av = self.nodes[a.0].tensor.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max < ALL_MASKED {
                return Err(TensorError::InvalidMask { row: i });
            }
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = if x < ALL_MASKED { 0.0 } else { (x - max).exp() };
                out[i * c + j] = e;
                sum += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= sum;
            }
        }
        check_finite("softmax", &out);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(r, c, out)?, Op::Softmax(a), needs))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("tanh", a)?;
        let out: Vec<f64> = self.nodes[a.0].tensor.data().iter().map(|&x| x.tanh()).collect();
        check_finite("tanh", &out);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(r, c, out)?, Op::Tanh(a), needs))
    }

    /// Natural log, element-wise. Inputs must be strictly positive.
    pub fn ln(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("ln", a)?;
        let out: Vec<f64> = self.nodes[a.0].tensor.data().iter().map(|&x| x.ln()).collect();
        check_finite("ln", &out);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(r, c, out)?, Op::Ln(a), needs))
    }

    /// Replaces entries where `mask` is true with `value`; gradients flow
    /// only through unmasked positions. `mask` is row-major over the shape.
    pub fn masked_fill(
        &mut self,
        a: TensorId,
        mask: &[bool],
        value: f64,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("masked_fill", a)?;
        if mask.len() != r * c {
            return Err(TensorError::InvalidArgument {
                op: "masked_fill",
                msg: format!("mask length {} does not cover shape [{r}, {c}]", mask.len()),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .tensor
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        check_finite("masked_fill", &out);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(r, c, out)?, Op::MaskedFill(a, mask.to_vec()), needs))
    }

    /// Selects rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("gather_rows", a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {bad} out of range 0..{r}"),
            });
        }
        let av = self.nodes[a.0].tensor.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let needs = self.needs(a);
        Ok(self.insert(
            Tensor::matrix(indices.len(), c, out)?,
            Op::GatherRows(a, indices.to_vec()),
            needs,
        ))
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("slice_rows", a)?;
        if len == 0 || start + len > r {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows [{start}, {}) out of range 0..{r}", start + len),
            });
        }
        let av = self.nodes[a.0].tensor.data();
        let out = av[start * c..(start + len) * c].to_vec();
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(len, c, out)?, Op::SliceRows(a, start), needs))
    }

    /// Contiguous column slice `[start, start+len)`.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId, TensorError> {
        let (r, c) = self.require_matrix("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols [{start}, {}) out of range 0..{c}", start + len),
            });
        }
        let av = self.nodes[a.0].tensor.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.insert(Tensor::matrix(r, len, out)?, Op::SliceCols(a, start), needs))
    }

    /// Sum of all entries, as a 1×1 scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        self.require_matrix("sum_all", a)?;
        let s: f64 = self.nodes[a.0].tensor.data().iter().sum();
        check_finite("sum_all", &[s]);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::scalar(s), Op::SumAll(a), needs))
    }

    /// Extracts a single entry as a 1×1 scalar.
    pub fn pick(&mut self, a: TensorId, r: usize, c: usize) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.require_matrix("pick", a)?;
        if r >= rows || c >= cols {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                msg: format!("({r}, {c}) out of range for shape [{rows}, {cols}]"),
            });
        }
        let v = self.nodes[a.0].tensor.get(r, c);
        let needs = self.needs(a);
        Ok(self.insert(Tensor::scalar(v), Op::Pick(a, r, c), needs))
    }

    fn norm_param_shapes(
        &self,
        name: &'static str,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(usize, usize), TensorError> {
        let (r, c) = self.require_matrix(name, x)?;
        for &p in &[gamma, beta] {
            let (pr, pc) = self.require_matrix(name, p)?;
            if pr != 1 || pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    left: vec![r, c],
                    right: vec![pr, pc],
                });
            }
        }
        Ok((r, c))
    }

    fn normalize(x: &[f64], rows: usize, cols: usize, stats: &BnStats, gv: &[f64], bv: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let xhat = (x[i * cols + j] - stats.mean[j]) / (stats.var[j] + NORM_EPS).sqrt();
                out[i * cols + j] = gv[j] * xhat + bv[j];
            }
        }
        out
    }

    /// Batch normalization over the row (token) axis using batch statistics.
    /// Returns the normalized tensor and the observed per-column mean and
    /// biased variance so the caller can update its running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, BnStats), TensorError> {
        let (r, c) = self.norm_param_shapes("batch_norm", x, gamma, beta)?;
        let xv = self.nodes[x.0].tensor.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= r as f64;
        }
        for row in xv.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= r as f64;
        }
        let stats = BnStats { mean, var };
        let gv = self.nodes[gamma.0].tensor.data();
        let bv = self.nodes[beta.0].tensor.data();
        let out = Self::normalize(xv, r, c, &stats, gv, bv);
        check_finite("batch_norm", &out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.insert(
            Tensor::matrix(r, c, out)?,
            Op::BatchNormTrain { x, gamma, beta, stats: stats.clone() },
            needs,
        );
        Ok((id, stats))
    }

    /// Batch normalization with frozen running statistics: a deterministic
    /// affine map of its input.
    pub fn batch_norm_infer(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &BnStats,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.norm_param_shapes("batch_norm", x, gamma, beta)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                msg: format!("running stats cover {} features, input has {c}", stats.mean.len()),
            });
        }
        let xv = self.nodes[x.0].tensor.data();
        let gv = self.nodes[gamma.0].tensor.data();
        let bv = self.nodes[beta.0].tensor.data();
        let out = Self::normalize(xv, r, c, stats, gv, bv);
        check_finite("batch_norm", &out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.insert(
            Tensor::matrix(r, c, out)?,
            Op::BatchNormInfer { x, gamma, beta, stats: stats.clone() },
            needs,
        ))
    }

    /// Layer normalization: per-row mean and biased variance.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (r, c) = self.norm_param_shapes("layer_norm", x, gamma, beta)?;
        let xv = self.nodes[x.0].tensor.data();
        let mut mean = vec![0.0; r];
        let mut var = vec![0.0; r];
        for (i, row) in xv.chunks(c).enumerate() {
            mean[i] = row.iter().sum::<f64>() / c as f64;
            var[i] = row.iter().map(|&v| (v - mean[i]) * (v - mean[i])).sum::<f64>() / c as f64;
        }
        let gv = self.nodes[gamma.0].tensor.data();
        let bv = self.nodes[beta.0].tensor.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let denom = (var[i] + NORM_EPS).sqrt();
            for j in 0..c {
                let xhat = (xv[i * c + j] - mean[i]) / denom;
                out[i * c + j] = gv[j] * xhat + bv[j];
            }
        }
        check_finite("layer_norm", &out);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.insert(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm { x, gamma, beta, mean, var },
            needs,
        ))
    }

    /// Clears accumulated gradients on every leaf.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    /// Populates ∂loss/∂leaf for every `requires_grad` leaf reachable from
    /// `loss`. Repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(TensorError::NotScalar(self.nodes[loss.0].tensor.shape.clone()));
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = adjoint[id].take() else { continue };
            if !self.nodes[id].tensor.requires_grad {
                continue;
            }
            self.propagate(id, &dy, &mut adjoint);
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                let grad = node.tensor.grad.get_or_insert_with(|| vec![0.0; dy.len()]);
                for (g, d) in grad.iter_mut().zip(&dy) {
                    *g += d;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, dy: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let acc = |adjoint: &mut [Option<Vec<f64>>], parent: TensorId, contrib: Vec<f64>| {
            match &mut adjoint[parent.0] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(&contrib) {
                        *b += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let parent_len = |p: TensorId| self.nodes[p.0].tensor.data.len();

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ar, ac) = (self.nodes[a.0].tensor.rows(), self.nodes[a.0].tensor.cols());
                let bc = self.nodes[b.0].tensor.cols();
                if self.needs(*a) {
                    let bv = self.nodes[b.0].tensor.data();
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += dy[i * bc + j] * bv[k * bc + j];
                            }
                            da[i * ac + k] = s;
                        }
                    }
                    acc(adjoint, *a, da);
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].tensor.data();
                    let mut db = vec![0.0; ac * bc];
                    for k in 0..ac {
                        for i in 0..ar {
                            let aik = av[i * ac + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..bc {
                                db[k * bc + j] += aik * dy[i * bc + j];
                            }
                        }
                    }
                    acc(adjoint, *b, db);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (ar, ac) = (self.nodes[a.0].tensor.rows(), self.nodes[a.0].tensor.cols());
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        for j in 0..ac {
                            da[i * ac + j] = dy[j * ar + i];
                        }
                    }
                    acc(adjoint, *a, da);
                }
            }
            Op::Add(a, b) => {
                for &p in &[*a, *b] {
                    if self.needs(p) {
                        acc(adjoint, p, dy.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(adjoint, *a, dy.to_vec());
                }
                if self.needs(*b) {
                    acc(adjoint, *b, dy.iter().map(|d| -d).collect());
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    acc(adjoint, *a, dy.to_vec());
                }
                if self.needs(*row) {
                    let c = self.nodes[row.0].tensor.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in dy.chunks(c) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(adjoint, *row, dr);
                }
            }
            Op::Scale(a, factor) => {
                if self.needs(*a) {
                    acc(adjoint, *a, dy.iter().map(|d| d * factor).collect());
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.nodes[p.0].tensor.cols()).sum();
                let rows = self.nodes[id].tensor.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p.0].tensor.cols();
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&dy[i * total + offset..i * total + offset + c]);
                        }
                        acc(adjoint, p, dp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = parent_len(p);
                    if self.needs(p) {
                        acc(adjoint, p, dy[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::RepeatRows(row, times) => {
                if self.needs(*row) {
                    let c = self.nodes[row.0].tensor.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in dy.chunks(c).take(*times) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(adjoint, *row, dr);
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let (r, c) = (self.nodes[a.0].tensor.rows(), self.nodes[a.0].tensor.cols());
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = dy[j] / r as f64;
                        }
                    }
                    acc(adjoint, *a, da);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = self.nodes[id].tensor.data();
                    let c = self.nodes[id].tensor.cols();
                    let mut da = vec![0.0; y.len()];
                    for (i, (yrow, dyrow)) in y.chunks(c).zip(dy.chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(dyrow).map(|(&yv, &dv)| yv * dv).sum();
                        for j in 0..c {
                            da[i * c + j] = yrow[j] * (dyrow[j] - dot);
                        }
                    }
                    acc(adjoint, *a, da);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = self.nodes[id].tensor.data();
                    acc(adjoint, *a, dy.iter().zip(y).map(|(&d, &yv)| d * (1.0 - yv * yv)).collect());
                }
            }
            Op::Ln(a) => {
                if self.needs(*a) {
                    let x = self.nodes[a.0].tensor.data();
                    acc(adjoint, *a, dy.iter().zip(x).map(|(&d, &xv)| d / xv).collect());
                }
            }
            Op::MaskedFill(a, mask) => {
                if self.needs(*a) {
                    acc(
                        adjoint,
                        *a,
                        dy.iter().zip(mask).map(|(&d, &m)| if m { 0.0 } else { d }).collect(),
                    );
                }
            }
            Op::GatherRows(a, indices) => {
                if self.needs(*a) {
                    let c = self.nodes[a.0].tensor.cols();
                    let mut da = vec![0.0; parent_len(*a)];
                    for (pos, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            da[i * c + j] += dy[pos * c + j];
                        }
                    }
                    acc(adjoint, *a, da);
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs(*a) {
                    let c = self.nodes[a.0].tensor.cols();
                    let mut da = vec![0.0; parent_len(*a)];
                    da[start * c..start * c + dy.len()].copy_from_slice(dy);
                    acc(adjoint, *a, da);
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs(*a) {
                    let (r, c) = (self.nodes[a.0].tensor.rows(), self.nodes[a.0].tensor.cols());
                    let len = dy.len() / r;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + len]
                            .copy_from_slice(&dy[i * len..(i + 1) * len]);
                    }
                    acc(adjoint, *a, da);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    acc(adjoint, *a, vec![dy[0]; parent_len(*a)]);
                }
            }
            Op::Pick(a, r, c) => {
                if self.needs(*a) {
                    let cols = self.nodes[a.0].tensor.cols();
                    let mut da = vec![0.0; parent_len(*a)];
                    da[r * cols + c] = dy[0];
                    acc(adjoint, *a, da);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, stats } => {
                self.norm_backward(id, *x, *gamma, *beta, stats, true, dy, adjoint, acc);
            }
            Op::BatchNormInfer { x, gamma, beta, stats } => {
                self.norm_backward(id, *x, *gamma, *beta, stats, false, dy, adjoint, acc);
            }
            Op::LayerNorm { x, gamma, beta, mean, var } => {
                let (r, c) = (self.nodes[x.0].tensor.rows(), self.nodes[x.0].tensor.cols());
                let xv = self.nodes[x.0].tensor.data();
                let gv = self.nodes[gamma.0].tensor.data();
                let xhat: Vec<f64> = (0..r * c)
                    .map(|idx| {
                        let i = idx / c;
                        (xv[idx] - mean[i]) / (var[i] + NORM_EPS).sqrt()
                    })
                    .collect();
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += dy[i * c + j] * xhat[i * c + j];
                        }
                    }
                    acc(adjoint, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![0.0; c];
                    for chunk in dy.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    acc(adjoint, *beta, db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let denom = (var[i] + NORM_EPS).sqrt();
                        let g: Vec<f64> = (0..c).map(|j| dy[i * c + j] * gv[j]).collect();
                        let mean_g: f64 = g.iter().sum::<f64>() / c as f64;
                        let mean_gx: f64 =
                            g.iter().zip(&xhat[i * c..(i + 1) * c]).map(|(&a, &b)| a * b).sum::<f64>()
                                / c as f64;
                        for j in 0..c {
                            dx[i * c + j] =
                                (g[j] - mean_g - xhat[i * c + j] * mean_gx) / denom;
                        }
                    }
                    acc(adjoint, *x, dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        _id: usize,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &BnStats,
        batch_stats: bool,
        dy: &[f64],
        adjoint: &mut [Option<Vec<f64>>],
        acc: impl Fn(&mut [Option<Vec<f64>>], TensorId, Vec<f64>),
    ) {
        let (r, c) = (self.nodes[x.0].tensor.rows(), self.nodes[x.0].tensor.cols());
        let xv = self.nodes[x.0].tensor.data();
        let gv = self.nodes[gamma.0].tensor.data();
        let xhat: Vec<f64> = (0..r * c)
            .map(|idx| {
                let j = idx % c;
                (xv[idx] - stats.mean[j]) / (stats.var[j] + NORM_EPS).sqrt()
            })
            .collect();
        if self.needs(gamma) {
            let mut dg = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    dg[j] += dy[i * c + j] * xhat[i * c + j];
                }
            }
            acc(adjoint, gamma, dg);
        }
        if self.needs(beta) {
            let mut db = vec![0.0; c];
            for chunk in dy.chunks(c) {
                for (d, &v) in db.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
            acc(adjoint, beta, db);
        }
        if self.needs(x) {
            let mut dx = vec![0.0; r * c];
            for j in 0..c {
                let denom = (stats.var[j] + NORM_EPS).sqrt();
                if batch_stats {
                    let mut mean_dy = 0.0;
                    let mut mean_dyx = 0.0;
                    for i in 0..r {
                        mean_dy += dy[i * c + j];
                        mean_dyx += dy[i * c + j] * xhat[i * c + j];
                    }
                    mean_dy /= r as f64;
                    mean_dyx /= r as f64;
                    for i in 0..r {
                        dx[i * c + j] = gv[j] / denom
                            * (dy[i * c + j] - mean_dy - xhat[i * c + j] * mean_dyx);
                    }
                } else {
                    for i in 0..r {
                        dx[i * c + j] = dy[i * c + j] * gv[j] / denom;
                    }
                }
            }
            acc(adjoint, x, dx);
        }
    }
}

/// Compares reverse-mode gradients of `f` at `x` against central
/// differences, coordinate by coordinate, and returns the worst relative
/// error with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must be deterministic: it is re-invoked on fresh graphs for every
/// perturbed coordinate.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId, TensorError>,
{
    finite_diff_check_steps(f, x, &[step])
}

/// [`finite_diff_check`] with a per-coordinate choice of step: each
/// coordinate scores the best of the given steps, since no single step
/// suits both large-gradient coordinates (truncation) and near-zero ones
/// (rounding).
pub fn finite_diff_check_steps<F>(f: F, x: &Tensor, steps: &[f64]) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId, TensorError>,
{
    if steps.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check_steps",
            msg: "at least one step is required".into(),
        });
    }
    let eval = |data: &Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let id = g.constant(data.clone())?;
        let y = f(&mut g, id)?;
        if !g.value(y).is_scalar() {
            return Err(TensorError::NotScalar(g.value(y).shape().to_vec()));
        }
        Ok(g.value(y).scalar_value())
    };

    let mut g = Graph::new();
    let xid = g.parameter(x.clone())?;
    let y = f(&mut g, xid)?;
    if !g.value(y).is_scalar() {
        return Err(TensorError::NotScalar(g.value(y).shape().to_vec()));
    }
    g.backward(y)?;
    let analytic = g.grad(xid).expect("parameter leaf receives a gradient").to_vec();

    let mut worst = 0.0f64;
    for i in 0..x.data().len() {
        let mut best = f64::INFINITY;
        for &step in steps {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            best = best.min((analytic[i] - numeric).abs() / denom);
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

pub const ARCHIVE_MAGIC: [u8; 4] = *b"TOPF";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad archive: {0}")]
    Format(String),
}

/// Writes a named-parameter archive: magic, version, then one record per
/// tensor (name length, name, rank, dims, raw float64 data, all
/// little-endian). Entry order is preserved.
pub fn save_archive(path: &Path, entries: &IndexMap<String, Tensor>) -> Result<(), ArchiveError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&ARCHIVE_MAGIC)?;
    w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, ArchiveError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| ArchiveError::Format("truncated record".into()))?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads an archive written by [`save_archive`].
pub fn load_archive(path: &Path) -> Result<IndexMap<String, Tensor>, ArchiveError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| ArchiveError::Format("missing magic".into()))?;
    if magic != ARCHIVE_MAGIC {
        return Err(ArchiveError::Format(format!("wrong magic {magic:?}")));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(|_| ArchiveError::Format("missing version".into()))?;
    let version = u32::from_le_bytes(version);
    if version != ARCHIVE_VERSION {
        return Err(ArchiveError::Format(format!(
            "unsupported version {version} (expected {ARCHIVE_VERSION})"
        )));
    }

    let mut entries = IndexMap::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read(&mut len_buf)? {
            0 => break,
            8 => {}
            n => {
                r.read_exact(&mut len_buf[n..])
                    .map_err(|_| ArchiveError::Format("truncated record".into()))?;
            }
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(ArchiveError::Format(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|_| ArchiveError::Format("truncated name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| ArchiveError::Format("name is not UTF-8".into()))?;

        let rank = read_u64(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(ArchiveError::Format(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = read_u64(&mut r)? as usize;
            count = count.checked_mul(d).filter(|&c| c <= (1 << 30)).ok_or_else(|| {
                ArchiveError::Format(format!("implausible dims for `{name}`"))
            })?;
            shape.push(d);
        }
        let mut data = vec![0.0f64; count];
        for v in &mut data {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)
                .map_err(|_| ArchiveError::Format(format!("truncated data for `{name}`")))?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::from_shape(shape, data)
            .map_err(|e| ArchiveError::Format(e.to_string()))?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(ArchiveError::Format(format!("duplicate entry `{name}`")));
        }
    }
    Ok(entries)
}
