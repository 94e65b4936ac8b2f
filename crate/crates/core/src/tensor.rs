//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are row-major [`Tensor`]s. Differentiable computation goes through a
//! [`Graph`]: ops append their output tensor to an arena and, when any input
//! requires gradients, record a tape entry replayed in reverse by
//! [`Graph::backward`]. Tensors with `requires_grad == false` cost nothing at
//! backward time, so inference reuses the same code path.
//!
//! There is no implicit broadcasting; the one exception is
//! [`Graph::add_bias_row`], which adds a vector across the rows of a matrix.

use thiserror::Error;

/// Numerical stabilizer added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Maximum tolerated deviation of a target-distribution row sum from 1.
pub const DIST_ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} contains a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward requires a scalar, got shape {got:?}")]
    NotScalar { got: Vec<usize> },
    #[error("softmax_cross_entropy: target row {row} sums to {sum}, expected 1")]
    InvalidDistribution { row: usize, sum: f64 },
    #[error("{op}: row {row} is fully masked")]
    FullyMaskedRow { op: &'static str, row: usize },
    #[error("{op}: index {index} out of bounds for {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating shape/data agreement and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim {
                shape: shape.to_vec(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "from_vec",
                index,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a gradient target when used as a graph leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    /// Gradient buffer populated by [`Graph::backward`].
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn validate_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op, index });
        }
        Ok(())
    }

    fn rank(&self) -> usize {
        self.shape.len()
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum TapeOp {
    Matmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// Grouped matmul on rank-3 operands sharing the leading dimension.
    /// With `transpose_b`, `b` is `[g, n, k]` and used transposed per group.
    Bmm {
        a: TensorId,
        b: TensorId,
        out: TensorId,
        transpose_b: bool,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    AddBiasRow {
        x: TensorId,
        bias: TensorId,
        out: TensorId,
    },
    Hadamard {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Scale {
        x: TensorId,
        factor: f64,
        out: TensorId,
    },
    Tanh {
        x: TensorId,
        out: TensorId,
    },
    Relu {
        x: TensorId,
        out: TensorId,
    },
    Reshape {
        x: TensorId,
        out: TensorId,
    },
    Permute {
        x: TensorId,
        out: TensorId,
        perm: Vec<usize>,
    },
    GatherRows {
        table: TensorId,
        out: TensorId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        out: TensorId,
    },
    SoftmaxRows {
        out: TensorId,
        x: TensorId,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        out: TensorId,
        /// Softmax of the logits, saved by the forward pass.
        probs: Vec<f64>,
        target: Vec<f64>,
        pad_rows: Vec<bool>,
        kept_rows: usize,
    },
    SumAll {
        x: TensorId,
        out: TensorId,
    },
}

/// Computation record: an arena of tensors plus a tape of operations in
/// construction (hence topological) order. Backward walks the tape once, in
/// reverse, so each node is visited exactly once and results are
/// deterministic for a fixed graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    tape: Vec<TapeOp>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Inserts a tensor as a leaf; its `requires_grad` flag is respected.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t)
    }

    /// Inserts a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad()
    }

    pub fn item(&self, id: TensorId) -> f64 {
        self.nodes[id.0].item()
    }

    fn push(&mut self, t: Tensor) -> TensorId {
        self.nodes.push(t);
        TensorId(self.nodes.len() - 1)
    }

    fn push_result(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorId {
        self.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(&ta.data, &tb.data, m, k, n, &mut out);
        let rg = ta.requires_grad || tb.requires_grad;
        let id = self.push_result(vec![m, n], out, rg);
        if rg {
            self.tape.push(TapeOp::Matmul { a, b, out: id });
        }
        Ok(id)
    }

    /// Grouped matmul: `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.bmm_impl(a, b, false)
    }

    /// Grouped matmul against transposed right operand:
    /// `[g, m, k] x [g, n, k] -> [g, m, n]`.
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(
        &mut self,
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    ) -> Result<TensorId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let bad = ta.rank() != 3
            || tb.rank() != 3
            || ta.shape[0] != tb.shape[0]
            || if transpose_b {
                ta.shape[2] != tb.shape[2]
            } else {
                ta.shape[2] != tb.shape[1]
            };
        if bad {
            return Err(TensorError::ShapeMismatch {
                op: if transpose_b { "bmm_nt" } else { "bmm" },
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let (g, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let n = if transpose_b { tb.shape[1] } else { tb.shape[2] };
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let asl = &ta.data[gi * m * k..(gi + 1) * m * k];
            let bsl = &tb.data[gi * k * n..(gi + 1) * k * n];
            let osl = &mut out[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                matmul_nt(asl, bsl, m, k, n, osl);
            } else {
                matmul_nn(asl, bsl, m, k, n, osl);
            }
        }
        let rg = ta.requires_grad || tb.requires_grad;
        let id = self.push_result(vec![g, m, n], out, rg);
        if rg {
            self.tape.push(TapeOp::Bmm {
                a,
                b,
                out: id,
                transpose_b,
            });
        }
        Ok(id)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = ta.requires_grad || tb.requires_grad;
        let shape = ta.shape.clone();
        let id = self.push_result(shape, data, rg);
        if rg {
            self.tape.push(TapeOp::Add { a, b, out: id });
        }
        Ok(id)
    }

    /// Adds a length-`d` bias vector to every row of an `[n, d]` matrix.
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (tx, tb) = (&self.nodes[x.0], &self.nodes[bias.0]);
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_row",
                left: tx.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = tx.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += tb.data[c];
            }
        }
        let rg = tx.requires_grad || tb.requires_grad;
        let id = self.push_result(vec![n, d], data, rg);
        if rg {
            self.tape.push(TapeOp::AddBiasRow { x, bias, out: id });
        }
        Ok(id)
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if ta.shape != tb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "hadamard",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = ta.requires_grad || tb.requires_grad;
        let shape = ta.shape.clone();
        let id = self.push_result(shape, data, rg);
        if rg {
            self.tape.push(TapeOp::Hadamard { a, b, out: id });
        }
        Ok(id)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let tx = &self.nodes[x.0];
        let data = tx.data.iter().map(|v| v * factor).collect();
        let rg = tx.requires_grad;
        let shape = tx.shape.clone();
        let id = self.push_result(shape, data, rg);
        if rg {
            self.tape.push(TapeOp::Scale { x, factor, out: id });
        }
        id
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let tx = &self.nodes[x.0];
        let data = tx.data.iter().map(|v| v.tanh()).collect();
        let rg = tx.requires_grad;
        let shape = tx.shape.clone();
        let id = self.push_result(shape, data, rg);
        if rg {
            self.tape.push(TapeOp::Tanh { x, out: id });
        }
        id
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let tx = &self.nodes[x.0];
        let data = tx.data.iter().map(|v| v.max(0.0)).collect();
        let rg = tx.requires_grad;
        let shape = tx.shape.clone();
        let id = self.push_result(shape, data, rg);
        if rg {
            self.tape.push(TapeOp::Relu { x, out: id });
        }
        id
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let tx = &self.nodes[x.0];
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != tx.data.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("shape with {} elements", tx.data.len()),
                got: shape.to_vec(),
            });
        }
        let data = tx.data.clone();
        let rg = tx.requires_grad;
        let id = self.push_result(shape.to_vec(), data, rg);
        if rg {
            self.tape.push(TapeOp::Reshape { x, out: id });
        }
        Ok(id)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId, TensorError> {
        let tx = &self.nodes[x.0];
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("permutation {:?} invalid for rank {}", perm, rank),
            });
        }
        let (shape, data) = permute_data(&tx.shape, perm, &tx.data);
        let rg = tx.requires_grad;
        let id = self.push_result(shape, data, rg);
        if rg {
            self.tape.push(TapeOp::Permute {
                x,
                out: id,
                perm: perm.to_vec(),
            });
        }
        Ok(id)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let tx = &self.nodes[x.0];
        if tx.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "transpose",
                expected: "rank-2 tensor".into(),
                got: tx.shape.clone(),
            });
        }
        self.permute(x, &[1, 0])
    }

    /// Selects rows of a `[rows, d]` table; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let tt = &self.nodes[table.0];
        if tt.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                expected: "rank-2 table".into(),
                got: tt.shape.clone(),
            });
        }
        let (rows, d) = (tt.shape[0], tt.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data[i * d..(i + 1) * d]);
        }
        let rg = tt.requires_grad;
        let id = self.push_result(vec![ids.len(), d], data, rg);
        if rg {
            self.tape.push(TapeOp::GatherRows {
                table,
                out: id,
                ids: ids.to_vec(),
            });
        }
        Ok(id)
    }

    /// Row-wise layer normalization of an `[n, d]` matrix with per-feature
    /// gain and bias vectors of length `d`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (tx, tg, tb) = (&self.nodes[x.0], &self.nodes[gain.0], &self.nodes[bias.0]);
        if tx.rank() != 2
            || tg.rank() != 1
            || tb.rank() != 1
            || tg.shape[0] != tx.shape[1]
            || tb.shape[0] != tx.shape[1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape.clone(),
                right: tg.shape.clone(),
            });
        }
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                data[r * d + c] = (row[c] - mean) * inv * tg.data[c] + tb.data[c];
            }
        }
        let rg = tx.requires_grad || tg.requires_grad || tb.requires_grad;
        let id = self.push_result(vec![n, d], data, rg);
        if rg {
            self.tape.push(TapeOp::LayerNorm {
                x,
                gain,
                bias,
                out: id,
            });
        }
        Ok(id)
    }

    /// Softmax over the last axis. `mask` entries set to `true` are excluded:
    /// their probability is exactly zero and the remaining entries of the row
    /// normalize to one. Computed with max-subtraction.
    pub fn softmax_rows(
        &mut self,
        x: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        let tx = &self.nodes[x.0];
        if tx.rank() < 1 {
            return Err(TensorError::BadShape {
                op: "softmax_rows",
                expected: "rank >= 1".into(),
                got: tx.shape.clone(),
            });
        }
        if let Some(m) = mask {
            if m.len() != tx.data.len() {
                return Err(TensorError::Invalid {
                    op: "softmax_rows",
                    msg: format!("mask length {} != numel {}", m.len(), tx.data.len()),
                });
            }
        }
        let width = *tx.shape.last().unwrap();
        let rows = tx.data.len() / width;
        let mut data = vec![0.0; tx.data.len()];
        for r in 0..rows {
            let lo = r * width;
            let row = &tx.data[lo..lo + width];
            let kept = |c: usize| mask.map_or(true, |m| !m[lo + c]);
            let mut max = f64::NEG_INFINITY;
            let mut kept_count = 0usize;
            for c in 0..width {
                if kept(c) {
                    kept_count += 1;
                    if row[c] > max {
                        max = row[c];
                    }
                }
            }
            if kept_count == 0 {
                return Err(TensorError::FullyMaskedRow {
                    op: "softmax_rows",
                    row: r,
                });
            }
            // Kept entries exist but the running max is not a finite number:
            // the inputs overflowed or went NaN upstream.
            if !max.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "softmax_rows",
                    index: lo,
                });
            }
            let mut sum = 0.0;
            for c in 0..width {
                if kept(c) {
                    let e = (row[c] - max).exp();
                    data[lo + c] = e;
                    sum += e;
                }
            }
            for c in 0..width {
                data[lo + c] /= sum;
            }
        }
        let rg = tx.requires_grad;
        let shape = tx.shape.clone();
        let id = self.push_result(shape, data, rg);
        if rg {
            self.tape.push(TapeOp::SoftmaxRows { out: id, x });
        }
        Ok(id)
    }

    /// Mean over unmasked rows of `-sum(target * log softmax(logits))`.
    ///
    /// `logits` and `target` are `[n, v]`; `pad_rows[r] == true` excludes row
    /// `r`. Every kept target row must sum to one (one-hot rows for ground
    /// truth, softmax rows for distillation). Differentiable with respect to
    /// the logits only; the target is treated as a constant.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        target: TensorId,
        pad_rows: &[bool],
    ) -> Result<TensorId, TensorError> {
        let (tl, tt) = (&self.nodes[logits.0], &self.nodes[target.0]);
        if tl.rank() != 2 || tl.shape != tt.shape {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: tl.shape.clone(),
                right: tt.shape.clone(),
            });
        }
        let (n, v) = (tl.shape[0], tl.shape[1]);
        if pad_rows.len() != n {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("pad mask length {} != rows {}", pad_rows.len(), n),
            });
        }
        let kept_rows = pad_rows.iter().filter(|&&m| !m).count();
        if kept_rows == 0 {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: "all rows masked".into(),
            });
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for r in 0..n {
            if pad_rows[r] {
                continue;
            }
            let row = &tl.data[r * v..(r + 1) * v];
            let trow = &tt.data[r * v..(r + 1) * v];
            let sum: f64 = trow.iter().sum();
            if (sum - 1.0).abs() > DIST_ROW_SUM_TOL {
                return Err(TensorError::InvalidDistribution { row: r, sum });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..v {
                z += (row[c] - max).exp();
            }
            let log_z = max + z.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - max).exp() / z;
                if trow[c] != 0.0 {
                    loss += trow[c] * (log_z - row[c]);
                }
            }
        }
        loss /= kept_rows as f64;
        let rg = tl.requires_grad;
        let target_data = tt.data.clone();
        let id = self.push_result(vec![1], vec![loss], rg);
        if rg {
            self.tape.push(TapeOp::SoftmaxCrossEntropy {
                logits,
                out: id,
                probs,
                target: target_data,
                pad_rows: pad_rows.to_vec(),
                kept_rows,
            });
        }
        Ok(id)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let tx = &self.nodes[x.0];
        let total: f64 = tx.data.iter().sum();
        let rg = tx.requires_grad;
        let id = self.push_result(vec![1], vec![total], rg);
        if rg {
            self.tape.push(TapeOp::SumAll { x, out: id });
        }
        id
    }

    /// Reverse pass from a scalar loss. Populates the `grad` buffer of every
    /// node that requires gradients and is an ancestor of `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].is_scalar() {
            return Err(TensorError::NotScalar {
                got: self.nodes[loss.0].shape.clone(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..self.tape.len()).rev() {
            // Records are appended in construction order, so a single reverse
            // sweep propagates every gradient exactly once.
            let op = &self.tape[idx];
            if self.nodes[op_out(op).0].grad.is_none() {
                continue;
            }
            self.apply_backward(idx);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut [f64] {
        let n = self.nodes[id.0].data.len();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn apply_backward(&mut self, idx: usize) {
        // Taking the record out lets us borrow node buffers freely; it is put
        // back unchanged afterwards.
        let op = std::mem::replace(&mut self.tape[idx], TapeOp::SumAll {
            x: TensorId(0),
            out: TensorId(0),
        });
        match &op {
            TapeOp::Matmul { a, b, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let bdat = self.nodes[b.0].data.clone();
                    let ga = self.grad_buf(*a);
                    matmul_nt_acc(&d, &bdat, m, n, k, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let adat = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(*b);
                    matmul_tn_acc(&adat, &d, m, k, n, gb);
                }
            }
            TapeOp::Bmm {
                a,
                b,
                out,
                transpose_b,
            } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let (g, m, k) = (
                    self.nodes[a.0].shape[0],
                    self.nodes[a.0].shape[1],
                    self.nodes[a.0].shape[2],
                );
                let n = self.nodes[out.0].shape[2];
                if self.nodes[a.0].requires_grad {
                    let bdat = self.nodes[b.0].data.clone();
                    let ga = self.grad_buf(*a);
                    for gi in 0..g {
                        let dsl = &d[gi * m * n..(gi + 1) * m * n];
                        let bsl = &bdat[gi * k * n..(gi + 1) * k * n];
                        let gasl = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *transpose_b {
                            // C = A x B^T with B [n, k]: dA += dC x B
                            matmul_nn_acc(dsl, bsl, m, n, k, gasl);
                        } else {
                            matmul_nt_acc(dsl, bsl, m, n, k, gasl);
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let adat = self.nodes[a.0].data.clone();
                    let gb = self.grad_buf(*b);
                    for gi in 0..g {
                        let dsl = &d[gi * m * n..(gi + 1) * m * n];
                        let asl = &adat[gi * m * k..(gi + 1) * m * k];
                        let gbsl = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *transpose_b {
                            // dB += dC^T x A
                            matmul_tn_acc(dsl, asl, m, n, k, gbsl);
                        } else {
                            matmul_tn_acc(asl, dsl, m, k, n, gbsl);
                        }
                    }
                }
            }
            TapeOp::Add { a, b, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                for src in [a, b] {
                    if self.nodes[src.0].requires_grad {
                        let g = self.grad_buf(*src);
                        for (gi, di) in g.iter_mut().zip(&d) {
                            *gi += di;
                        }
                    }
                }
            }
            TapeOp::AddBiasRow { x, bias, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let (n, dim) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                if self.nodes[x.0].requires_grad {
                    let g = self.grad_buf(*x);
                    for (gi, di) in g.iter_mut().zip(&d) {
                        *gi += di;
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let g = self.grad_buf(*bias);
                    for r in 0..n {
                        for c in 0..dim {
                            g[c] += d[r * dim + c];
                        }
                    }
                }
            }
            TapeOp::Hadamard { a, b, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                if self.nodes[a.0].requires_grad {
                    let bdat = self.nodes[b.0].data.clone();
                    let g = self.grad_buf(*a);
                    for i in 0..d.len() {
                        g[i] += d[i] * bdat[i];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let adat = self.nodes[a.0].data.clone();
                    let g = self.grad_buf(*b);
                    for i in 0..d.len() {
                        g[i] += d[i] * adat[i];
                    }
                }
            }
            TapeOp::Scale { x, factor, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let f = *factor;
                let g = self.grad_buf(*x);
                for i in 0..d.len() {
                    g[i] += d[i] * f;
                }
            }
            TapeOp::Tanh { x, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let y = self.nodes[out.0].data.clone();
                let g = self.grad_buf(*x);
                for i in 0..d.len() {
                    g[i] += d[i] * (1.0 - y[i] * y[i]);
                }
            }
            TapeOp::Relu { x, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let xv = self.nodes[x.0].data.clone();
                let g = self.grad_buf(*x);
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        g[i] += d[i];
                    }
                }
            }
            TapeOp::Reshape { x, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let g = self.grad_buf(*x);
                for (gi, di) in g.iter_mut().zip(&d) {
                    *gi += di;
                }
            }
            TapeOp::Permute { x, out, perm } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let out_shape = self.nodes[out.0].shape.clone();
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, dperm) = permute_data(&out_shape, &inv, &d);
                let g = self.grad_buf(*x);
                for (gi, di) in g.iter_mut().zip(&dperm) {
                    *gi += di;
                }
            }
            TapeOp::GatherRows { table, out, ids } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let dim = self.nodes[table.0].shape[1];
                let g = self.grad_buf(*table);
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..dim {
                        g[i * dim + c] += d[r * dim + c];
                    }
                }
            }
            TapeOp::LayerNorm { x, gain, bias, out } => {
                let d = self.nodes[out.0].grad.clone().unwrap();
                let xv = self.nodes[x.0].data.clone();
                let gv = self.nodes[gain.0].data.clone();
                let (n, dim) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut gx = vec![0.0; n * dim];
                let mut gg = vec![0.0; dim];
                let mut gb = vec![0.0; dim];
                for r in 0..n {
                    let row = &xv[r * dim..(r + 1) * dim];
                    let drow = &d[r * dim..(r + 1) * dim];
                    let mean = row.iter().sum::<f64>() / dim as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut m1 = 0.0; // mean of dy*g
                    let mut m2 = 0.0; // mean of dy*g*xhat
                    for c in 0..dim {
                        let xhat = (row[c] - mean) * inv;
                        let dyg = drow[c] * gv[c];
                        m1 += dyg;
                        m2 += dyg * xhat;
                        gg[c] += drow[c] * xhat;
                        gb[c] += drow[c];
                    }
                    m1 /= dim as f64;
                    m2 /= dim as f64;
                    for c in 0..dim {
                        let xhat = (row[c] - mean) * inv;
                        gx[r * dim + c] = (drow[c] * gv[c] - m1 - xhat * m2) * inv;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let g = self.grad_buf(*x);
                    for (gi, di) in g.iter_mut().zip(&gx) {
                        *gi += di;
                    }
                }
                if self.nodes[gain.0].requires_grad {
                    let g = self.grad_buf(*gain);
                    for (gi, di) in g.iter_mut().zip(&gg) {
                        *gi += di;
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let g = self.grad_buf(*bias);
                    for (gi, di) in g.iter_mut().zip(&gb) {
                        *gi += di;
                    }
                }
            }
            TapeOp::SoftmaxRows { out, x } => {
                // Masked entries have probability zero, so their logit
                // gradient vanishes through p * (...) automatically.
                let d = self.nodes[out.0].grad.clone().unwrap();
                let p = self.nodes[out.0].data.clone();
                let width = *self.nodes[out.0].shape.last().unwrap();
                let rows = p.len() / width;
                let g = self.grad_buf(*x);
                for r in 0..rows {
                    let lo = r * width;
                    let mut dot = 0.0;
                    for c in 0..width {
                        dot += d[lo + c] * p[lo + c];
                    }
                    for c in 0..width {
                        g[lo + c] += p[lo + c] * (d[lo + c] - dot);
                    }
                }
            }
            TapeOp::SoftmaxCrossEntropy {
                logits,
                out,
                probs,
                target,
                pad_rows,
                kept_rows,
            } => {
                let up = self.nodes[out.0].grad.clone().unwrap()[0];
                let v = self.nodes[logits.0].shape[1];
                let scale = up / *kept_rows as f64;
                let n = pad_rows.len();
                let probs = probs.clone();
                let target = target.clone();
                let pad = pad_rows.clone();
                let g = self.grad_buf(*logits);
                for r in 0..n {
                    if pad[r] {
                        continue;
                    }
                    for c in 0..v {
                        g[r * v + c] += scale * (probs[r * v + c] - target[r * v + c]);
                    }
                }
            }
            TapeOp::SumAll { x, out } => {
                let up = self.nodes[out.0].grad.clone().unwrap()[0];
                let g = self.grad_buf(*x);
                for gi in g.iter_mut() {
                    *gi += up;
                }
            }
        }
        self.tape[idx] = op;
    }
}

fn op_out(op: &TapeOp) -> TensorId {
    match op {
        TapeOp::Matmul { out, .. }
        | TapeOp::Bmm { out, .. }
        | TapeOp::Add { out, .. }
        | TapeOp::AddBiasRow { out, .. }
        | TapeOp::Hadamard { out, .. }
        | TapeOp::Scale { out, .. }
        | TapeOp::Tanh { out, .. }
        | TapeOp::Relu { out, .. }
        | TapeOp::Reshape { out, .. }
        | TapeOp::Permute { out, .. }
        | TapeOp::GatherRows { out, .. }
        | TapeOp::LayerNorm { out, .. }
        | TapeOp::SoftmaxRows { out, .. }
        | TapeOp::SoftmaxCrossEntropy { out, .. }
        | TapeOp::SumAll { out, .. } => *out,
    }
}

/// `out += a[m,k] x b[k,n]` with `out` pre-zeroed by callers that need `=`.
fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_nn_acc(a, b, m, k, n, out);
}

/// `out += a[m,k] x b[n,k]^T`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// `out += a[m,n] x b[n,k]^T`, i.e. accumulate `a x b^T` into `[m,k]`.
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    matmul_nt(a, b, m, n, k, out);
}

/// `out += a[m,k]^T x b[m,n]`, accumulating into `[k,n]`.
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn permute_data(shape: &[usize], perm: &[usize], src: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let mut data = vec![0.0; src.len()];
    let mut idx = vec![0usize; rank];
    for (flat, &v) in src.iter().enumerate() {
        let mut rem = flat;
        for i in 0..rank {
            idx[i] = rem / in_strides[i];
            rem %= in_strides[i];
        }
        let mut dst = 0;
        for (o, &p) in perm.iter().enumerate() {
            dst += idx[p] * out_strides[o];
        }
        data[dst] = v;
    }
    (out_shape, data)
}
