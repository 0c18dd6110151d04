//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`] (the computation record). The tape
//! owns every intermediate value; ops return [`NodeId`] handles. Calling
//! [`Tape::backward`] on a scalar loss walks the record in reverse and
//! accumulates gradients for every node reachable from the loss.
//!
//! Scope is exactly what a small encoder-decoder transformer needs: 2-D
//! matmul, row-broadcast bias, softmax family, layer norm, GELU, embedding
//! lookup, cross-entropy, and the handful of elementwise ops used by the
//! PPO surrogate. No general broadcasting.
//!
//! Gradients accumulate additively. A second `backward` call on the same
//! tape adds another pass worth of gradient; callers that want fresh
//! gradients build a fresh tape (the training loops do).

use thiserror::Error;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("axis {axis} invalid or empty for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: id {id} out of range 0..{limit} at position {pos}")]
    IdOutOfRange {
        op: &'static str,
        id: u32,
        limit: usize,
        pos: usize,
    },
    #[error("cross_entropy: every target equals the ignore id")]
    AllTargetsIgnored,
    #[error("column range {start}..{end} out of bounds for {cols} columns")]
    ColumnsOutOfBounds {
        start: usize,
        end: usize,
        cols: usize,
    },
}

/// A plain tensor value: row-major f64 data plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        x: NodeId,
        row: NodeId,
        cols: usize,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(NodeId, usize)>,
        rows: usize,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LogSoftmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cols: usize,
    },
    Gelu {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Minimum {
        a: NodeId,
        b: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    GatherRows {
        x: NodeId,
        ids: Vec<u32>,
        cols: usize,
    },
    EmbeddingLookup {
        table: NodeId,
        ids: Vec<u32>,
        dim: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        ignore: Option<u32>,
        n_eff: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// The computation record: ops in topological order, inputs before outputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `a[m×k] @ b[k×n]`, row-major, ikj loop order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Lane decomposition of `shape` along `axis`: (outer, len, inner).
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> NodeId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { data, shape, op });
        self.grads.push(None);
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
        }
    }

    /// Gradient of `id`, if it was reached by a `backward` pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> NodeId {
        self.push(t.data, t.shape, Op::Leaf)
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = &self.node(id).shape;
        if s.len() != 2 {
            return Err(TensorError::NotAMatrix {
                op,
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data = matmul_raw(&self.node(a).data, &self.node(b).data, m, k, n);
        Ok(self.push(data, vec![m, n], Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.matrix_dims(x, "transpose")?;
        let src = &self.node(x).data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        Ok(self.push(out, vec![cols, rows], Op::Transpose { x, rows, cols }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<(), TensorError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(data, shape, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(data, shape, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(data, shape, Op::Mul { a, b }))
    }

    /// `[rows×cols] + [cols]`, row bias broadcast.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.matrix_dims(x, "add_row")?;
        let rshape = &self.node(row).shape;
        if rshape.len() != 1 || rshape[0] != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.node(x).shape.clone(),
                rhs: rshape.clone(),
            });
        }
        let rdata = self.node(row).data.clone();
        let mut data = self.node(x).data.clone();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] += rdata[j];
            }
        }
        let shape = self.node(x).shape.clone();
        Ok(self.push(data, shape, Op::AddRow { x, row, cols }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|v| v * c).collect();
        let shape = self.node(x).shape.clone();
        self.push(data, shape, Op::Scale { x, c })
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if start + len > cols {
            return Err(TensorError::ColumnsOutOfBounds {
                start,
                end: start + len,
                cols,
            });
        }
        let src = &self.node(x).data;
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        Ok(self.push(
            out,
            vec![rows, len],
            Op::SliceCols {
                x,
                start,
                len,
                cols,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (rows, _) = self.matrix_dims(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|&(_, c)| c).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &(p, c) in &widths {
                let src = &self.node(p).data;
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            out,
            vec![rows, total],
            Op::ConcatCols {
                parts: widths,
                rows,
            },
        ))
    }

    fn check_axis(&self, x: NodeId, axis: usize) -> Result<(), TensorError> {
        let shape = &self.node(x).shape;
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(TensorError::BadAxis {
                axis,
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(x, axis)?;
        let shape = self.node(x).shape.clone();
        let data = softmax_raw(&self.node(x).data, &shape, axis);
        Ok(self.push(data, shape, Op::Softmax { x, axis }))
    }

    /// `log(softmax(x))` computed directly as `x - max - log(sum(exp(x - max)))`.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.check_axis(x, axis)?;
        let shape = self.node(x).shape.clone();
        let data = log_softmax_raw(&self.node(x).data, &shape, axis);
        Ok(self.push(data, shape, Op::LogSoftmax { x, axis }))
    }

    /// Layer norm over the last axis with gain and bias vectors.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.matrix_dims(x, "layer_norm")?;
        for (v, op) in [(gain, "layer_norm gain"), (bias, "layer_norm bias")] {
            let s = &self.node(v).shape;
            if s.len() != 1 || s[0] != cols {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: self.node(x).shape.clone(),
                    rhs: s.clone(),
                });
            }
        }
        let xd = &self.node(x).data;
        let g = &self.node(gain).data;
        let b = &self.node(bias).data;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..cols {
                out[i * cols + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        Ok(self.push(
            out,
            vec![rows, cols],
            Op::LayerNorm { x, gain, bias, cols },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.node(x).shape.clone();
        self.push(data, shape, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|v| v.exp()).collect();
        let shape = self.node(x).shape.clone();
        self.push(data, shape, Op::Exp { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let data: Vec<f64> = self.node(x).data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.node(x).shape.clone();
        self.push(data, shape, Op::Clamp { x, lo, hi })
    }

    /// Elementwise minimum; gradient follows the smaller side (ties go left).
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.same_shape(a, b, "minimum")?;
        let data: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x.min(*y))
            .collect();
        let shape = self.node(a).shape.clone();
        Ok(self.push(data, shape, Op::Minimum { a, b }))
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let d = &self.node(x).data;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![m], vec![1], Op::MeanAll { x })
    }

    /// Pick `x[t, ids[t]]` for each row t, yielding a vector of length T.
    pub fn gather_rows(&mut self, x: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let (rows, cols) = self.matrix_dims(x, "gather_rows")?;
        if ids.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: vec![rows, cols],
                rhs: vec![ids.len()],
            });
        }
        let src = &self.node(x).data;
        let mut out = Vec::with_capacity(rows);
        for (t, &id) in ids.iter().enumerate() {
            if id as usize >= cols {
                return Err(TensorError::IdOutOfRange {
                    op: "gather_rows",
                    id,
                    limit: cols,
                    pos: t,
                });
            }
            out.push(src[t * cols + id as usize]);
        }
        Ok(self.push(
            out,
            vec![rows],
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
                cols,
            },
        ))
    }

    /// Row lookup: `table[V×D]` indexed by `ids` gives `[len(ids)×D]`.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, TensorError> {
        let (vocab, dim) = self.matrix_dims(table, "embedding_lookup")?;
        let src = &self.node(table).data;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for (t, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(TensorError::IdOutOfRange {
                    op: "embedding_lookup",
                    id,
                    limit: vocab,
                    pos: t,
                });
            }
            out.extend_from_slice(&src[id as usize * dim..(id as usize + 1) * dim]);
        }
        Ok(self.push(
            out,
            vec![ids.len(), dim],
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
                dim,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits[T×V]`,
    /// skipping positions whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        ignore: Option<u32>,
    ) -> Result<NodeId, TensorError> {
        let (rows, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        let mut n_eff = 0usize;
        for (t, &id) in targets.iter().enumerate() {
            if Some(id) == ignore {
                continue;
            }
            if id as usize >= vocab {
                return Err(TensorError::IdOutOfRange {
                    op: "cross_entropy",
                    id,
                    limit: vocab,
                    pos: t,
                });
            }
            n_eff += 1;
        }
        if n_eff == 0 {
            return Err(TensorError::AllTargetsIgnored);
        }
        let shape = vec![rows, vocab];
        let logsm = log_softmax_raw(&self.node(logits).data, &shape, 1);
        let mut loss = 0.0;
        for (t, &id) in targets.iter().enumerate() {
            if Some(id) == ignore {
                continue;
            }
            loss -= logsm[t * vocab + id as usize];
        }
        loss /= n_eff as f64;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                n_eff,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls; non-leaf gradients are reset so each pass propagates exactly
    /// once. Query results with [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let loss_node = self.node(loss);
        if loss_node.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }
        for i in 0..self.grads.len() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        grad_slot(&mut self.grads, loss.0, 1)[0] += 1.0;

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Clone the op descriptor so `self.nodes` stays readable while we
        // write `self.grads` slots of earlier nodes.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                {
                    let bdata = &self.nodes[b.0].data;
                    let slot = grad_slot(&mut self.grads, a.0, m * k);
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            let grow = &g[r * n..(r + 1) * n];
                            let brow = &bdata[p * n..(p + 1) * n];
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            slot[r * k + p] += s;
                        }
                    }
                }
                {
                    let adata = &self.nodes[a.0].data;
                    let slot = grad_slot(&mut self.grads, b.0, k * n);
                    // dB[p,j] += sum_i A[i,p] * g[i,j]
                    for r in 0..m {
                        let av = &adata[r * k..(r + 1) * k];
                        let grow = &g[r * n..(r + 1) * n];
                        for (p, &ap) in av.iter().enumerate() {
                            let brow = &mut slot[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += ap * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                let slot = grad_slot(&mut self.grads, x.0, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        slot[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            Op::Add { a, b } => {
                let n = g.len();
                {
                    let slot = grad_slot(&mut self.grads, a.0, n);
                    for (s, gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                let slot = grad_slot(&mut self.grads, b.0, n);
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s += gv;
                }
            }
            Op::Sub { a, b } => {
                let n = g.len();
                {
                    let slot = grad_slot(&mut self.grads, a.0, n);
                    for (s, gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                let slot = grad_slot(&mut self.grads, b.0, n);
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s -= gv;
                }
            }
            Op::Mul { a, b } => {
                let n = g.len();
                {
                    let bdata = self.nodes[b.0].data.clone();
                    let slot = grad_slot(&mut self.grads, a.0, n);
                    for j in 0..n {
                        slot[j] += g[j] * bdata[j];
                    }
                }
                let adata = self.nodes[a.0].data.clone();
                let slot = grad_slot(&mut self.grads, b.0, n);
                for j in 0..n {
                    slot[j] += g[j] * adata[j];
                }
            }
            Op::AddRow { x, row, cols } => {
                let n = g.len();
                let rows = n / cols;
                {
                    let slot = grad_slot(&mut self.grads, x.0, n);
                    for (s, gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                let slot = grad_slot(&mut self.grads, row.0, cols);
                for r in 0..rows {
                    for j in 0..cols {
                        slot[j] += g[r * cols + j];
                    }
                }
            }
            Op::Scale { x, c } => {
                let slot = grad_slot(&mut self.grads, x.0, g.len());
                for (s, gv) in slot.iter_mut().zip(g) {
                    *s += gv * c;
                }
            }
            Op::SliceCols {
                x,
                start,
                len,
                cols,
            } => {
                let rows = g.len() / len;
                let slot = grad_slot(&mut self.grads, x.0, rows * cols);
                for r in 0..rows {
                    for j in 0..len {
                        slot[r * cols + start + j] += g[r * len + j];
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for (p, c) in parts {
                    let slot = grad_slot(&mut self.grads, p.0, rows * c);
                    for r in 0..rows {
                        for j in 0..c {
                            slot[r * c + j] += g[r * total + offset + j];
                        }
                    }
                    offset += c;
                }
            }
            Op::Softmax { x, axis } => {
                let shape = self.nodes[i].shape.clone();
                let s = self.nodes[i].data.clone();
                let (outer, len, inner) = lanes(&shape, axis);
                let slot = grad_slot(&mut self.grads, x.0, s.len());
                for o in 0..outer {
                    for inr in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + inr;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += g[at(j)] * s[at(j)];
                        }
                        for j in 0..len {
                            slot[at(j)] += s[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let shape = self.nodes[i].shape.clone();
                let y = self.nodes[i].data.clone(); // log-probs
                let (outer, len, inner) = lanes(&shape, axis);
                let slot = grad_slot(&mut self.grads, x.0, y.len());
                for o in 0..outer {
                    for inr in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + inr;
                        let mut gsum = 0.0;
                        for j in 0..len {
                            gsum += g[at(j)];
                        }
                        for j in 0..len {
                            slot[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, cols } => {
                let xd = self.nodes[x.0].data.clone();
                let gd = self.nodes[gain.0].data.clone();
                let rows = xd.len() / cols;
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv_std
                    let mut sum_gg = 0.0; // sum of g*gain
                    let mut sum_ggx = 0.0; // sum of g*gain*xhat
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        let gg = grow[j] * gd[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    let n = cols as f64;
                    for j in 0..cols {
                        let xhat = (row[j] - mean) * inv_std;
                        let gg = grow[j] * gd[j];
                        dx[r * cols + j] += inv_std * (gg - sum_gg / n - xhat * sum_ggx / n);
                    }
                }
                {
                    let slot = grad_slot(&mut self.grads, x.0, xd.len());
                    for (s, v) in slot.iter_mut().zip(&dx) {
                        *s += v;
                    }
                }
                {
                    let slot = grad_slot(&mut self.grads, gain.0, cols);
                    for (s, v) in slot.iter_mut().zip(&dgain) {
                        *s += v;
                    }
                }
                let slot = grad_slot(&mut self.grads, bias.0, cols);
                for (s, v) in slot.iter_mut().zip(&dbias) {
                    *s += v;
                }
            }
            Op::Gelu { x } => {
                let xd = self.nodes[x.0].data.clone();
                let slot = grad_slot(&mut self.grads, x.0, xd.len());
                for j in 0..xd.len() {
                    slot[j] += g[j] * gelu_grad_scalar(xd[j]);
                }
            }
            Op::Exp { x } => {
                let out = self.nodes[i].data.clone();
                let slot = grad_slot(&mut self.grads, x.0, out.len());
                for j in 0..out.len() {
                    slot[j] += g[j] * out[j];
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.nodes[x.0].data.clone();
                let slot = grad_slot(&mut self.grads, x.0, xd.len());
                for j in 0..xd.len() {
                    if xd[j] > lo && xd[j] < hi {
                        slot[j] += g[j];
                    }
                }
            }
            Op::Minimum { a, b } => {
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                {
                    let slot = grad_slot(&mut self.grads, a.0, ad.len());
                    for j in 0..ad.len() {
                        if ad[j] <= bd[j] {
                            slot[j] += g[j];
                        }
                    }
                }
                let slot = grad_slot(&mut self.grads, b.0, bd.len());
                for j in 0..bd.len() {
                    if ad[j] > bd[j] {
                        slot[j] += g[j];
                    }
                }
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].data.len();
                let gv = g[0] / n as f64;
                let slot = grad_slot(&mut self.grads, x.0, n);
                for s in slot.iter_mut() {
                    *s += gv;
                }
            }
            Op::GatherRows { x, ids, cols } => {
                let slot = grad_slot(&mut self.grads, x.0, ids.len() * cols);
                for (t, &id) in ids.iter().enumerate() {
                    slot[t * cols + id as usize] += g[t];
                }
            }
            Op::EmbeddingLookup { table, ids, dim } => {
                let vocab_rows = self.nodes[table.0].data.len() / dim;
                let slot = grad_slot(&mut self.grads, table.0, vocab_rows * dim);
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut slot[id as usize * dim..(id as usize + 1) * dim];
                    let src = &g[t * dim..(t + 1) * dim];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                n_eff,
            } => {
                let shape = self.nodes[logits.0].shape.clone();
                let vocab = shape[1];
                let probs = softmax_raw(&self.nodes[logits.0].data, &shape, 1);
                let slot = grad_slot(&mut self.grads, logits.0, probs.len());
                let scale = g[0] / n_eff as f64;
                for (t, &id) in targets.iter().enumerate() {
                    if Some(id) == ignore {
                        continue;
                    }
                    for v in 0..vocab {
                        let indicator = if v == id as usize { 1.0 } else { 0.0 };
                        slot[t * vocab + v] += scale * (probs[t * vocab + v] - indicator);
                    }
                }
            }
        }
    }
}

/// Stable softmax over `axis`, max subtraction per lane.
pub fn softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for inr in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + inr;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

/// Stable log-softmax over `axis`.
pub fn log_softmax_raw(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for inr in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + inr;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                sum += (data[at(j)] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..len {
                out[at(j)] = data[at(j)] - lse;
            }
        }
    }
    out
}
