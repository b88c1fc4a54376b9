//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! The forward pass records every primitive into a [`Tape`]; [`Tape::backward`]
//! replays the tape in reverse, populating gradients for exactly the nodes
//! that are reachable from the loss and marked as needing gradients. Leaves
//! read from a [`ParamStore`] remember their origin so gradients can be
//! written back into the persistent tensors after the sweep.
//!
//! One tape per optimization step; drop it afterwards.

use super::tensor::{ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddRowBroadcast { x: Var, bias: Var },
    Gelu { x: Var },
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    SumAll { x: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    EmbedRows { table: Var, ids: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of primitive operations with their inputs and outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("tape ops are defined on 1-D and 2-D tensors, got {shape:?}"),
    }
}

// a[m x inner] * b[inner x n] -> [m x n]
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, inner: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..inner {
            let av = a[i * inner + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

// a[m x inner] * b[n x inner]^T -> [m x n]
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * inner..(i + 1) * inner];
        for j in 0..n {
            let brow = &b[j * inner..(j + 1) * inner];
            let mut s = 0.0;
            for t in 0..inner {
                s += arow[t] * brow[t];
            }
            out[i * n + j] = s;
        }
    }
    out
}

// a[inner x m]^T * b[inner x n] -> [m x n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for t in 0..inner {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

const GELU_SCALE: f64 = 0.797884560802865; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn softmax_rows_val(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    /// Gradient of a node after [`Tape::backward`]; `None` when the node is
    /// frozen or unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Record a value that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Record a leaf whose gradient participation follows the tensor's flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Read a parameter out of the store; its tape gradient flows back into
    /// the store on [`Tape::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = as_2d(self.shape(a));
        let (kb, n) = as_2d(self.shape(b));
        if ka != kb {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = mm(self.data(a), self.data(b), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::MatMul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = as_2d(self.shape(x));
        let xd = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let needs = self.needs(x);
        self.push(vec![n, m], data, Op::Transpose { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, c }, needs)
    }

    /// `x[m x n] + bias[n]`, broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = as_2d(self.shape(x));
        let (brows, bn) = as_2d(self.shape(bias));
        if bn != n || brows != 1 {
            return Err(TensorError::DimMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bd = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            Op::AddRowBroadcast { x, bias },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_val(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu { x }, needs)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let (m, n) = as_2d(self.shape(x));
        let data = softmax_rows_val(self.data(x), m, n);
        let needs = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, Op::SoftmaxRows { x }, needs))
    }

    /// Normalize each row of `x[m x d]` to mean 0 / variance 1, then apply
    /// the affine `gain`/`bias` over the last axis.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        assert!(eps > 0.0, "layer_norm needs eps > 0");
        let (m, d) = as_2d(self.shape(x));
        let (_, dg) = as_2d(self.shape(gain));
        let (_, db) = as_2d(self.shape(bias));
        if dg != d || db != d {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits[len x vocab]`,
    /// restricted to positions where `mask` is true.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (len, vocab) = as_2d(self.shape(logits));
        assert_eq!(targets.len(), len, "one target per logit row");
        assert_eq!(mask.len(), len, "one mask bit per logit row");
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t >= vocab {
                return Err(TensorError::TargetOutOfRange { id: t, vocab });
            }
        }
        let xd = self.data(logits);
        let mut total = 0.0;
        for i in 0..len {
            if !mask[i] {
                continue;
            }
            let row = &xd[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[targets[i]];
        }
        let loss = total / count as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::SumAll { x }, needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = as_2d(self.shape(x));
        if start + len > m {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                extent: m,
            });
        }
        let data = self.data(x)[start * n..(start + len) * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![len, n], data, Op::SliceRows { x, start }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, n) = as_2d(self.shape(parts[0]));
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (pm, pn) = as_2d(self.shape(p));
            if pn != n {
                return Err(TensorError::DimMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pm;
            data.extend_from_slice(self.data(p));
            needs |= self.needs(p);
        }
        Ok(self.push(
            vec![rows, n],
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = as_2d(self.shape(x));
        if start + len > n {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                extent: n,
            });
        }
        let xd = self.data(x);
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![m, len], data, Op::SliceCols { x, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (m, _) = as_2d(self.shape(parts[0]));
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut needs = false;
        for &p in parts {
            let (pm, pn) = as_2d(self.shape(p));
            if pm != m {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
            total += pn;
            needs |= self.needs(p);
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            vec![m, total],
            data,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Gather rows of `table[vocab x d]` at `ids`; gradients scatter-add back.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (vocab, d) = as_2d(self.shape(table));
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::TargetOutOfRange { id, vocab });
            }
        }
        let td = self.data(table);
        let mut data = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Replay the tape backward from a scalar loss, populating gradients for
    /// every reachable node that needs them. Frozen leaves stay untouched.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(out_grad) = self.grads[idx].clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = as_2d(&self.nodes[a.0].shape);
                    let (_, n) = as_2d(&self.nodes[b.0].shape);
                    if self.needs(a) {
                        let da = mm_nt(&out_grad, &self.nodes[b.0].data, m, k, n);
                        self.accumulate(a, &da);
                    }
                    if self.needs(b) {
                        let db = mm_tn(&self.nodes[a.0].data, &out_grad, k, n, m);
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose { x } => {
                    let (m, n) = as_2d(&self.nodes[x.0].shape);
                    let mut dx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = out_grad[i * m + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &out_grad);
                    self.accumulate(b, &out_grad);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = out_grad.iter().map(|g| g * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::AddRowBroadcast { x, bias } => {
                    let (m, n) = as_2d(&self.nodes[x.0].shape);
                    self.accumulate(x, &out_grad);
                    if self.needs(bias) {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += out_grad[i * n + j];
                            }
                        }
                        self.accumulate(bias, &db);
                    }
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(&out_grad)
                        .map(|(&v, g)| g * gelu_grad(v))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxRows { x } => {
                    let (m, n) = as_2d(&self.nodes[x.0].shape);
                    let y = &self.nodes[idx].data;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &out_grad[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, d) = as_2d(&self.nodes[x.0].shape);
                    let xd = &self.nodes[x.0].data;
                    let g = &self.nodes[gain.0].data;
                    let mut dx = vec![0.0; m * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..m {
                        let row = &xd[i * d..(i + 1) * d];
                        let gr = &out_grad[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        // normalized row and the two reduction terms
                        let mut sum_gd = 0.0;
                        let mut sum_gdx = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let gd = g[j] * gr[j];
                            sum_gd += gd;
                            sum_gdx += gd * xhat;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                        }
                        let mg = sum_gd / d as f64;
                        let mgx = sum_gdx / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            dx[i * d + j] = (g[j] * gr[j] - mg - xhat * mgx) * inv_std;
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let (len, vocab) = as_2d(&self.nodes[logits.0].shape);
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let upstream = out_grad[0] / count;
                    let xd = &self.nodes[logits.0].data;
                    let mut dl = vec![0.0; len * vocab];
                    for i in 0..len {
                        if !mask[i] {
                            continue;
                        }
                        let row = &xd[i * vocab..(i + 1) * vocab];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / sum;
                            let hit = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * vocab + j] = (p - hit) * upstream;
                        }
                    }
                    self.accumulate(logits, &dl);
                }
                Op::SumAll { x } => {
                    let dx = vec![out_grad[0]; self.nodes[x.0].data.len()];
                    self.accumulate(x, &dx);
                }
                Op::SliceRows { x, start } => {
                    let (_, n) = as_2d(&self.nodes[x.0].shape);
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[start * n..start * n + out_grad.len()].copy_from_slice(&out_grad);
                    self.accumulate(x, &dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        let slice = out_grad[offset..offset + len].to_vec();
                        self.accumulate(p, &slice);
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = as_2d(&self.nodes[x.0].shape);
                    let w = out_grad.len() / m;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + w]
                            .copy_from_slice(&out_grad[i * w..(i + 1) * w]);
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols { parts } => {
                    let (m, total) = as_2d(&self.nodes[idx].shape);
                    let mut offset = 0;
                    for p in parts {
                        let (_, w) = as_2d(&self.nodes[p.0].shape);
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w].copy_from_slice(
                                &out_grad[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }
                Op::EmbedRows { table, ids } => {
                    if self.needs(table) {
                        let (_, d) = as_2d(&self.nodes[table.0].shape);
                        let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += out_grad[i * d + j];
                            }
                        }
                        self.accumulate(table, &dt);
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy leaf gradients back into the persistent parameters they were
    /// read from. Frozen parameters are skipped by construction.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad.as_ref()) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    /// `backward` followed by `write_param_grads`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        self.backward(loss)?;
        self.write_param_grads(store);
        Ok(())
    }
}
