//! The differentiation tape: forward ops append nodes, backward walks them in
//! reverse. Each backward call propagates into a fresh cotangent workspace and
//! then adds the result into the persistent per-node grads, so running
//! backward twice without zeroing doubles every grad exactly.

use std::rc::Rc;

use super::{Tensor, TensorError};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Gelu { x: Var },
    MaskFill { x: Var, mask: Rc<[bool]> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    CrossEntropy { logits: Var, targets: Rc<[usize]>, mask: Rc<[bool]> },
    GatherRows { table: Var, ids: Rc<[usize]> },
    Transpose { x: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Rc<[Var]> },
    ConcatCols { parts: Rc<[Var]> },
    Sum { x: Var },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records one forward pass; freed wholesale when dropped.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// out += a @ b, all row-major. The accumulate form lets backward reuse it
/// directly on gradient buffers.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(a, b, m, k, n, 1.0, out);
}

/// out = a @ b into a fresh buffer (beta 0 skips reading the destination).
pub(crate) fn matmul_new(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, b, m, k, n, 0.0, &mut out);
    out
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, beta: f64, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn transpose_copy(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Splits a shape into (outer, axis_len, inner) strides around `axis`.
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                op: "leaf",
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node invariant")
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: s.clone(),
            }),
        }
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out = matmul_new(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Add { a, b }))
    }

    /// x (m×n) + row (n,), broadcast over rows. Used for biases.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        let rs = &self.nodes[row.0].shape;
        if rs.len() != 1 || rs[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: rs.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            add_into(&mut data[i * n..(i + 1) * n], &self.nodes[row.0].data);
        }
        Ok(self.push(vec![m, n], data, Op::AddRow { x, row }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Scale { x, c })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, data, Op::Gelu { x })
    }

    /// Replaces elements where `mask` is true with `value`; gradients flow
    /// only through unmasked elements.
    pub fn mask_fill(&mut self, x: Var, mask: Rc<[bool]>, value: f64) -> Result<Var, TensorError> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(TensorError::BadLength {
                op: "mask_fill",
                len: mask.len(),
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, data, Op::MaskFill { x, mask }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_strides(&shape, axis);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[idx(j)]);
                }
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    data[idx(j)] /= denom;
                }
            }
        }
        Ok(self.push(shape, data, Op::Softmax { x, axis }))
    }

    /// Normalizes the last axis to zero mean and unit variance (eps inside the
    /// square root), then applies the affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or(TensorError::BadRank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            let s = &self.nodes[v.0].shape;
            if s.len() != 1 || s[0] != d {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: s.clone(),
                });
            }
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..src.len() / d {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            data,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    /// Mean negative log-softmax over the positions where `mask` is true.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (t, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::BadLength {
                op: "cross_entropy",
                len: targets.len().max(mask.len()),
                shape: vec![t, v],
            });
        }
        let counted = mask.iter().filter(|&&m| m).count();
        if counted == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: targets[i],
                    bound: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[targets[i]];
        }
        let loss = total / counted as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                mask: mask.into(),
            },
        ))
    }

    /// Row lookup into a rank-2 table; ids may repeat, backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: Rc<[usize]>) -> Result<Var, TensorError> {
        let (rows, cols) = self.matrix_dims(table, "gather_rows")?;
        for &id in ids.iter() {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids.iter() {
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(vec![ids.len(), cols], data, Op::GatherRows { table, ids }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "transpose")?;
        let data = transpose_copy(&self.nodes[x.0].data, m, n);
        Ok(self.push(vec![n, m], data, Op::Transpose { x }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "slice_rows")?;
        if start + len > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let data = self.nodes[x.0].data[start * n..(start + len) * n].to_vec();
        Ok(self.push(vec![len, n], data, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(vec![m, len], data, Op::SliceCols { x, start }))
    }

    /// Stacks rank-2 parts vertically; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let (_, n) = self.matrix_dims(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += pm;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            vec![rows, n],
            data,
            Op::ConcatRows {
                parts: parts.into(),
            },
        ))
    }

    /// Stacks rank-2 parts side by side; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let (m, _) = self.matrix_dims(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            cols += pn;
        }
        let mut data = Vec::with_capacity(m * cols);
        for i in 0..m {
            for &p in parts {
                let pn = self.nodes[p.0].shape[1];
                data.extend_from_slice(&self.nodes[p.0].data[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push(
            vec![m, cols],
            data,
            Op::ConcatCols {
                parts: parts.into(),
            },
        ))
    }

    /// Sum of all elements, as a scalar (shape `[1]`).
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) to every node reachable from `loss` and adds
    /// the result into each node's persistent grad.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let mut cot: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        cot[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = cot[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let bt = transpose_copy(&self.nodes[b.0].data, k, n);
                    let at = transpose_copy(&self.nodes[a.0].data, m, k);
                    matmul_acc(&g, &bt, m, n, k, Self::acc_buf(&mut cot, a, m * k));
                    matmul_acc(&at, &g, k, m, n, Self::acc_buf(&mut cot, b, k * n));
                }
                Op::Add { a, b } => {
                    add_into(Self::acc_buf(&mut cot, a, g.len()), &g);
                    add_into(Self::acc_buf(&mut cot, b, g.len()), &g);
                }
                Op::AddRow { x, row } => {
                    let n = self.nodes[row.0].shape[0];
                    add_into(Self::acc_buf(&mut cot, x, g.len()), &g);
                    let rg = Self::acc_buf(&mut cot, row, n);
                    for chunk in g.chunks_exact(n) {
                        add_into(rg, chunk);
                    }
                }
                Op::Mul { a, b } => {
                    let bd: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(g, v)| g * v).collect();
                    let ad: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(g, v)| g * v).collect();
                    add_into(Self::acc_buf(&mut cot, a, g.len()), &bd);
                    add_into(Self::acc_buf(&mut cot, b, g.len()), &ad);
                }
                Op::Scale { x, c } => {
                    let xa = Self::acc_buf(&mut cot, x, g.len());
                    for (d, gv) in xa.iter_mut().zip(&g) {
                        *d += gv * c;
                    }
                }
                Op::Gelu { x } => {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, &v)| g * gelu_bwd(v))
                        .collect();
                    add_into(Self::acc_buf(&mut cot, x, g.len()), &contrib);
                }
                Op::MaskFill { x, mask } => {
                    let xa = Self::acc_buf(&mut cot, x, g.len());
                    for ((d, gv), &m) in xa.iter_mut().zip(&g).zip(mask.iter()) {
                        if !m {
                            *d += gv;
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    // ds_j = s_j * (g_j - sum_k g_k s_k) along the axis
                    let shape = self.nodes[i].shape.clone();
                    let (outer, len, inner) = axis_strides(&shape, axis);
                    let s = &self.nodes[i].data;
                    let mut contrib = vec![0.0; s.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| o * len * inner + j * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[idx(j)] * s[idx(j)];
                            }
                            for j in 0..len {
                                contrib[idx(j)] = s[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                    add_into(Self::acc_buf(&mut cot, x, contrib.len()), &contrib);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = *self.nodes[i].shape.last().unwrap();
                    let src = &self.nodes[x.0].data;
                    let gv = &self.nodes[gain.0].data;
                    let rows = src.len() / d;
                    let mut dx = vec![0.0; src.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let row = &src[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(gv).map(|(g, gn)| g * gn).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                            dx[r * d + j] += inv / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    add_into(Self::acc_buf(&mut cot, x, dx.len()), &dx);
                    add_into(Self::acc_buf(&mut cot, gain, d), &dgain);
                    add_into(Self::acc_buf(&mut cot, bias, d), &dbias);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let (t, v) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                    let counted = mask.iter().filter(|&&m| m).count() as f64;
                    let src = &self.nodes[logits.0].data;
                    let scale = g[0] / counted;
                    let la = Self::acc_buf(&mut cot, logits, t * v);
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        let row = &src[i * v..(i + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..v {
                            let p = (row[j] - max).exp() / denom;
                            let y = if j == targets[i] { 1.0 } else { 0.0 };
                            la[i * v + j] += scale * (p - y);
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    let cols = self.nodes[table.0].shape[1];
                    let numel = self.nodes[table.0].data.len();
                    let ta = Self::acc_buf(&mut cot, table, numel);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut ta[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::Transpose { x } => {
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let gt = transpose_copy(&g, n, m);
                    add_into(Self::acc_buf(&mut cot, x, gt.len()), &gt);
                }
                Op::SliceRows { x, start } => {
                    let n = self.nodes[x.0].shape[1];
                    let numel = self.nodes[x.0].data.len();
                    let xa = Self::acc_buf(&mut cot, x, numel);
                    add_into(&mut xa[start * n..start * n + g.len()], &g);
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let len = self.nodes[i].shape[1];
                    let xa = Self::acc_buf(&mut cot, x, m * n);
                    for r in 0..m {
                        add_into(
                            &mut xa[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
                Op::ConcatRows { parts } => {
                    let n = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let pm = self.nodes[p.0].shape[0];
                        let pa = Self::acc_buf(&mut cot, p, pm * n);
                        add_into(pa, &g[offset * n..(offset + pm) * n]);
                        offset += pm;
                    }
                }
                Op::ConcatCols { parts } => {
                    let (m, total) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let pn = self.nodes[p.0].shape[1];
                        let pa = Self::acc_buf(&mut cot, p, m * pn);
                        for r in 0..m {
                            add_into(
                                &mut pa[r * pn..(r + 1) * pn],
                                &g[r * total + offset..r * total + offset + pn],
                            );
                        }
                        offset += pn;
                    }
                }
                Op::Sum { x } => {
                    let numel = self.nodes[x.0].data.len();
                    let xa = Self::acc_buf(&mut cot, x, numel);
                    for d in xa.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(pg) => add_into(pg, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn acc_buf<'a>(cot: &'a mut [Option<Vec<f64>>], v: Var, numel: usize) -> &'a mut Vec<f64> {
        cot[v.0].get_or_insert_with(|| vec![0.0; numel])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.leaf_owned(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = t.leaf_owned(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_expanded() {
        let mut t = Tape::new();
        let a = t.leaf_owned(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.leaf_owned(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[17.0, 39.0]);
        assert_eq!(t.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_zero_case() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::zeros(vec![2, 3]));
        let b = t
            .leaf_owned(vec![3, 4], (0..12).map(|i| i as f64).collect())
            .unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 4]);
        assert!(t.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::zeros(vec![2, 3]));
        let b = t.leaf(&Tensor::zeros(vec![4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_identities() {
        let mut t = Tape::new();
        let x = t.leaf_owned(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let z = t.leaf(&Tensor::zeros(vec![3]));
        let y = t.add(x, z).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let a = t.leaf_owned(vec![2], vec![2.0, 3.0]).unwrap();
        let b = t.leaf_owned(vec![2], vec![4.0, 5.0]).unwrap();
        let p = t.mul(a, b).unwrap();
        assert_eq!(t.value(p), &[8.0, 15.0]);

        let zero = t.leaf_owned(vec![1], vec![0.0]).unwrap();
        let g = t.gelu(zero);
        assert_eq!(t.value(g), &[0.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = Tape::new();
        let x = t.leaf_owned(vec![2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);

        let big = t.leaf_owned(vec![2], vec![1000.0, 1000.0]).unwrap();
        let s = t.softmax(big, 0).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);

        let x = t.leaf_owned(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert!(close(t.value(s), &[0.25, 0.75], 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let xs: Vec<f64> = (0..12).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let mut t = Tape::new();
        let x = t.leaf_owned(vec![3, 4], xs.clone()).unwrap();
        let s = t.softmax(x, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = t.value(s)[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let shifted: Vec<f64> = xs.iter().map(|v| v + 123.456).collect();
        let x2 = t.leaf_owned(vec![3, 4], shifted).unwrap();
        let s2 = t.softmax(x2, 1).unwrap();
        let (a, b) = (t.value(s).to_vec(), t.value(s2).to_vec());
        assert!(close(&a, &b, 1e-9));
    }

    #[test]
    fn layer_norm_fixtures() {
        let mut t = Tape::new();
        let gain = t.leaf_owned(vec![3], vec![1.0; 3]).unwrap();
        let bias = t.leaf_owned(vec![3], vec![0.0; 3]).unwrap();

        // constant row: zero variance damped by eps
        let x = t.leaf_owned(vec![1, 3], vec![5.0; 3]).unwrap();
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(t.value(y).iter().all(|v| v.abs() < 1e-9));

        // already standardized row passes through as eps -> 0
        let g2 = t.leaf_owned(vec![2], vec![1.0; 2]).unwrap();
        let b2 = t.leaf_owned(vec![2], vec![0.0; 2]).unwrap();
        let x = t.leaf_owned(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = t.layer_norm(x, g2, b2, 1e-12).unwrap();
        assert!(close(t.value(y), &[1.0, -1.0], 1e-6));

        // gain 0 collapses to the bias
        let g0 = t.leaf_owned(vec![3], vec![0.0; 3]).unwrap();
        let bb = t.leaf_owned(vec![3], vec![7.5; 3]).unwrap();
        let x = t.leaf_owned(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let y = t.layer_norm(x, g0, bb, 1e-5).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 7.5));
    }

    #[test]
    fn cross_entropy_fixtures() {
        let mut t = Tape::new();
        let uniform = t.leaf(&Tensor::zeros(vec![2, 4]));
        let l = t.cross_entropy(uniform, &[3, 0], &[true, true]).unwrap();
        assert!((t.value(l)[0] - 4.0f64.ln()).abs() < 1e-12);

        let mut data = vec![0.0; 4];
        data[2] = 20.0;
        let hot = t.leaf_owned(vec![1, 4], data).unwrap();
        let l = t.cross_entropy(hot, &[2], &[true]).unwrap();
        assert!(t.value(l)[0] < 1e-6);

        let x = t.leaf_owned(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let l = t.cross_entropy(x, &[0], &[true]).unwrap();
        assert!((t.value(l)[0] - 0.25f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_error_paths() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(vec![2, 4]));
        assert_eq!(
            t.cross_entropy(x, &[0, 0], &[false, false]).unwrap_err(),
            TensorError::DegenerateBatch
        );
        let err = t.cross_entropy(x, &[0, 4], &[true, true]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { index: 4, .. }));
        // out-of-range target on an excluded position is never touched
        assert!(t.cross_entropy(x, &[0, 99], &[true, false]).is_ok());
    }

    #[test]
    fn backward_linear_functional_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf_owned(vec![2, 3], vec![0.3; 6]).unwrap();
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_hand_derivative() {
        let mut t = Tape::new();
        let x = t.leaf_owned(vec![2], vec![1.0, 2.0]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            t.backward(x).unwrap_err(),
            TensorError::NonScalarLoss { .. }
        ));
    }

    #[test]
    fn backward_twice_doubles_every_grad() {
        let mut t = Tape::new();
        let x = t.leaf_owned(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let y = t.gelu(x);
        let w = t.leaf_owned(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        let once: Vec<f64> = t.grad(x).unwrap().to_vec();
        let once_mid: Vec<f64> = t.grad(y).unwrap().to_vec();
        t.backward(s).unwrap();
        let twice: Vec<f64> = t.grad(x).unwrap().to_vec();
        let twice_mid: Vec<f64> = t.grad(y).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in once_mid.iter().zip(&twice_mid) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn ops_are_bit_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t
                .leaf_owned(vec![4, 4], (0..16).map(|i| (i as f64).sin()).collect())
                .unwrap();
            let w = t
                .leaf_owned(vec![4, 4], (0..16).map(|i| (i as f64).cos()).collect())
                .unwrap();
            let h = t.matmul(x, w).unwrap();
            let g = t.gelu(h);
            let s = t.softmax(g, 1).unwrap();
            t.value(s).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_transpose_slice_concat_roundtrip() {
        let mut t = Tape::new();
        let table = t
            .leaf_owned(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let g = t.gather_rows(table, vec![2, 0, 2].into()).unwrap();
        assert_eq!(t.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);

        let tr = t.transpose(g).unwrap();
        assert_eq!(t.shape(tr), &[2, 3]);
        assert_eq!(t.value(tr), &[5.0, 1.0, 5.0, 6.0, 2.0, 6.0]);

        let left = t.slice_cols(g, 0, 1).unwrap();
        let right = t.slice_cols(g, 1, 1).unwrap();
        let back = t.concat_cols(&[left, right]).unwrap();
        assert_eq!(t.value(back), t.value(g));

        let top = t.slice_rows(g, 0, 1).unwrap();
        let bottom = t.slice_rows(g, 1, 2).unwrap();
        let back = t.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(t.value(back), t.value(g));
    }

    #[test]
    fn mask_fill_blocks_values_and_grads() {
        let mut t = Tape::new();
        let x = t.leaf_owned(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask: Rc<[bool]> = vec![false, true, false, true].into();
        let y = t.mask_fill(x, mask, -1e30).unwrap();
        assert_eq!(t.value(y)[1], -1e30);
        assert_eq!(t.value(y)[0], 1.0);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
