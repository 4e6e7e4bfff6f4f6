//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Graphs
//! are built per forward pass and dropped afterwards.
//!
//! Reductions always run in row-major sequential order so that repeated
//! forwards over identical inputs are bitwise identical.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{lanes, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Elementwise(Var, Var, BinaryKind),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Softmax(Var, usize),
    Gelu(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding(Var, Vec<usize>),
    MeanPool(Var, usize),
    Cosine {
        u: Var,
        v: Var,
        norm_u: f64,
        norm_v: f64,
    },
    Sum(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that receives a gradient on backward.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn checked(&self, context: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context, index });
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = self.checked("matmul", vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "elementwise",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let value = self.checked("elementwise", va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Elementwise(a, b, kind), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let value = self.checked("scale", va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Scale(a, s), value, rg))
    }

    /// Multiplies by a scalar graph node, so the scale factor itself can be
    /// differentiated.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let factor = self
            .value(s)
            .item()
            .ok_or_else(|| shape_err("scale_by", "scale factor must be a single value"))?;
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = self.checked("scale_by", va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, s]);
        Ok(self.push(Op::ScaleBy(a, s), value, rg))
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let vb = self.value(bias);
        if vb.len() != n || vb.rank() != 1 {
            return Err(shape_err(
                "add_row",
                format!("[{m}x{n}] + {:?}", vb.shape()),
            ));
        }
        let (va, vb) = (self.value(a).data(), vb.data());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(va[r * n..(r + 1) * n].iter().zip(vb).map(|(x, b)| x + b));
        }
        let value = self.checked("add_row", vec![m, n], out)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Op::AddRow(a, bias), value, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("softmax", va, axis)?;
        let (outer, extent, inner) = lanes(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * extent * inner + j * inner + i;
                let max = (0..extent)
                    .map(|j| x[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..extent {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    out[at(j)] /= total;
                }
            }
        }
        let value = self.checked("softmax", va.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax(a, axis), value, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let value = self.checked("gelu", va.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Gelu(a), value, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let va = self.value(a);
        let n = *va
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [n] || b.shape() != [n] {
            return Err(shape_err(
                "layer_norm",
                format!("width {n}, gain {:?}, bias {:?}", g.shape(), b.shape()),
            ));
        }
        let x = va.data();
        let rows = x.len() / n.max(1);
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let xh = (row[c] - mean) * is;
                normalized[r * n + c] = xh;
                out[r * n + c] = xh * g.data()[c] + b.data()[c];
            }
        }
        let value = self.checked("layer_norm", va.shape().to_vec(), out)?;
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
            value,
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    context: "embedding_lookup",
                    index: id,
                    limit: rows,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), cols], out);
        let rg = self.rg(&[table]);
        Ok(self.push(Op::Embedding(table, ids.to_vec()), value, rg))
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        check_axis("mean_pool", va, axis)?;
        let (outer, extent, inner) = lanes(va.shape(), axis);
        let x = va.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for j in 0..extent {
                    s += x[o * extent * inner + j * inner + i];
                }
                out[o * inner + i] = s / extent as f64;
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MeanPool(a, axis), value, rg))
    }

    /// Cosine similarity of two equally-sized tensors, as a scalar node.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (vu, vv) = (self.value(u), self.value(v));
        if vu.len() != vv.len() {
            return Err(shape_err(
                "cosine_similarity",
                format!("{:?} vs {:?}", vu.shape(), vv.shape()),
            ));
        }
        let (norm_u, norm_v) = (vu.norm(), vv.norm());
        if norm_u == 0.0 || norm_v == 0.0 {
            return Err(Error::Degenerate(
                "cosine similarity of a zero-norm vector".into(),
            ));
        }
        let dot: f64 = vu.data().iter().zip(vv.data()).map(|(a, b)| a * b).sum();
        let c = (dot / (norm_u * norm_v)).clamp(-1.0, 1.0);
        let rg = self.rg(&[u, v]);
        Ok(self.push(
            Op::Cosine {
                u,
                v,
                norm_u,
                norm_v,
            },
            Tensor::from_parts(vec![], vec![c]),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let value = self.checked("sum", vec![], vec![s])?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Sum(a), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = x[r * n + c];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), Tensor::from_parts(vec![n, m], out), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + width > n {
            return Err(Error::OutOfRange {
                context: "slice_cols",
                index: start + width,
                limit: n,
            });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::SliceCols(a, start),
            Tensor::from_parts(vec![m, width], out),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::Empty("concat_cols needs at least one part"))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(shape_err("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::from_parts(vec![m, total], out),
            rg,
        ))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn select_row(&mut self, a: Var, index: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if index >= m {
            return Err(Error::OutOfRange {
                context: "select_row",
                index,
                limit: m,
            });
        }
        let row = self.value(a).row(index).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::SelectRow(a, index),
            Tensor::from_parts(vec![n], row),
            rg,
        ))
    }

    /// Stacks matrices (or vectors, treated as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::Empty("concat_rows needs at least one part"))?;
        let width = *self.value(*first).shape().last().unwrap_or(&1);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            let w = match v.shape() {
                [w] => {
                    rows += 1;
                    *w
                }
                [r, w] => {
                    rows += r;
                    *w
                }
                s => return Err(shape_err("concat_rows", format!("unsupported shape {s:?}"))),
            };
            if w != width {
                return Err(shape_err("concat_rows", format!("widths {width} vs {w}")));
            }
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_parts(vec![rows, width], out),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that depend on a
    /// [`Graph::variable`] receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, contribution: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].requires_grad {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += up[i * n + j] * vb[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += x * up[i * n + j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Elementwise(a, b, kind) => match kind {
                BinaryKind::Add => {
                    acc(*a, up.to_vec());
                    acc(*b, up.to_vec());
                }
                BinaryKind::Mul => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    acc(*a, up.iter().zip(vb).map(|(u, y)| u * y).collect());
                    acc(*b, up.iter().zip(va).map(|(u, x)| u * x).collect());
                }
            },
            Op::Scale(a, s) => acc(*a, up.iter().map(|u| u * s).collect()),
            Op::ScaleBy(a, s) => {
                let factor = self.value(*s).data()[0];
                let va = self.value(*a).data();
                acc(*a, up.iter().map(|u| u * factor).collect());
                acc(*s, vec![up.iter().zip(va).map(|(u, x)| u * x).sum()]);
            }
            Op::AddRow(a, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in up.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, u)| *d += u);
                }
                acc(*a, up.to_vec());
                acc(*bias, db);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, extent, inner) = lanes(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * extent * inner + j * inner + i;
                        let dot: f64 = (0..extent).map(|j| up[at(j)] * y[at(j)]).sum();
                        for j in 0..extent {
                            dx[at(j)] = y[at(j)] * (up[at(j)] - dot);
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let dx = x
                    .iter()
                    .zip(up)
                    .map(|(&x, u)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        u * d
                    })
                    .collect();
                acc(*a, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let g = self.value(*gain).data();
                let n = g.len();
                let rows = up.len() / n;
                let mut dx = vec![0.0; up.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                #[allow(clippy::needless_range_loop)]
                for r in 0..rows {
                    let base = r * n;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..n {
                        let dxh = up[base + c] * g[c];
                        sum_d += dxh;
                        sum_dx += dxh * normalized[base + c];
                        dg[c] += up[base + c] * normalized[base + c];
                        db[c] += up[base + c];
                    }
                    for c in 0..n {
                        let dxh = up[base + c] * g[c];
                        dx[base + c] = inv_std[r] / n as f64
                            * (n as f64 * dxh - sum_d - normalized[base + c] * sum_dx);
                    }
                }
                acc(*input, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Embedding(table, ids) => {
                let (rows, cols) = self.value(*table).dims2()?;
                let mut dt = vec![0.0; rows * cols];
                for (pos, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[id * cols + c] += up[pos * cols + c];
                    }
                }
                acc(*table, dt);
            }
            Op::MeanPool(a, axis) => {
                let shape = self.value(*a).shape();
                let (outer, extent, inner) = lanes(shape, *axis);
                let mut dx = vec![0.0; outer * extent * inner];
                for o in 0..outer {
                    for j in 0..extent {
                        for i in 0..inner {
                            dx[o * extent * inner + j * inner + i] =
                                up[o * inner + i] / extent as f64;
                        }
                    }
                }
                acc(*a, dx);
            }
            Op::Cosine {
                u,
                v,
                norm_u,
                norm_v,
            } => {
                let c = node.value.data()[0];
                let g = up[0];
                let (vu, vv) = (self.value(*u).data(), self.value(*v).data());
                let denom = norm_u * norm_v;
                acc(
                    *u,
                    vu.iter()
                        .zip(vv)
                        .map(|(a, b)| g * (b / denom - c * a / (norm_u * norm_u)))
                        .collect(),
                );
                acc(
                    *v,
                    vv.iter()
                        .zip(vu)
                        .map(|(b, a)| g * (a / denom - c * b / (norm_v * norm_v)))
                        .collect(),
                );
            }
            Op::Sum(a) => acc(*a, vec![up[0]; self.value(*a).len()]),
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        dx[r * n + c] = up[c * m + r];
                    }
                }
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2()?;
                let width = node.value.shape()[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + width]
                        .copy_from_slice(&up[r * width..(r + 1) * width]);
                }
                acc(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dx = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dx.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, dx);
                    offset += w;
                }
            }
            Op::SelectRow(a, index) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut dx = vec![0.0; m * n];
                dx[index * n..(index + 1) * n].copy_from_slice(up);
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, up[offset..offset + len].to_vec());
                    offset += len;
                }
            }
        }
        Ok(())
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::OutOfRange {
            context: op,
            index: axis,
            limit: t.rank(),
        });
    }
    Ok(())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Parameter(format!("step h must be > 0, got {h}")));
    }
    let mut probe = x.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - h;
        let minus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "relative_error",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let left = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(left), g.value(a));

        let b = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let out = g.matmul(b, i2).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(g.matmul(a, b).unwrap_err().code(), "shape_mismatch");
    }

    #[test]
    fn scale_identity_and_zero() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2], &[1.5, -2.0]));
        let one = g.scale(z, 1.0).unwrap();
        let zero = g.scale(z, 0.0).unwrap();
        assert_eq!(g.value(one), g.value(z));
        assert!(g.value(zero).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn elementwise_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(a, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::filled(&[2, 4], 3.0).unwrap());
        let gain = g.constant(Tensor::filled(&[4], 1.0).unwrap());
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(a, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_out_of_range() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.embedding_lookup(table, &[1, 4]).unwrap_err();
        assert_eq!(err.code(), "out_of_range");
    }

    #[test]
    fn cosine_cases() {
        let mut g = Graph::new();
        let u = g.constant(t(&[2], &[1., 0.]));
        let v = g.constant(t(&[2], &[0., 1.]));
        let uu = g.cosine_similarity(u, u).unwrap();
        let uv = g.cosine_similarity(u, v).unwrap();
        assert_eq!(g.value(uu).item(), Some(1.0));
        assert_eq!(g.value(uv).item(), Some(0.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        assert_eq!(
            g.cosine_similarity(u, zero).unwrap_err().code(),
            "degenerate_input"
        );
    }

    #[test]
    fn product_gradient() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1., 2., 3.]));
        let y = g.constant(t(&[3], &[4., 5., 6.]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4., 5., 6.]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn scale_by_gradient_is_linear() {
        let mut g = Graph::new();
        let z = g.constant(t(&[3], &[1., -2., 0.5]));
        let lam = g.variable(Tensor::scalar(0.3).unwrap());
        let w = g.constant(t(&[3], &[2., 1., 4.]));
        let zt = g.scale_by(z, lam).unwrap();
        let p = g.mul(zt, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        // sum(z * upstream) with upstream = w
        assert_eq!(grads.get(lam).unwrap().item(), Some(2.0 - 2.0 + 2.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert_eq!(g.backward(x).unwrap_err().code(), "non_scalar_loss");
    }

    #[test]
    fn finite_diff_quadratic() {
        let x = t(&[2], &[1., 2.]);
        let fd = finite_diff_grad(|x| Ok(x.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((fd.data()[0] - 2.0).abs() < 1e-8);
        assert!((fd.data()[1] - 4.0).abs() < 1e-8);
        let c = finite_diff_grad(|_| Ok(7.0), &x, 1e-5).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
