//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted and `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, as_matrix, gelu_grad_scalar, gelu_scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Bmm { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    /// `b`'s shape is a suffix of `a`'s; `b` is tiled over the leading axes.
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Narrow0 { x: Var, start: usize },
    TakeRows { x: Var, rows: Vec<usize> },
    TakeElems { x: Var, idx: Vec<usize> },
    MulRowScalars(Var, Var),
    Assemble { parts: Vec<(Var, Vec<usize>)> },
    PrependRow { x: Var, row: Var },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Values are immutable once created.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

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

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Inserts `t` honouring its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn checked(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        if !all_finite(&data) {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a))?;
        let (k2, n) = as_matrix(self.value(b))?;
        if k != k2 {
            return dim_err(format!(
                "matmul inner dimensions {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.checked("matmul", vec![m, n], out, Op::Matmul(a, b), rg)
    }

    /// Batched matmul of `[G×m×k]` with `[G×k×n]` (or `[G×n×k]` when `transpose_b`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (g, m, k) = as_batch(self.value(a))?;
        let (g2, b1, b2) = as_batch(self.value(b))?;
        let (kb, n) = if transpose_b { (b2, b1) } else { (b1, b2) };
        if g != g2 || k != kb {
            return dim_err(format!(
                "bmm {:?} x {:?} (transpose_b={transpose_b})",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..g {
            let a_s = &ad[i * m * k..(i + 1) * m * k];
            let b_s = &bd[i * k * n..(i + 1) * k * n];
            let o_s = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                tensor::matmul_nt_into(a_s, b_s, o_s, m, k, n);
            } else {
                tensor::matmul_into(a_s, b_s, o_s, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        self.checked("bmm", vec![g, m, n], out, Op::Bmm { a, b, transpose_b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.checked("add", shape, out, Op::Add(a, b), rg)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let inner = self.value(b).numel();
        let bd = self.data(b);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(inner) {
            for (x, y) in row.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.checked("add_broadcast", shape, out, Op::AddBroadcast(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("mul {:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.checked("mul", shape, out, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant mask (dropout, stochastic depth).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return dim_err(format!(
                "mask of length {} for shape {:?}",
                mask.len(),
                self.shape(x)
            ));
        }
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.checked("mul_const", shape, out, Op::MulConst(x, mask), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.checked("scale", shape, out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.checked("gelu", shape, out, Op::Gelu(x), rg)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d < 2 {
            return dim_err("layer_norm needs a last axis of at least 2");
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer_norm affine shapes {:?}/{:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let rows = self.value(x).numel() / d;
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; rows * d];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs * gd[j] + bd[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        self.checked(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::Dimension("softmax on scalar".into()))?;
        let out = softmax_rows(self.data(x), d);
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.checked("softmax", shape, out, Op::Softmax(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return dim_err(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Reshape(x), rg))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let (out_shape, out) = permute_data(self.data(x), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along axis 0.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || len == 0 || start + len > shape[0] {
            return dim_err(format!("narrow0 [{start}, {}) of {shape:?}", start + len));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Narrow0 { x, start }, rg))
    }

    /// Gathers rows of a matrix.
    pub fn take_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x))?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return dim_err(format!("take_rows indices out of range for {r} rows"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], out),
            Op::TakeRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers individual elements by flat index into a vector.
    pub fn take_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return dim_err("take_elems index out of range");
        }
        let xd = self.data(x);
        let out: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::TakeElems {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Scales row `i` of `x [n×d]` by `s[i]` (`s` is `[n]`).
    pub fn mul_row_scalars(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = as_matrix(self.value(x))?;
        if self.shape(s) != [n] {
            return dim_err(format!("row scalars {:?} for {n} rows", self.shape(s)));
        }
        let sd = self.data(s);
        let out: Vec<f64> = self
            .data(x)
            .chunks(d)
            .zip(sd)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let rg = self.rg(&[x, s]);
        self.checked("mul_row_scalars", vec![n, d], out, Op::MulRowScalars(x, s), rg)
    }

    /// Builds a `[rows×cols]` matrix where row `idx[r]` of the output
    /// accumulates row `r` of each part. Rows not named by any part are zero.
    pub fn assemble(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize, cols: usize) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        let mut inputs = Vec::with_capacity(parts.len());
        for (v, idx) in &parts {
            let (r, c) = as_matrix(self.value(*v))?;
            if c != cols || r != idx.len() || idx.iter().any(|&i| i >= rows) {
                return dim_err(format!(
                    "assemble part {:?} with {} indices into [{rows}x{cols}]",
                    self.shape(*v),
                    idx.len()
                ));
            }
            let pd = self.data(*v);
            for (src, &dst) in idx.iter().enumerate() {
                let o = &mut out[dst * cols..(dst + 1) * cols];
                for (a, b) in o.iter_mut().zip(&pd[src * cols..(src + 1) * cols]) {
                    *a += b;
                }
            }
            inputs.push(*v);
        }
        let rg = self.rg(&inputs);
        self.checked("assemble", vec![rows, cols], out, Op::Assemble { parts }, rg)
    }

    /// Prepends `row [d]` to every sequence of `x [B×T×d]`, giving `[B×(T+1)×d]`.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (b, t, d) = as_batch(self.value(x))?;
        if self.shape(row) != [d] {
            return dim_err(format!("prepend_row {:?} onto width {d}", self.shape(row)));
        }
        let (xd, rd) = (self.data(x), self.data(row));
        let mut out = Vec::with_capacity(b * (t + 1) * d);
        for i in 0..b {
            out.extend_from_slice(rd);
            out.extend_from_slice(&xd[i * t * d..(i + 1) * t * d]);
        }
        let rg = self.rg(&[x, row]);
        Ok(self.push(Tensor::from_parts(vec![b, t + 1, d], out), Op::PrependRow { x, row }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.checked("sum", vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let rg = self.rg(&[x]);
        self.checked("mean", vec![], vec![s], Op::Mean(x), rg)
    }

    /// Column means of a matrix: `[r×c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x))?;
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[x]);
        self.checked("mean_rows", vec![c], out, Op::MeanRows(x), rg)
    }

    /// Mean over the batch of `-Σ_k target_k · log softmax(logits)_k`.
    /// `targets` is a row-stochastic `[B×K]` matrix (one-hot, smoothed or mixed).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (b, k) = as_matrix(self.value(logits))?;
        if targets.shape() != [b, k] {
            return dim_err(format!(
                "targets {:?} for logits [{b}x{k}]",
                targets.shape()
            ));
        }
        let ld = self.data(logits);
        let mut loss = 0.0;
        let mut probs = vec![0.0; b * k];
        for r in 0..b {
            let row = &ld[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[r * k + j] = logp.exp();
                loss -= targets.data()[r * k + j] * logp;
            }
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        self.checked(
            "softmax_cross_entropy",
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// differentiable leaf and clears the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let numel = self.value(loss).numel();
        if numel != 1 || self.value(loss).rank() > 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::NoGraph);
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (id, node) in nodes.into_iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let g = grads[id].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.grads.insert(Var(id), Tensor::from_parts(shape, g));
            }
        }
        Ok(out)
    }
}

fn as_batch(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [g, m, n] => Ok((*g, *m, *n)),
        s => Err(Error::Dimension(format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

// v * 0 is NaN exactly when v is not finite; independent lanes let it vectorize
fn all_finite(d: &[f64]) -> bool {
    let mut acc = [0.0f64; 8];
    let chunks = d.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i] * 0.0;
        }
    }
    rem.iter().fold(acc.iter().sum::<f64>(), |a, &v| a + v * 0.0) == 0.0
}

pub(crate) fn softmax_rows(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - m).exp();
            s += *oj;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[id];
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            if rg(*a) {
                let mut ga = vec![0.0; m * k];
                tensor::matmul_nt_into(g, val(*b), &mut ga, m, n, k);
                accumulate(grads, nodes, *a, ga);
            }
            if rg(*b) {
                let mut gb = vec![0.0; k * n];
                tensor::matmul_tn_into(val(*a), g, &mut gb, m, k, n);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let (bs, m, k) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
            let n = node.value.shape()[2];
            let (ad, bd) = (val(*a), val(*b));
            if rg(*a) {
                let mut ga = vec![0.0; bs * m * k];
                for i in 0..bs {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let bsl = &bd[i * k * n..(i + 1) * k * n];
                    let out = &mut ga[i * m * k..(i + 1) * m * k];
                    if *transpose_b {
                        // a·bᵀ: dA = G·b, b is [n×k]
                        tensor::matmul_into(gs, bsl, out, m, n, k);
                    } else {
                        tensor::matmul_nt_into(gs, bsl, out, m, n, k);
                    }
                }
                accumulate(grads, nodes, *a, ga);
            }
            if rg(*b) {
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let asl = &ad[i * m * k..(i + 1) * m * k];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // dB [n×k] = Gᵀ·a
                        tensor::matmul_tn_into(gs, asl, out, m, n, k);
                    } else {
                        tensor::matmul_tn_into(asl, gs, out, m, k, n);
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::AddBroadcast(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if rg(*b) {
                let inner = nodes[b.0].value.numel();
                let mut gb = vec![0.0; inner];
                for chunk in g.chunks(inner) {
                    gb.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let ga = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if rg(*b) {
                let gb = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MulConst(x, mask) => {
            let gx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Scale(x, c) => {
            accumulate(grads, nodes, *x, g.iter().map(|v| v * c).collect());
        }
        Op::Gelu(x) => {
            let gx = g
                .iter()
                .zip(val(*x))
                .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let d = *shape(*x).last().unwrap();
            let xd = val(*x);
            let gd = val(*gamma);
            let mut gx = vec![0.0; xd.len()];
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..mean.len() {
                let row = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for j in 0..d {
                    let xhat = (row[j] - mu) * rs;
                    let dy = gr[j] * gd[j];
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                    ggamma[j] += gr[j] * xhat;
                    gbeta[j] += gr[j];
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let xhat = (row[j] - mu) * rs;
                    let dy = gr[j] * gd[j];
                    gx[r * d + j] = rs * (dy - inv_d * sum_dy - xhat * inv_d * sum_dy_xhat);
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *gamma, ggamma);
            accumulate(grads, nodes, *beta, gbeta);
        }
        Op::Softmax(x) => {
            let d = *node.value.shape().last().unwrap();
            let y = node.value.data();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), o) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    o[j] = yr[j] * (gr[j] - s);
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::Permute { x, perm } => {
            let inv = inverse_perm(perm);
            let (_, gx) = permute_data(g, node.value.shape(), &inv);
            accumulate(grads, nodes, *x, gx);
        }
        Op::Narrow0 { x, start } => {
            let xs = shape(*x);
            let inner: usize = xs[1..].iter().product();
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            gx[start * inner..start * inner + g.len()].copy_from_slice(g);
            accumulate(grads, nodes, *x, gx);
        }
        Op::TakeRows { x, rows } => {
            let c = shape(*x)[1];
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for (src, &dst) in rows.iter().enumerate() {
                let o = &mut gx[dst * c..(dst + 1) * c];
                o.iter_mut().zip(&g[src * c..(src + 1) * c]).for_each(|(a, b)| *a += b);
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::TakeElems { x, idx } => {
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for (src, &dst) in idx.iter().enumerate() {
                gx[dst] += g[src];
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::MulRowScalars(x, s) => {
            let d = shape(*x)[1];
            let (xd, sd) = (val(*x), val(*s));
            if rg(*x) {
                let gx = g
                    .chunks(d)
                    .zip(sd)
                    .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
                    .collect();
                accumulate(grads, nodes, *x, gx);
            }
            if rg(*s) {
                let gs = g.chunks(d).zip(xd.chunks(d)).map(|(a, b)| tensor::dot(a, b)).collect();
                accumulate(grads, nodes, *s, gs);
            }
        }
        Op::Assemble { parts } => {
            let cols = node.value.shape()[1];
            for (v, idx) in parts {
                if !rg(*v) {
                    continue;
                }
                let mut gp = Vec::with_capacity(idx.len() * cols);
                for &dst in idx {
                    gp.extend_from_slice(&g[dst * cols..(dst + 1) * cols]);
                }
                accumulate(grads, nodes, *v, gp);
            }
        }
        Op::PrependRow { x, row } => {
            let (b, t1, d) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
            if rg(*x) {
                let mut gx = Vec::with_capacity(b * (t1 - 1) * d);
                for i in 0..b {
                    gx.extend_from_slice(&g[(i * t1 + 1) * d..(i + 1) * t1 * d]);
                }
                accumulate(grads, nodes, *x, gx);
            }
            if rg(*row) {
                let mut gr = vec![0.0; d];
                for i in 0..b {
                    gr.iter_mut()
                        .zip(&g[i * t1 * d..(i * t1 + 1) * d])
                        .for_each(|(a, v)| *a += v);
                }
                accumulate(grads, nodes, *row, gr);
            }
        }
        Op::Sum(x) => {
            accumulate(grads, nodes, *x, vec![g[0]; nodes[x.0].value.numel()]);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.numel();
            accumulate(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::MeanRows(x) => {
            let (r, c) = (shape(*x)[0], shape(*x)[1]);
            let mut gx = Vec::with_capacity(r * c);
            for _ in 0..r {
                gx.extend(g.iter().map(|v| v / r as f64));
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let b = shape(*logits)[0] as f64;
            let k = shape(*logits)[1];
            // Targets are row-stochastic, so d/dlogits = (p - t)/B.
            let mut gl = Vec::with_capacity(probs.len());
            for (pr, tr) in probs.chunks(k).zip(targets.chunks(k)) {
                let tsum: f64 = tr.iter().sum();
                gl.extend(pr.iter().zip(tr).map(|(p, t)| g[0] * (tsum * p - t) / b));
            }
            accumulate(grads, nodes, *logits, gl);
        }
    }
    Ok(())
}

/// Maximum relative error between reverse-mode gradients and central
/// differences `(f(x+h) - f(x-h)) / 2h`, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_coords(f, point, h, None)
}

/// [`grad_check`] restricted to a subset of flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let analytic = match g.backward(y) {
        Ok(grads) => grads.get(x).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; point.numel()]),
        // constant function: nothing depends on the input
        Err(Error::NoGraph) => vec![0.0; point.numel()],
        Err(e) => return Err(e),
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
    }

    /// Weighted sum with fixed pseudo-random weights so every output
    /// element receives a distinct upstream gradient.
    fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
        let n = g.value(y).numel();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let z = g.mul_const(y, w)?;
        g.sum(z)
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap());
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);

        let base = rand_tensor(&[4, 5], 1);
        let shifted = Tensor::new(vec![4, 5], base.data().iter().map(|v| v + 123.0).collect()).unwrap();
        let a = g.constant(base);
        let b = g.constant(shifted);
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
        for r in 0..4 {
            let s: f64 = g.value(sa).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::ones(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let x = g.constant(Tensor::new(vec![2, 3], vec![5.0, 5.0, 5.0, 0.0, 2.0, 4.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let d = g.value(y).data();
        for v in &d[..3] {
            assert!(v.abs() < 1e-12);
        }
        let r = 1.5f64.sqrt();
        assert!((d[3] + r).abs() < 1e-9 && d[4].abs() < 1e-12 && (d[5] - r).abs() < 1e-9);

        let gamma2 = g.constant(Tensor::ones(vec![2]));
        let beta2 = g.constant(Tensor::zeros(vec![2]));
        let x2 = g.constant(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap());
        let y2 = g.layer_norm(x2, gamma2, beta2, 1e-12).unwrap();
        assert!((g.value(y2).data()[0] + 1.0).abs() < 1e-9);

        let big = g.constant(rand_tensor(&[6, 8], 3));
        let gamma8 = g.constant(Tensor::ones(vec![8]));
        let beta8 = g.constant(Tensor::zeros(vec![8]));
        let y3 = g.layer_norm(big, gamma8, beta8, 1e-6).unwrap();
        for r in 0..6 {
            let mu: f64 = g.value(y3).row(r).iter().sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-10);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_constant_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(vec![2]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));

        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        assert!(matches!(g.backward(c), Err(Error::NoGraph)));
    }

    #[test]
    fn linear_loss_gradient_is_input_structure() {
        // loss = sum(W x): dW[i][j] = x[j]
        let mut g = Graph::new();
        let w = g.leaf(rand_tensor(&[3, 2], 5));
        let x = g.constant(Tensor::new(vec![2, 1], vec![0.5, -2.0]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
        assert!(g.is_empty());
    }

    #[test]
    fn gradient_accumulates_over_reused_inputs() {
        // x used twice: d/dx sum(x*x) = 2x
        let p = rand_tensor(&[5], 9);
        let mut g = Graph::new();
        let x = g.leaf(p.clone());
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        for (gv, xv) in grads.get(x).unwrap().data().iter().zip(p.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_sum_of_squares_and_constant() {
        let p = rand_tensor(&[7], 11);
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");

        let err = grad_check(|g, _x| Ok(g.constant(Tensor::scalar(4.0))), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    fn check(name: &str, point: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let err = grad_check(f, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: relative error {err}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let other = rand_tensor(&[3, 4], 21);
        check("matmul lhs", rand_tensor(&[2, 3], 1), |g, x| {
            let b = g.constant(other.clone());
            let y = g.matmul(x, b)?;
            weighted_sum(g, y)
        });
        check("matmul rhs", rand_tensor(&[3, 4], 2), |g, x| {
            let a = g.constant(rand_tensor(&[2, 3], 22));
            let y = g.matmul(a, x)?;
            weighted_sum(g, y)
        });
        for tb in [false, true] {
            check("bmm lhs", rand_tensor(&[2, 3, 4], 3), move |g, x| {
                let b = g.constant(rand_tensor(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 23));
                let y = g.bmm(x, b, tb)?;
                weighted_sum(g, y)
            });
            check("bmm rhs", rand_tensor(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 4), move |g, x| {
                let a = g.constant(rand_tensor(&[2, 3, 4], 24));
                let y = g.bmm(a, x, tb)?;
                weighted_sum(g, y)
            });
        }
        check("add_broadcast bias", rand_tensor(&[4], 5), |g, x| {
            let a = g.constant(rand_tensor(&[2, 3, 4], 25));
            let y = g.add_broadcast(a, x)?;
            weighted_sum(g, y)
        });
        check("mul", rand_tensor(&[6], 6), |g, x| {
            let b = g.constant(rand_tensor(&[6], 26));
            let y = g.mul(x, b)?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y)
        });
        check("gelu", rand_tensor(&[8], 7), |g, x| {
            let y = g.scale(x, 2.5)?;
            let y = g.gelu(y)?;
            weighted_sum(g, y)
        });
        check("layer_norm x", rand_tensor(&[3, 5], 8), |g, x| {
            let gamma = g.constant(rand_tensor(&[5], 27));
            let beta = g.constant(rand_tensor(&[5], 28));
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            weighted_sum(g, y)
        });
        check("layer_norm gamma", rand_tensor(&[5], 9), |g, gamma| {
            let x = g.constant(rand_tensor(&[3, 5], 29));
            let beta = g.constant(rand_tensor(&[5], 30));
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            weighted_sum(g, y)
        });
        check("softmax", rand_tensor(&[3, 4], 10), |g, x| {
            let y = g.softmax(x)?;
            weighted_sum(g, y)
        });
        check("permute+reshape+narrow", rand_tensor(&[2, 3, 4], 11), |g, x| {
            let y = g.permute(x, &[2, 0, 1])?;
            let y = g.reshape(y, vec![4, 6])?;
            let y = g.narrow0(y, 1, 2)?;
            weighted_sum(g, y)
        });
        check("take_rows+assemble", rand_tensor(&[5, 3], 12), |g, x| {
            let a = g.take_rows(x, &[4, 0, 0, 2])?;
            let b = g.take_rows(x, &[1])?;
            let y = g.assemble(vec![(a, vec![0, 3, 1, 2]), (b, vec![3])], 4, 3)?;
            weighted_sum(g, y)
        });
        check("take_elems+mul_row_scalars", rand_tensor(&[3, 4], 13), |g, x| {
            let s = g.take_elems(x, &[0, 5, 11])?;
            let r = g.take_rows(x, &[2, 1, 0])?;
            let y = g.mul_row_scalars(r, s)?;
            weighted_sum(g, y)
        });
        check("prepend_row", rand_tensor(&[4], 14), |g, row| {
            let x = g.leaf(rand_tensor(&[2, 3, 4], 31));
            let y = g.prepend_row(x, row)?;
            weighted_sum(g, y)
        });
        check("mean & mean_rows", rand_tensor(&[3, 4], 15), |g, x| {
            let m = g.mean_rows(x)?;
            let m = g.mul(m, m)?;
            let a = g.sum(m)?;
            let sq = g.mul(x, x)?;
            let b = g.mean(sq)?;
            g.add(a, b)
        });
        let targets = Tensor::from_rows(&[vec![0.1, 0.7, 0.2], vec![0.0, 0.0, 1.0]]).unwrap();
        check("softmax_cross_entropy", rand_tensor(&[2, 3], 16), move |g, x| {
            g.softmax_cross_entropy(x, &targets)
        });
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1], vec![f64::MAX]).unwrap());
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn permute_round_trip() {
        let t = rand_tensor(&[2, 3, 4, 5], 40);
        let (s1, d1) = permute_data(t.data(), t.shape(), &[3, 1, 0, 2]);
        let (s2, d2) = permute_data(&d1, &s1, &inverse_perm(&[3, 1, 0, 2]));
        assert_eq!(s2, t.shape());
        assert_eq!(d2, t.data());
        // spot check one element: out[i0,i1,i2,i3] = in[i2,i1,i3,i0]
        let idx_in = |a: usize, b: usize, c: usize, d: usize| ((a * 3 + b) * 4 + c) * 5 + d;
        let idx_out = |a: usize, b: usize, c: usize, d: usize| ((a * 3 + b) * 2 + c) * 4 + d;
        assert_eq!(d1[idx_out(4, 2, 1, 3)], t.data()[idx_in(1, 2, 3, 4)]);
    }
}
