//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! Nodes are appended in construction order, so every parent has a smaller
//! index than its children and a reverse sweep over the tape is a valid
//! reverse topological order. Gradients from multiple consumers are summed.
//! Only the operations the fusion model and its baselines need are provided.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor2};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Default epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rows whose norm falls below this are rejected by l2 normalization.
pub const MIN_ROW_NORM: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    MulConst(Var, Tensor2),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    MaskedSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    ScaleRowsByColumn {
        x: Var,
        weights: Var,
        col: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar loss whose gradient w.r.t. its single input was computed in
    /// the forward pass.
    FusedLoss {
        input: Var,
        local_grad: Tensor2,
    },
}

struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// A single computation graph. Not shared across threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2>>,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// `x W`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        let (d2, k) = self.shape(w);
        if d != d2 {
            return Err(Error::config(format!(
                "matmul shape mismatch: {n}x{d} * {d2}x{k}"
            )));
        }
        let mut out = Tensor2::zeros(n, k);
        gemm(1.0, self.value(x), false, self.value(w), false, 0.0, &mut out);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::MatMul(x, w), rg))
    }

    /// `x + b` with the 1-row `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(x);
        if self.shape(b) != (1, k) {
            return Err(Error::config(format!(
                "bias shape {:?} does not broadcast over {n}x{k}",
                self.shape(b)
            )));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).values().to_vec();
        for i in 0..n {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "add shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Per-row standardization (biased variance) followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(Error::config(format!(
                "layer_norm gain/bias must be 1x{d}"
            )));
        }
        let xv = self.value(x);
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let mut xhat = Tensor2::zeros(n, d);
        let mut out = Tensor2::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, _) = xv.shape();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let norm = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= MIN_ROW_NORM) {
                return Err(Error::DegenerateEmbedding { row: i, norm });
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor2) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::config("mul_const shape mismatch"));
        }
        let mut out = self.value(x).clone();
        for (o, m) in out.values_mut().iter_mut().zip(c.values()) {
            *o *= m;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.shape(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::config(format!("gather row {bad} out of range {n}")));
        }
        let out = self.value(x).gather_rows(&idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx), rg))
    }

    /// Places row `r` of `x` at row `idx[r]` of an `n_rows`-row zero tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, n_rows: usize) -> Result<Var> {
        let (r, d) = self.shape(x);
        if idx.len() != r {
            return Err(Error::config("scatter index length mismatch"));
        }
        let mut seen = vec![false; n_rows];
        for &i in &idx {
            if i >= n_rows || seen[i] {
                return Err(Error::config(format!("invalid scatter target row {i}")));
            }
            seen[i] = true;
        }
        let mut out = Tensor2::zeros(n_rows, d);
        let xv = self.value(x);
        for (src, &dst) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(xv.row(src));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScatterRows(x, idx), rg))
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as `x`).
    /// Masked-out entries are exactly zero. Every row needs one unmasked entry.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        if mask.len() != n * m {
            return Err(Error::config("masked_softmax mask shape mismatch"));
        }
        let mut out = Tensor2::zeros(n, m);
        for i in 0..n {
            let row = xv.row(i);
            let mrow = &mask[i * m..(i + 1) * m];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::config(format!(
                    "masked_softmax: row {i} has an empty mask"
                )));
            }
            let mut total = 0.0;
            for j in 0..m {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    out[(i, j)] = e;
                    total += e;
                }
            }
            out.row_mut(i).iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax { x, mask }, rg))
    }

    /// `out[i, :] = x[i, :] * weights[i, col]`.
    pub fn scale_rows_by_column(&mut self, x: Var, weights: Var, col: usize) -> Result<Var> {
        let (n, _) = self.shape(x);
        let (wn, wm) = self.shape(weights);
        if wn != n || col >= wm {
            return Err(Error::config("scale_rows_by_column shape mismatch"));
        }
        let mut out = self.value(x).clone();
        let w = self.value(weights);
        for i in 0..n {
            let s = w[(i, col)];
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(x) || self.rg(weights);
        Ok(self.push(out, Op::ScaleRowsByColumn { x, weights, col }, rg))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let n = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::config("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor2::zeros(n, total);
        for i in 0..n {
            let mut off = 0;
            for &p in &parts {
                let r = self.value(p).row(i);
                out.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts), rg))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let d = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).1 != d) {
            return Err(Error::config("concat_rows column mismatch"));
        }
        let mut values = Vec::new();
        for &p in &parts {
            values.extend_from_slice(self.value(p).values());
        }
        let n = values.len() / d.max(1);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor2::from_raw(n, d, values), Op::ConcatRows(parts), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor2::scalar(s), Op::Sum(x), rg)
    }

    /// `sum_i c_i * x_i` over same-shaped terms.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        let shape = terms
            .first()
            .map(|&(v, _)| self.shape(v))
            .ok_or_else(|| Error::config("weighted_sum of nothing"))?;
        if terms.iter().any(|&(v, _)| self.shape(v) != shape) {
            return Err(Error::config("weighted_sum shape mismatch"));
        }
        let mut out = Tensor2::zeros(shape.0, shape.1);
        for &(v, c) in &terms {
            for (o, x) in out.values_mut().iter_mut().zip(self.value(v).values()) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::WeightedSum(terms), rg))
    }

    /// Registers a scalar loss computed outside the graph together with its
    /// gradient w.r.t. `input`.
    pub(crate) fn fused_loss(&mut self, input: Var, loss: f64, local_grad: Tensor2) -> Var {
        debug_assert_eq!(self.shape(input), local_grad.shape());
        let rg = self.rg(input);
        self.push(
            Tensor2::scalar(loss),
            Op::FusedLoss { input, local_grad },
            rg,
        )
    }

    fn accumulate(&mut self, v: Var, g: Tensor2) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Seeds `root` (must be 1x1) with gradient 1 and sweeps the tape backward.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::config("backward root must be scalar"));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(Tensor2::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Tensor2) {
        // Temporarily move the op out so parents can be mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(x, w) => {
                if self.rg(*x) {
                    let (n, d) = self.shape(*x);
                    let mut gx = Tensor2::zeros(n, d);
                    gemm(1.0, g, false, self.value(*w), true, 0.0, &mut gx);
                    self.accumulate(*x, gx);
                }
                if self.rg(*w) {
                    let (d, k) = self.shape(*w);
                    let mut gw = Tensor2::zeros(d, k);
                    gemm(1.0, self.value(*x), true, g, false, 0.0, &mut gw);
                    self.accumulate(*w, gw);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(*x, g.clone());
                if self.rg(*b) {
                    let (n, k) = g.shape();
                    let mut gb = vec![0.0; k];
                    for r in 0..n {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(*b, Tensor2::row_vector(gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.scale_in_place(*s);
                self.accumulate(*x, gx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &xi) in gx.values_mut().iter_mut().zip(xv.values()) {
                    *o *= gelu_grad_scalar(xi);
                }
                self.accumulate(*x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = g.shape();
                let gain_v = self.value(*gain).values().to_vec();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] += g[(r, j)] * xhat[(r, j)];
                            gb[j] += g[(r, j)];
                        }
                    }
                    self.accumulate(*gain, Tensor2::row_vector(gg));
                    self.accumulate(*bias, Tensor2::row_vector(gb));
                }
                if self.rg(*x) {
                    let mut gx = Tensor2::zeros(n, d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[(r, j)] * gain_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[(r, j)];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            gx[(r, j)] = inv_std[r] * (dxhat[j] - mean_d - xhat[(r, j)] * mean_dx);
                        }
                    }
                    self.accumulate(*x, gx);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &self.nodes[i].value;
                let (n, _) = y.shape();
                let mut gx = g.clone();
                for r in 0..n {
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (o, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yv * dot) / norms[r];
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::MulConst(x, c) => {
                let mut gx = g.clone();
                for (o, m) in gx.values_mut().iter_mut().zip(c.values()) {
                    *o *= m;
                }
                self.accumulate(*x, gx);
            }
            Op::GatherRows(x, idx) => {
                let (n, d) = self.shape(*x);
                let mut gx = Tensor2::zeros(n, d);
                for (src, &dst) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(dst).iter_mut().zip(g.row(src)) {
                        *o += v;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::ScatterRows(x, idx) => {
                let gx = g.gather_rows(idx);
                self.accumulate(*x, gx);
            }
            Op::MaskedSoftmax { x, mask } => {
                let y = &self.nodes[i].value;
                let (n, m) = y.shape();
                let mut gx = Tensor2::zeros(n, m);
                for r in 0..n {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        if mask[r * m + j] {
                            gx[(r, j)] = y[(r, j)] * (g[(r, j)] - dot);
                        }
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::ScaleRowsByColumn { x, weights, col } => {
                let (n, _) = g.shape();
                if self.rg(*x) {
                    let w = self.value(*weights);
                    let mut gx = g.clone();
                    for r in 0..n {
                        let s = w[(r, *col)];
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(*x, gx);
                }
                if self.rg(*weights) {
                    let xv = self.value(*x);
                    let (wn, wm) = self.shape(*weights);
                    let mut gw = Tensor2::zeros(wn, wm);
                    for r in 0..n {
                        gw[(r, *col)] = xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    }
                    self.accumulate(*weights, gw);
                }
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut off = 0;
                for &p in parts {
                    let d = self.shape(p).1;
                    let mut gp = Tensor2::zeros(n, d);
                    for r in 0..n {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + d]);
                    }
                    off += d;
                    self.accumulate(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, d) = self.shape(p);
                    let gp = Tensor2::from_raw(r, d, g.values()[off * d..(off + r) * d].to_vec());
                    off += r;
                    self.accumulate(p, gp);
                }
            }
            Op::Sum(x) => {
                let (n, d) = self.shape(*x);
                self.accumulate(*x, Tensor2::filled(n, d, g.item()));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    let mut gv = g.clone();
                    gv.scale_in_place(c);
                    self.accumulate(v, gv);
                }
            }
            Op::FusedLoss { input, local_grad } => {
                let mut gx = local_grad.clone();
                gx.scale_in_place(g.item());
                self.accumulate(*input, gx);
            }
        }
        self.nodes[i].op = op;
    }

    /// Gradient of the last `backward` root w.r.t. `v`; zeros if `v` did
    /// not influence it.
    pub fn grad(&self, v: Var) -> Tensor2 {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Tensor2::zeros(r, c)
            }
        }
    }

    /// Like [`Graph::grad`] but distinguishes "never reached".
    pub fn grad_opt(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }
}

/// Standalone masked softmax over one score vector.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::config("masked_softmax length mismatch"));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor2::row_vector(scores.to_vec()));
    let y = g.masked_softmax_rows(x, mask.to_vec())?;
    Ok(g.value(y).values().to_vec())
}

/// Compares the reverse-mode gradient of a scalar-valued `op` at `point`
/// against central finite differences. Returns the max over coordinates of
/// `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(op: F, point: &Tensor2, fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |p: &Tensor2| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone());
        let out = op(&mut g, x)?;
        if g.shape(out) != (1, 1) {
            return Err(Error::config("grad_check requires a scalar-valued op"));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let out = op(&mut g, x)?;
    g.backward(out)?;
    let analytic = g.grad(x);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for k in 0..point.len() {
        let orig = probe.values()[k];
        probe.values_mut()[k] = orig + fd_step;
        let up = eval(&probe)?;
        probe.values_mut()[k] = orig - fd_step;
        let down = eval(&probe)?;
        probe.values_mut()[k] = orig;
        let fd = (up - down) / (2.0 * fd_step);
        let err = (analytic.values()[k] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
