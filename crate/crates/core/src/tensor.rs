//! Minimal reverse-mode autodiff over dense f64 matrices.
//!
//! A `Tape` records every operation of a forward pass; `backward` walks the
//! record in reverse and accumulates analytic gradients. Everything is
//! 64-bit so gradients can be verified against central differences.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{}x{} tensor from {} values", rows, cols, data.len())));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for c in 0..other.cols {
                    dst[c] += a * orow[c];
                }
            }
        }
        out
    }
}

pub type NodeId = usize;

/// Op kinds, used for the gradient-corruption hook in mutation tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Transpose,
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    Affine,
    Tanh,
    Sigmoid,
    SoftmaxRows,
    LayerNormRows,
    ConcatRows,
    SelectRows,
    Sum,
    FocalLoss,
    SmoothL1,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Transpose(NodeId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a broadcast 1xC row.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a * x + b elementwise with constants.
    Affine(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    /// Row gather with zero rows for `None` entries.
    SelectRows(NodeId, Vec<Option<usize>>),
    Sum(NodeId),
    /// Focal loss over sigmoid(logits), summed; labels in {0, 1}.
    FocalLoss { logits: NodeId, labels: Vec<f64>, alpha: f64, gamma: f64 },
    /// Smooth-L1 over residuals, summed.
    SmoothL1 { residuals: NodeId, beta: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Transpose(..) => OpKind::Transpose,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNormRows(..) => OpKind::LayerNormRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SelectRows(..) => OpKind::SelectRows,
            Op::Sum(..) => OpKind::Sum,
            Op::FocalLoss { .. } => OpKind::FocalLoss,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Test hook: scales the input-gradient of every op of the given kind,
    /// simulating a broken backward implementation.
    pub corrupt_backward: Option<(OpKind, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), corrupt_backward: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.data.len(), 1);
        self.nodes[id].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Re-insert a node's current value as a fresh constant, cutting the
    /// gradient path (used for cooperative-agent branches and memory).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.leaf(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.cols != bv.rows {
            return Err(Error::Shape(format!("matmul {}x{} by {}x{}", av.rows, av.cols, bv.rows, bv.cols)));
        }
        let v = av.matmul(bv);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rows != bv.rows || av.cols != bv.cols {
            return Err(Error::Shape(format!("add {}x{} to {}x{}", av.rows, av.cols, bv.rows, bv.cols)));
        }
        let mut v = av.clone();
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x += y;
        }
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (&self.nodes[a].value, &self.nodes[row].value);
        if rv.rows != 1 || rv.cols != av.cols {
            return Err(Error::Shape(format!("add_row {}x{} to {}x{}", av.rows, av.cols, rv.rows, rv.cols)));
        }
        let mut v = av.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += rv.data[c];
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rows != bv.rows || av.cols != bv.cols {
            return Err(Error::Shape("sub shape mismatch".into()));
        }
        let mut v = av.clone();
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x -= y;
        }
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rows != bv.rows || av.cols != bv.cols {
            return Err(Error::Shape("mul shape mismatch".into()));
        }
        let mut v = av.clone();
        for (x, y) in v.data.iter_mut().zip(&bv.data) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Elementwise a*x + b with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in &mut v.data {
            *e = a * *e + b;
        }
        self.push(v, Op::Affine(x, a))
    }

    pub fn scale(&mut self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in &mut v.data {
            *e = e.tanh();
        }
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in &mut v.data {
            *e = 1.0 / (1.0 + (-*e).exp());
        }
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = xv.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    /// Per-row layer normalization: (x - mean) / sqrt(var + eps).
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.cols < 2 {
            return Err(Error::InvalidInput("layer_norm needs dim >= 2".into()));
        }
        let mut v = xv.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * inv;
            }
        }
        Ok(self.push(v, Op::LayerNormRows(x, eps)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let cols = self.nodes[parts[0]].value.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.cols != cols {
                return Err(Error::Shape("concat column mismatch".into()));
            }
            rows += pv.rows;
            data.extend_from_slice(&pv.data);
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Gather rows from `src`; `None` entries produce zero rows.
    pub fn select_rows(&mut self, src: NodeId, rows: &[Option<usize>]) -> Result<NodeId> {
        let sv = &self.nodes[src].value;
        let cols = sv.cols;
        let mut v = Tensor::zeros(rows.len(), cols);
        for (r, sel) in rows.iter().enumerate() {
            if let Some(s) = sel {
                if *s >= sv.rows {
                    return Err(Error::Shape(format!("select row {s} of {}", sv.rows)));
                }
                v.data[r * cols..(r + 1) * cols].copy_from_slice(sv.row(*s));
            }
        }
        Ok(self.push(v, Op::SelectRows(src, rows.to_vec())))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        self.push(Tensor::from_vec(1, 1, vec![s]).unwrap(), Op::Sum(x))
    }

    /// Summed focal loss over sigmoid(logits). `logits` is any shape;
    /// `labels` must match elementwise with values in {0, 1}.
    pub fn focal_loss(&mut self, logits: NodeId, labels: &[f64], alpha: f64, gamma: f64) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        if labels.len() != lv.data.len() {
            return Err(Error::Shape("focal labels length mismatch".into()));
        }
        let mut total = 0.0;
        for (&z, &y) in lv.data.iter().zip(labels) {
            let p = sigmoid_clamped(z);
            total += focal_term(p, y, alpha, gamma);
        }
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![total]).unwrap(),
            Op::FocalLoss { logits, labels: labels.to_vec(), alpha, gamma },
        ))
    }

    /// Summed smooth-L1 over residuals.
    pub fn smooth_l1(&mut self, residuals: NodeId, beta: f64) -> Result<NodeId> {
        if !(beta > 0.0) {
            return Err(Error::InvalidInput(format!("smooth_l1 beta {beta} must be > 0")));
        }
        let rv = &self.nodes[residuals].value;
        let total: f64 = rv.data.iter().map(|&x| smooth_l1_term(x, beta)).sum();
        Ok(self.push(Tensor::from_vec(1, 1, vec![total]).unwrap(), Op::SmoothL1 { residuals, beta }))
    }

    /// Scaled dot-product attention: softmax(Q K^T / sqrt(d)) V.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let (qd, kd, kv, vv) = (
            self.nodes[q].value.cols,
            self.nodes[k].value.cols,
            self.nodes[k].value.rows,
            self.nodes[v].value.rows,
        );
        if qd != kd || kv != vv {
            return Err(Error::Shape(format!("attention shapes: q cols {qd}, k cols {kd}, k rows {kv}, v rows {vv}")));
        }
        if kv == 0 {
            return Err(Error::Shape("attention with zero keys".into()));
        }
        let kt = self.transpose_node(k);
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (qd as f64).sqrt());
        let weights = self.softmax_rows(scaled);
        self.matmul(weights, v)
    }

    pub fn transpose_node(&mut self, src: NodeId) -> NodeId {
        let t = self.nodes[src].value.transpose();
        self.push(t, Op::Transpose(src))
    }

    /// Compute gradients of scalar node `root` with respect to every node.
    /// Returns per-node gradients (same shapes as values).
    pub fn backward(&mut self, root: NodeId) -> Vec<Tensor> {
        assert_eq!(self.nodes[root].value.data.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Tensor> =
            self.nodes.iter().map(|n| Tensor::zeros(n.value.rows, n.value.cols)).collect();
        grads[root].data[0] = 1.0;

        for id in (0..=root).rev() {
            let g = grads[id].clone();
            if g.data.iter().all(|&x| x == 0.0) {
                continue;
            }
            let corrupt = match self.corrupt_backward {
                Some((kind, factor)) if kind == self.nodes[id].op.kind() => factor,
                _ => 1.0,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    accumulate(&mut grads[a], &gt, corrupt);
                }
                Op::MatMul(a, b) => {
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    let ga = g.matmul(&bv.transpose());
                    let gb = av.transpose().matmul(&g);
                    accumulate(&mut grads[a], &ga, corrupt);
                    accumulate(&mut grads[b], &gb, corrupt);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a], &g, corrupt);
                    accumulate(&mut grads[b], &g, corrupt);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads[a], &g, corrupt);
                    let cols = g.cols;
                    let mut rg = Tensor::zeros(1, cols);
                    for r in 0..g.rows {
                        for c in 0..cols {
                            rg.data[c] += g.data[r * cols + c];
                        }
                    }
                    accumulate(&mut grads[row], &rg, corrupt);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a], &g, corrupt);
                    let neg = {
                        let mut n = g.clone();
                        for e in &mut n.data {
                            *e = -*e;
                        }
                        n
                    };
                    accumulate(&mut grads[b], &neg, corrupt);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    let mut ga = g.clone();
                    for (e, y) in ga.data.iter_mut().zip(&bv.data) {
                        *e *= y;
                    }
                    let mut gb = g.clone();
                    for (e, x) in gb.data.iter_mut().zip(&av.data) {
                        *e *= x;
                    }
                    accumulate(&mut grads[a], &ga, corrupt);
                    accumulate(&mut grads[b], &gb, corrupt);
                }
                Op::Affine(x, a) => {
                    let mut gx = g.clone();
                    for e in &mut gx.data {
                        *e *= a;
                    }
                    accumulate(&mut grads[x], &gx, corrupt);
                }
                Op::Tanh(x) => {
                    let yv = self.nodes[id].value.clone();
                    let mut gx = g.clone();
                    for (e, y) in gx.data.iter_mut().zip(&yv.data) {
                        *e *= 1.0 - y * y;
                    }
                    accumulate(&mut grads[x], &gx, corrupt);
                }
                Op::Sigmoid(x) => {
                    let yv = self.nodes[id].value.clone();
                    let mut gx = g.clone();
                    for (e, y) in gx.data.iter_mut().zip(&yv.data) {
                        *e *= y * (1.0 - y);
                    }
                    accumulate(&mut grads[x], &gx, corrupt);
                }
                Op::SoftmaxRows(x) => {
                    let yv = self.nodes[id].value.clone();
                    let mut gx = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let y = &yv.data[r * g.cols..(r + 1) * g.cols];
                        let gr = &g.data[r * g.cols..(r + 1) * g.cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols {
                            gx.data[r * g.cols + c] = y[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[x], &gx, corrupt);
                }
                Op::LayerNormRows(x, eps) => {
                    let xv = self.nodes[x].value.clone();
                    let yv = self.nodes[id].value.clone();
                    let mut gx = Tensor::zeros(g.rows, g.cols);
                    let n = g.cols as f64;
                    for r in 0..g.rows {
                        let row = &xv.data[r * g.cols..(r + 1) * g.cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let y = &yv.data[r * g.cols..(r + 1) * g.cols];
                        let gr = &g.data[r * g.cols..(r + 1) * g.cols];
                        let gmean: f64 = gr.iter().sum::<f64>() / n;
                        let gydot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..g.cols {
                            gx.data[r * g.cols + c] = inv * (gr[c] - gmean - y[c] * gydot);
                        }
                    }
                    accumulate(&mut grads[x], &gx, corrupt);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pr = self.nodes[p].value.rows;
                        let cols = g.cols;
                        let slice = Tensor {
                            rows: pr,
                            cols,
                            data: g.data[offset * cols..(offset + pr) * cols].to_vec(),
                        };
                        accumulate(&mut grads[p], &slice, corrupt);
                        offset += pr;
                    }
                }
                Op::SelectRows(src, rows) => {
                    let cols = g.cols;
                    let mut gs = Tensor::zeros(self.nodes[src].value.rows, cols);
                    for (r, sel) in rows.iter().enumerate() {
                        if let Some(s) = sel {
                            for c in 0..cols {
                                gs.data[s * cols + c] += g.data[r * cols + c];
                            }
                        }
                    }
                    accumulate(&mut grads[src], &gs, corrupt);
                }
                Op::Sum(x) => {
                    let s = g.data[0];
                    let xv = &self.nodes[x].value;
                    let gx = Tensor { rows: xv.rows, cols: xv.cols, data: vec![s; xv.data.len()] };
                    accumulate(&mut grads[x], &gx, corrupt);
                }
                Op::FocalLoss { logits, labels, alpha, gamma } => {
                    let s = g.data[0];
                    let lv = self.nodes[logits].value.clone();
                    let mut gl = Tensor::zeros(lv.rows, lv.cols);
                    for (i, (&z, &y)) in lv.data.iter().zip(&labels).enumerate() {
                        let p = sigmoid_clamped(z);
                        gl.data[i] = s * focal_term_dp(p, y, alpha, gamma) * p * (1.0 - p);
                    }
                    accumulate(&mut grads[logits], &gl, corrupt);
                }
                Op::SmoothL1 { residuals, beta } => {
                    let s = g.data[0];
                    let rv = self.nodes[residuals].value.clone();
                    let mut gr = Tensor::zeros(rv.rows, rv.cols);
                    for (i, &x) in rv.data.iter().enumerate() {
                        gr.data[i] = s * if x.abs() < beta { x / beta } else { x.signum() };
                    }
                    accumulate(&mut grads[residuals], &gr, corrupt);
                }
            }
        }
        grads
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor, factor: f64) {
    debug_assert_eq!(dst.data.len(), src.data.len());
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += factor * s;
    }
}

fn sigmoid_clamped(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(1e-12, 1.0 - 1e-12)
}

/// Focal loss of one probability: -a(1-p)^g ln p for y = 1,
/// -(1-a) p^g ln(1-p) for y = 0.
pub fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y > 0.5 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn focal_term_dp(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y > 0.5 {
        alpha * (gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - (1.0 - p).powf(gamma) / p)
    } else {
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    }
}

/// Smooth-L1 of one residual: 0.5 x^2 / beta for |x| < beta, else |x| - beta/2.
pub fn smooth_l1_term(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}
