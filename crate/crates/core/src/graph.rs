//! A small eager reverse-mode autodiff tape over [`Mat`].
//!
//! The encoder, predictor and every loss are composed from the primitives
//! here, so one backward pass yields gradients for all trainable parameters,
//! and the whole stack can be verified against central finite differences
//! (see `trainer::grad_check`). Values are computed eagerly at node
//! creation; `backward` walks the tape in reverse.
//!
//! Nodes built from constants are never differentiated, which keeps frozen
//! encoders (EMA target, reference image encoder) cheap inside the same
//! graph code path as the trainable ones.

use crate::mat::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// How a Chamfer value is reduced over its nearest-neighbor terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChamferReduction {
    /// Plain sum of both directed terms.
    Sum,
    /// Sum divided by the total number of terms (|pred| + |target|).
    Mean,
}

enum Op<T> {
    Constant,
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// matrix + row vector broadcast over rows
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    ScaleConst(NodeId, T),
    /// matrix scaled by a 1x1 node
    ScaleNode(NodeId, NodeId),
    Transpose(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// column means: n×c -> 1×c
    MeanRows(NodeId),
    /// main diagonal of a square matrix as a column vector
    Diag(NodeId),
    Exp(NodeId),
    Neg(NodeId),
    Chamfer {
        pred: NodeId,
        target: Mat<T>,
        reduction: ChamferReduction,
        /// nearest target row per prediction row (forward term)
        nn_fwd: Vec<usize>,
        /// nearest prediction row per target row (backward term)
        nn_bwd: Vec<usize>,
    },
    MseToConst {
        pred: NodeId,
        target: Mat<T>,
    },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_EPS: f64 = 1e-20;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, m: Mat<T>) -> NodeId {
        self.push(m, Op::Constant, false)
    }

    pub fn scalar_const(&mut self, v: T) -> NodeId {
        self.constant(Mat::scalar(v))
    }

    /// Differentiable input; gradients are collected for leaves.
    pub fn leaf(&mut self, m: Mat<T>) -> NodeId {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// `a` (n×c) plus row vector `b` (1×c), broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1, "add_row rhs must be a row vector");
        assert_eq!(am.cols(), bm.cols(), "add_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for c in 0..row.len() {
                row[c] = row[c] + bm.get(0, c);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Hadamard(a, b), rg)
    }

    pub fn scale_const(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::ScaleConst(a, s), rg)
    }

    pub fn scale_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = self.value(a).scale(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(v, Op::ScaleNode(a, s), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu_value);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer norm with learnable gain/bias (both 1×c).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xm = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.rows(), 1);
        assert_eq!(b.rows(), 1);
        assert_eq!(g.cols(), xm.cols());
        assert_eq!(b.cols(), xm.cols());
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut v = Mat::zeros(xm.rows(), xm.cols());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let (mean, inv_std) = row_moments(row, eps);
            let out = v.row_mut(r);
            for c in 0..row.len() {
                let xn = (row[c] - mean) * inv_std;
                out[c] = g.get(0, c) * xn + b.get(0, c);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(v, Op::LayerNorm { x, gain, bias }, rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let mut v = Mat::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            softmax_into(am.row(r), v.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let mut v = Mat::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            let row = am.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for &x in row {
                sum = sum + (x - max).exp();
            }
            let lse = max + sum.ln();
            let out = v.row_mut(r);
            for c in 0..row.len() {
                out[c] = row[c] - lse;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let eps = T::from_f64(L2_NORM_EPS);
        let mut v = Mat::zeros(am.rows(), am.cols());
        for r in 0..am.rows() {
            let row = am.row(r);
            let n = smoothed_norm(row, eps);
            let out = v.row_mut(r);
            for c in 0..row.len() {
                out[c] = row[c] / n;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::L2NormalizeRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                let src = pm.row(r);
                let dst = &mut v.row_mut(r)[at..at + src.len()];
                dst.copy_from_slice(src);
            }
            at += pm.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start, end), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start, end), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let v = self.value(a).gather_rows(idx);
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Mat::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let v = Mat::scalar(am.sum() / T::from_usize(am.len()));
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let n = T::from_usize(am.rows());
        let mut v = Mat::zeros(1, am.cols());
        for r in 0..am.rows() {
            let row = am.row(r);
            let out = v.row_mut(0);
            for c in 0..row.len() {
                out[c] = out[c] + row[c] / n;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn diag(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        assert_eq!(am.rows(), am.cols(), "diag requires a square matrix");
        let mut v = Mat::zeros(am.rows(), 1);
        for r in 0..am.rows() {
            v.set(r, 0, am.get(r, r));
        }
        let rg = self.rg(a);
        self.push(v, Op::Diag(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    /// Symmetric nearest-neighbor squared-distance loss of `pred` (node)
    /// against a constant target set. Gradients flow only into `pred`; the
    /// nearest-neighbor assignment is fixed at forward time.
    pub fn chamfer_to_const(
        &mut self,
        pred: NodeId,
        target: Mat<T>,
        reduction: ChamferReduction,
    ) -> NodeId {
        let pm = self.value(pred);
        assert!(pm.rows() > 0 && target.rows() > 0, "chamfer needs non-empty sets");
        assert_eq!(pm.cols(), target.cols(), "chamfer dim mismatch");
        let mut nn_fwd = vec![0usize; pm.rows()];
        let mut nn_bwd = vec![0usize; target.rows()];
        let mut total = T::zero();
        for i in 0..pm.rows() {
            let mut best = T::infinity();
            for j in 0..target.rows() {
                let d = pm.row_sqdist(i, &target, j);
                if d < best {
                    best = d;
                    nn_fwd[i] = j;
                }
            }
            total = total + best;
        }
        for j in 0..target.rows() {
            let mut best = T::infinity();
            for i in 0..pm.rows() {
                let d = target.row_sqdist(j, pm, i);
                if d < best {
                    best = d;
                    nn_bwd[j] = i;
                }
            }
            total = total + best;
        }
        if reduction == ChamferReduction::Mean {
            total = total / T::from_usize(pm.rows() + target.rows());
        }
        let rg = self.rg(pred);
        self.push(
            Mat::scalar(total),
            Op::Chamfer {
                pred,
                target,
                reduction,
                nn_fwd,
                nn_bwd,
            },
            rg,
        )
    }

    /// Mean over all elements of squared differences against a constant
    /// target of the same shape.
    pub fn mse_to_const(&mut self, pred: NodeId, target: Mat<T>) -> NodeId {
        let pm = self.value(pred);
        assert_eq!(pm.shape(), target.shape(), "mse shape mismatch");
        let mut total = T::zero();
        for (p, t) in pm.as_slice().iter().zip(target.as_slice()) {
            let d = *p - *t;
            total = total + d * d;
        }
        let v = Mat::scalar(total / T::from_usize(pm.len()));
        let rg = self.rg(pred);
        self.push(v, Op::MseToConst { pred, target }, rg)
    }

    /// Reverse pass from a 1×1 loss node. Returns per-node gradients for
    /// every node that requires grad and participated.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Mat<T>>], id: NodeId, delta: Mat<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                assert_eq!(g.shape(), delta.shape());
                g.add_scaled(&delta, T::one());
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, id: usize, grad: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &self.nodes[id].op {
            Op::Constant | Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, grad.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, self.value(*a).matmul_tn(grad));
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, grad.clone());
                self.add_grad(grads, *b, grad.clone());
            }
            Op::AddRow(a, b) => {
                self.add_grad(grads, *a, grad.clone());
                if self.rg(*b) {
                    let mut db = Mat::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        let row = grad.row(r);
                        let out = db.row_mut(0);
                        for c in 0..row.len() {
                            out[c] = out[c] + row[c];
                        }
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, grad.clone());
                if self.rg(*b) {
                    self.add_grad(grads, *b, grad.map(|x| -x));
                }
            }
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, grad.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, grad.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::ScaleConst(a, s) => {
                self.add_grad(grads, *a, grad.scale(*s));
            }
            Op::ScaleNode(a, s) => {
                let sv = self.value(*s).item();
                if self.rg(*a) {
                    self.add_grad(grads, *a, grad.scale(sv));
                }
                if self.rg(*s) {
                    let mut acc = T::zero();
                    for (g, x) in grad.as_slice().iter().zip(self.value(*a).as_slice()) {
                        acc = acc + *g * *x;
                    }
                    self.add_grad(grads, *s, Mat::scalar(acc));
                }
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, grad.transpose());
            }
            Op::Gelu(a) => {
                self.add_grad(
                    grads,
                    *a,
                    grad.zip_map(self.value(*a), |g, x| g * gelu_derivative(x)),
                );
            }
            Op::LayerNorm { x, gain, bias } => {
                let xm = self.value(*x);
                let g = self.value(*gain);
                let eps = T::from_f64(LAYER_NORM_EPS);
                let cols = xm.cols();
                let inv_n = T::one() / T::from_usize(cols);
                let mut dx = Mat::zeros(xm.rows(), cols);
                let mut dgain = Mat::zeros(1, cols);
                let mut dbias = Mat::zeros(1, cols);
                for r in 0..xm.rows() {
                    let row = xm.row(r);
                    let (mean, inv_std) = row_moments(row, eps);
                    let gr = grad.row(r);
                    // dxn = dy * gain; accumulate dgain/dbias along the way.
                    let mut sum_dxn = T::zero();
                    let mut sum_dxn_xn = T::zero();
                    let mut xn = vec![T::zero(); cols];
                    let mut dxn = vec![T::zero(); cols];
                    for c in 0..cols {
                        xn[c] = (row[c] - mean) * inv_std;
                        dxn[c] = gr[c] * g.get(0, c);
                        sum_dxn = sum_dxn + dxn[c];
                        sum_dxn_xn = sum_dxn_xn + dxn[c] * xn[c];
                        dgain.set(0, c, dgain.get(0, c) + gr[c] * xn[c]);
                        dbias.set(0, c, dbias.get(0, c) + gr[c]);
                    }
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        out[c] = inv_std
                            * (dxn[c] - sum_dxn * inv_n - xn[c] * sum_dxn_xn * inv_n);
                    }
                }
                self.add_grad(grads, *x, dx);
                if self.rg(*gain) {
                    self.add_grad(grads, *gain, dgain);
                }
                if self.rg(*bias) {
                    self.add_grad(grads, *bias, dbias);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = grad.row(r);
                    let mut dot = T::zero();
                    for c in 0..yr.len() {
                        dot = dot + yr[c] * gr[c];
                    }
                    let out = dx.row_mut(r);
                    for c in 0..yr.len() {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = grad.row(r);
                    let mut gsum = T::zero();
                    for &g in gr {
                        gsum = gsum + g;
                    }
                    let out = dx.row_mut(r);
                    for c in 0..yr.len() {
                        out[c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::L2NormalizeRows(a) => {
                let xm = self.value(*a);
                let eps = T::from_f64(L2_NORM_EPS);
                let mut dx = Mat::zeros(xm.rows(), xm.cols());
                for r in 0..xm.rows() {
                    let row = xm.row(r);
                    let n = smoothed_norm(row, eps);
                    let n3 = n * n * n;
                    let gr = grad.row(r);
                    let mut dot = T::zero();
                    for c in 0..row.len() {
                        dot = dot + gr[c] * row[c];
                    }
                    let out = dx.row_mut(r);
                    for c in 0..row.len() {
                        out[c] = gr[c] / n - row[c] * dot / n3;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        self.add_grad(grads, p, grad.slice_rows(at, at + rows));
                    }
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.rg(p) {
                        self.add_grad(grads, p, grad.slice_cols(at, at + cols));
                    }
                    at += cols;
                }
            }
            Op::SliceRows(a, start, _end) => {
                let am = self.value(*a);
                let mut da = Mat::zeros(am.rows(), am.cols());
                for r in 0..grad.rows() {
                    da.row_mut(start + r).copy_from_slice(grad.row(r));
                }
                self.add_grad(grads, *a, da);
            }
            Op::SliceCols(a, start, _end) => {
                let am = self.value(*a);
                let mut da = Mat::zeros(am.rows(), am.cols());
                for r in 0..grad.rows() {
                    let src = grad.row(r);
                    let dst = &mut da.row_mut(r)[*start..*start + src.len()];
                    dst.copy_from_slice(src);
                }
                self.add_grad(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let am = self.value(*a);
                let mut da = Mat::zeros(am.rows(), am.cols());
                for (i, &src_row) in idx.iter().enumerate() {
                    let gr = grad.row(i);
                    let dst = da.row_mut(src_row);
                    for c in 0..gr.len() {
                        dst[c] = dst[c] + gr[c];
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::SumAll(a) => {
                let g = grad.item();
                let am = self.value(*a);
                self.add_grad(grads, *a, Mat::from_fn(am.rows(), am.cols(), |_, _| g));
            }
            Op::MeanAll(a) => {
                let am = self.value(*a);
                let g = grad.item() / T::from_usize(am.len());
                self.add_grad(grads, *a, Mat::from_fn(am.rows(), am.cols(), |_, _| g));
            }
            Op::MeanRows(a) => {
                let am = self.value(*a);
                let inv_n = T::one() / T::from_usize(am.rows());
                let mut da = Mat::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let out = da.row_mut(r);
                    let gr = grad.row(0);
                    for c in 0..out.len() {
                        out[c] = gr[c] * inv_n;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::Diag(a) => {
                let am = self.value(*a);
                let mut da = Mat::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    da.set(r, r, grad.get(r, 0));
                }
                self.add_grad(grads, *a, da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                self.add_grad(grads, *a, grad.zip_map(y, |g, e| g * e));
            }
            Op::Neg(a) => {
                self.add_grad(grads, *a, grad.map(|x| -x));
            }
            Op::Chamfer {
                pred,
                target,
                reduction,
                nn_fwd,
                nn_bwd,
            } => {
                let pm = self.value(*pred);
                let scale = match reduction {
                    ChamferReduction::Sum => T::one(),
                    ChamferReduction::Mean => {
                        T::one() / T::from_usize(pm.rows() + target.rows())
                    }
                };
                let g = grad.item() * scale;
                let two = T::from_f64(2.0);
                let mut dp = Mat::zeros(pm.rows(), pm.cols());
                for i in 0..pm.rows() {
                    let j = nn_fwd[i];
                    let p = pm.row(i);
                    let t = target.row(j);
                    let out = dp.row_mut(i);
                    for c in 0..p.len() {
                        out[c] = out[c] + g * two * (p[c] - t[c]);
                    }
                }
                for (j, &i) in nn_bwd.iter().enumerate() {
                    let p = pm.row(i);
                    let t = target.row(j);
                    let out = dp.row_mut(i);
                    for c in 0..p.len() {
                        out[c] = out[c] + g * two * (p[c] - t[c]);
                    }
                }
                self.add_grad(grads, *pred, dp);
            }
            Op::MseToConst { pred, target } => {
                let pm = self.value(*pred);
                let g = grad.item() * T::from_f64(2.0) / T::from_usize(pm.len());
                let dp = pm.zip_map(target, |p, t| g * (p - t));
                self.add_grad(grads, *pred, dp);
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for a leaf, or zeros if the leaf never reached the loss.
    pub fn get_or_zeros(&self, id: NodeId, like: &Mat<T>) -> Mat<T> {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Mat::zeros(like.rows(), like.cols()),
        }
    }
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len());
    let mut mean = T::zero();
    for &x in row {
        mean = mean + x;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &x in row {
        let d = x - mean;
        var = var + d * d;
    }
    var = var / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn smoothed_norm<T: Scalar>(row: &[T], eps: T) -> T {
    let mut sq = T::zero();
    for &x in row {
        sq = sq + x * x;
    }
    (sq + eps).sqrt()
}

fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{next_gaussian, rng_for};

    /// Central finite differences of `build` with respect to every entry of
    /// every input matrix; compares against analytic gradients.
    fn fd_check(
        inputs: &[Mat<f64>],
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    ) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);

        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(ids[k], input);
            for i in 0..input.len() {
                let mut perturbed = inputs.to_vec();
                perturbed[k].as_mut_slice()[i] += eps;
                let mut gp = Graph::new();
                let idp: Vec<NodeId> = perturbed.iter().map(|m| gp.leaf(m.clone())).collect();
                let loss_p = build(&mut gp, &idp);
                let plus = gp.value(loss_p).item();

                perturbed[k].as_mut_slice()[i] -= 2.0 * eps;
                let mut gm = Graph::new();
                let idm: Vec<NodeId> = perturbed.iter().map(|m| gm.leaf(m.clone())).collect();
                let loss_m = build(&mut gm, &idm);
                let minus = gm.value(loss_m).item();

                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic.as_slice()[i];
                let denom = (a.abs() + numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {k} coord {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    fn rand_mat(rows: usize, cols: usize, salt: u64) -> Mat<f64> {
        let mut rng = rng_for(0x6772_6164, salt);
        Mat::from_fn(rows, cols, |_, _| next_gaussian(&mut rng) * 0.7)
    }

    #[test]
    fn matmul_chain_gradients() {
        fd_check(
            &[rand_mat(3, 4, 1), rand_mat(4, 2, 2)],
            |g, ids| {
                let c = g.matmul(ids[0], ids[1]);
                let h = g.hadamard(c, c);
                g.mean_all(h)
            },
        );
    }

    #[test]
    fn broadcast_scale_transpose_gradients() {
        fd_check(
            &[rand_mat(3, 4, 3), rand_mat(1, 4, 4), Mat::scalar(0.37)],
            |g, ids| {
                let a = g.add_row(ids[0], ids[1]);
                let s = g.exp(ids[2]);
                let b = g.scale_node(a, s);
                let t = g.transpose(b);
                let sq = g.hadamard(t, t);
                g.sum_all(sq)
            },
        );
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        fd_check(&[rand_mat(3, 5, 5)], |g, ids| {
            let s = g.softmax_rows(ids[0]);
            let l = g.log_softmax_rows(ids[0]);
            let s3 = g.slice_cols(s, 0, 3);
            let l3 = g.slice_cols(l, 0, 3);
            let sq = g.add(s3, l3);
            let d = g.diag(sq);
            g.mean_all(d)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        fd_check(
            &[rand_mat(4, 6, 6), rand_mat(1, 6, 7), rand_mat(1, 6, 8)],
            |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2]);
                let sq = g.hadamard(y, y);
                g.mean_all(sq)
            },
        );
    }

    #[test]
    fn gelu_and_normalize_gradients() {
        fd_check(&[rand_mat(3, 5, 9)], |g, ids| {
            let a = g.gelu(ids[0]);
            let n = g.l2_normalize_rows(a);
            // Weight coordinates unevenly; the plain squared norm of unit
            // rows is constant and would have zero gradient.
            let w = g.constant(rand_mat(3, 5, 90));
            let s = g.hadamard(n, w);
            g.sum_all(s)
        });
    }

    #[test]
    fn concat_slice_gather_gradients() {
        fd_check(
            &[rand_mat(2, 3, 10), rand_mat(3, 3, 11)],
            |g, ids| {
                let cat = g.concat_rows(&[ids[0], ids[1]]);
                let gathered = g.gather_rows(cat, &[0, 4, 2, 0]);
                let cols = g.concat_cols(&[gathered, gathered]);
                let sl = g.slice_rows(cols, 1, 4);
                let sq = g.hadamard(sl, sl);
                g.mean_all(sq)
            },
        );
    }

    #[test]
    fn mean_rows_and_diag_gradients() {
        fd_check(&[rand_mat(4, 4, 12)], |g, ids| {
            let m = g.mean_rows(ids[0]);
            let d = g.diag(ids[0]);
            let dt = g.transpose(d);
            let s = g.add(m, dt);
            let sq = g.hadamard(s, s);
            g.sum_all(sq)
        });
    }

    #[test]
    fn chamfer_gradients_and_value() {
        let pred = Mat::from_vec(1, 2, vec![0.0, 0.0]);
        let target = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]);
        let mut g = Graph::new();
        let p = g.leaf(pred.clone());
        let loss = g.chamfer_to_const(p, target.clone(), ChamferReduction::Sum);
        assert_eq!(g.value(loss).item(), 6.0);

        fd_check(&[rand_mat(4, 3, 13)], |g, ids| {
            g.chamfer_to_const(ids[0], rand_mat(5, 3, 14), ChamferReduction::Sum)
        });
        fd_check(&[rand_mat(3, 3, 15)], |g, ids| {
            g.chamfer_to_const(ids[0], rand_mat(4, 3, 16), ChamferReduction::Mean)
        });
    }

    #[test]
    fn mse_gradients() {
        fd_check(&[rand_mat(3, 4, 17)], |g, ids| {
            g.mse_to_const(ids[0], rand_mat(3, 4, 18))
        });
    }

    #[test]
    fn constants_are_not_differentiated() {
        let mut g: Graph<f64> = Graph::new();
        let c = g.constant(rand_mat(2, 2, 19));
        let l = g.leaf(rand_mat(2, 2, 20));
        let prod = g.matmul(c, l);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(l).is_some());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // y = x + x => dy/dx = 2
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Mat::scalar(3.0));
        let y = g.add(x, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }
}
