//! Eager reverse-mode differentiation over a fixed op set.
//!
//! Every forward op appends a node holding its computed value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for the leaves. The op
//! set is exactly what the rescoring head and the two matchers need — this is
//! not a general autodiff engine.

use super::matrix::{softmax_row, Matrix};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One negative-log-likelihood term over a score row: weight ×
/// (logsumexp(row) − row[target]).
#[derive(Debug, Clone)]
pub struct NllTerm {
    pub row: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulTransB(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// matrix + bias row broadcast over rows
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    AppendZeroCol(Var),
    AssocNll(Var, Vec<NllTerm>),
    FocalLossSigmoid {
        logits: Var,
        positive: Vec<bool>,
        alpha: f64,
        gamma: f64,
    },
    AddScaled(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-6;
const PROB_CLAMP: f64 = 1e-7;

/// Records a forward pass; values are computed eagerly.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).rows() * self.value(v).cols(), 1);
        self.value(v).data()[0]
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_transpose_b(self.value(b))?;
        Ok(self.push(v, Op::MatMulTransB(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let m = self.value(a);
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != m.cols() {
            return Err(Error::dim("add_row_broadcast", "bias must be 1×cols"));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let p = softmax_row(m.row(r))?;
            out.row_mut(r).copy_from_slice(&p);
        }
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// Per-row standardization to zero mean, unit variance (no affine terms).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let row = m.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a))
    }

    /// Select rows by index; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(idx.len(), m.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(m.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        debug_assert!(start + len <= m.cols());
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            if m.rows() != rows {
                return Err(Error::dim("concat_cols", "row count mismatch"));
            }
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Appends the fixed-zero null column to a raw score matrix.
    pub fn append_zero_col(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), m.cols() + 1);
        for r in 0..m.rows() {
            out.row_mut(r)[..m.cols()].copy_from_slice(m.row(r));
        }
        self.push(out, Op::AppendZeroCol(a))
    }

    /// Sum of weighted `−log softmax(row)[target]` terms over rows of a score
    /// matrix. Returns a 1×1 scalar node.
    pub fn assoc_nll(&mut self, scores: Var, terms: Vec<NllTerm>) -> Var {
        let m = self.value(scores);
        let mut total = 0.0;
        for t in &terms {
            let row = m.row(t.row);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            total += t.weight * (lse - row[t.target]);
        }
        self.push(
            Matrix::from_vec(1, 1, vec![total]).unwrap(),
            Op::AssocNll(scores, terms),
        )
    }

    /// Focal loss over per-row logits (n×1), summed. Probabilities are
    /// sigmoid(logit) clamped to [1e-7, 1−1e-7].
    pub fn focal_loss_sigmoid(
        &mut self,
        logits: Var,
        positive: Vec<bool>,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let m = self.value(logits);
        if m.cols() != 1 || m.rows() != positive.len() {
            return Err(Error::dim("focal_loss_sigmoid", "logits must be n×1"));
        }
        let mut total = 0.0;
        for (i, &pos) in positive.iter().enumerate() {
            let p = sigmoid(m.data()[i]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total += focal_term(p, pos, alpha, gamma);
        }
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![total]).unwrap(),
            Op::FocalLossSigmoid {
                logits,
                positive,
                alpha,
                gamma,
            },
        ))
    }

    /// Weighted sum of 1×1 scalar nodes.
    pub fn add_scaled(&mut self, parts: Vec<(Var, f64)>) -> Var {
        let total: f64 = parts.iter().map(|(v, w)| self.scalar(*v) * w).sum();
        self.push(Matrix::from_vec(1, 1, vec![total]).unwrap(), Op::AddScaled(parts))
    }

    /// Smallest |x| fed into any ReLU on this tape; infinite when none.
    /// Finite-difference probes use this to reject fixtures whose kinks sit
    /// within the probe step.
    pub fn min_abs_relu_input(&self) -> f64 {
        let mut min = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu(a) = &node.op {
                for v in self.value(*a).data() {
                    min = min.min(v.abs());
                }
            }
        }
        min
    }

    /// Gradients for the requested nodes; zero matrices where no gradient
    /// flowed.
    pub fn gradients_for(&self, loss: Var, wanted: &[Var]) -> Result<Vec<Matrix>> {
        let grads = self.backward(loss)?;
        Ok(wanted
            .iter()
            .map(|v| {
                grads[v.0].clone().unwrap_or_else(|| {
                    let m = self.value(*v);
                    Matrix::zeros(m.rows(), m.cols())
                })
            })
            .collect())
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    /// Entry `i` is `None` when no gradient flowed to node `i`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        let lv = self.value(loss);
        if lv.rows() * lv.cols() != 1 {
            return Err(Error::InvalidArgument("backward target must be scalar".into()));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA = g·Bᵀ, dB = Aᵀ·g
                let da = g.matmul_transpose_b(self.value(*b)).unwrap();
                let db = self.value(*a).transpose().matmul(g).unwrap();
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::MatMulTransB(a, b) => {
                // C = A·Bᵀ: dA = g·B, dB = gᵀ·A
                let da = g.matmul(self.value(*b)).unwrap();
                let db = g.transpose().matmul(self.value(*a)).unwrap();
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::Transpose(a) => {
                self.add_grad(grads, *a, g.transpose());
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::AddRowBroadcast(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.add_grad(grads, *bias, db);
            }
            Op::Scale(a, c) => {
                self.add_grad(grads, *a, g.scale(*c));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut da = g.clone();
                for (d, xv) in da.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = y * (gv - dot);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::LayerNormRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for ((d, gv), yv) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for (r, &i_src) in idx.iter().enumerate() {
                    for (o, v) in da.row_mut(i_src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::SliceCols(a, start, len) => {
                let src = self.value(*a);
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                self.add_grad(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let m = self.value(*p);
                    let mut dp = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + m.cols()]);
                    }
                    off += m.cols();
                    self.add_grad(grads, *p, dp);
                }
            }
            Op::AppendZeroCol(a) => {
                let src = self.value(*a);
                let mut da = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..src.cols()]);
                }
                self.add_grad(grads, *a, da);
            }
            Op::AssocNll(scores, terms) => {
                let gs = g.data()[0];
                let m = self.value(*scores);
                let mut da = Matrix::zeros(m.rows(), m.cols());
                for t in terms {
                    let p = softmax_row(m.row(t.row)).unwrap();
                    let dr = da.row_mut(t.row);
                    for (j, pj) in p.iter().enumerate() {
                        dr[j] += gs * t.weight * pj;
                    }
                    dr[t.target] -= gs * t.weight;
                }
                self.add_grad(grads, *scores, da);
            }
            Op::FocalLossSigmoid {
                logits,
                positive,
                alpha,
                gamma,
            } => {
                let gs = g.data()[0];
                let m = self.value(*logits);
                let mut da = Matrix::zeros(m.rows(), 1);
                for (i, &pos) in positive.iter().enumerate() {
                    let raw = sigmoid(m.data()[i]);
                    // clamp saturates the loss; no gradient past the clamp
                    if raw <= PROB_CLAMP || raw >= 1.0 - PROB_CLAMP {
                        continue;
                    }
                    let dp = focal_term_dp(raw, pos, *alpha, *gamma);
                    da.data_mut()[i] = gs * dp * raw * (1.0 - raw);
                }
                self.add_grad(grads, *logits, da);
            }
            Op::AddScaled(parts) => {
                let gs = g.data()[0];
                for (v, w) in parts {
                    self.add_grad(grads, *v, Matrix::from_vec(1, 1, vec![gs * w]).unwrap());
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One focal-loss term on a clamped probability.
pub(crate) fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn focal_term_dp(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        -alpha * (-gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() + (1.0 - p).powf(gamma) / p)
    } else {
        -(1.0 - alpha)
            * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_gradient_is_input_structure() {
        // loss = sum(W·x): dW = 1·xᵀ replicated over rows
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 3.0]]).unwrap());
        let x = tape.leaf(Matrix::from_rows(&[vec![4.0], vec![7.0]]).unwrap());
        let wx = tape.matmul(w, x).unwrap();
        // sum via ones row: 1×2 · (2×1) = scalar
        let ones = tape.leaf(Matrix::row_vector(&[1.0, 1.0]));
        let loss = tape.matmul(ones, wx).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dw = grads[0].as_ref().unwrap();
        assert_eq!(dw.data(), &[4.0, 7.0, 4.0, 7.0]);
    }

    #[test]
    fn zero_weight_term_contributes_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        let b = tape.leaf(Matrix::from_vec(1, 1, vec![5.0]).unwrap());
        let loss = tape.add_scaled(vec![(a, 2.0), (b, 0.0)]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().data(), &[2.0]);
        assert_eq!(grads[1].as_ref().unwrap().data(), &[0.0]);
    }

    #[test]
    fn assoc_nll_matches_plain_computation() {
        let mut tape = Tape::new();
        let s = tape.leaf(Matrix::from_rows(&[vec![1.0, -0.5, 0.0], vec![0.2, 0.4, 0.0]]).unwrap());
        let loss = tape.assoc_nll(
            s,
            vec![
                NllTerm { row: 0, target: 0, weight: 1.0 },
                NllTerm { row: 1, target: 2, weight: 1.0 },
            ],
        );
        let p0 = softmax_row(&[1.0, -0.5, 0.0]).unwrap();
        let p1 = softmax_row(&[0.2, 0.4, 0.0]).unwrap();
        let expect = -p0[0].ln() - p1[2].ln();
        assert_relative_eq!(tape.scalar(loss), expect, max_relative = 1e-12);
    }

    #[test]
    fn focal_values_direct() {
        // positive p=0.5: 0.25·0.25·ln2; negative p=0.5: 0.75·0.25·ln2
        let ln2 = std::f64::consts::LN_2;
        assert_relative_eq!(focal_term(0.5, true, 0.25, 2.0), 0.25 * 0.25 * ln2, max_relative = 1e-12);
        assert_relative_eq!(focal_term(0.5, false, 0.25, 2.0), 0.75 * 0.25 * ln2, max_relative = 1e-12);
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut tape = Tape::new();
        let v = tape.leaf(Matrix::from_vec(1, 1, vec![f64::INFINITY]).unwrap());
        assert!(tape.backward(v).is_err());
    }
}
