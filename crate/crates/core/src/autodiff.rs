//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! The forward pass records each operation on a [`Tape`]; [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints. Loss nodes carry the
//! closed-form gradients computed by [`crate::losses`] and
//! [`crate::concept::mi_hash_loss_grad`], so the tape and the standalone loss
//! functions share one implementation.

use crate::error::Result;
use crate::losses;
use crate::numerics::{masked_softmax, sigmoid, RealMatrix};

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
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    /// `a^T * b`
    TMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a [n x m] + b [1 x m]`
    AddRow(Var, Var),
    /// `a [n x m] / b [1 x m]`
    DivRow(Var, Var),
    /// `a [n x m] * b [n x 1]`
    MulCol(Var, Var),
    /// `a [n x m] / b [n x 1]`
    DivCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    DiagScan { lambda: Var, drive: Var },
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    /// Causal attention over the last `window` positions; caches the
    /// `[n x window]` weights, column `o` holding offset `o`.
    LocalAttention { q: Var, k: Var, v: Var, scale: f64, weights: RealMatrix },
    /// Scalar loss with a cached local gradient per input.
    Loss(Vec<(Var, RealMatrix)>),
}

#[derive(Debug)]
struct Node {
    value: RealMatrix,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<RealMatrix>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero-filled when `v` did not influence
    /// the output.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> RealMatrix {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| RealMatrix::zeros(shape.0, shape.1))
    }

    pub fn get(&self, v: Var) -> Option<&RealMatrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &RealMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: RealMatrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: RealMatrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: RealMatrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn t_matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t_matmul(self.value(b));
        self.push(v, Op::TMatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "add_row shape");
        let v = RealMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + r.get(0, j));
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn div_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.shape(), (1, x.cols()), "div_row shape");
        let v = RealMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / r.get(0, j));
        self.push(v, Op::DivRow(a, row), &[a, row])
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (x.rows(), 1), "mul_col shape");
        let v = RealMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * c.get(i, 0));
        self.push(v, Op::MulCol(a, col), &[a, col])
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (x.rows(), 1), "div_col shape");
        let v = RealMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / c.get(i, 0));
        self.push(v, Op::DivCol(a, col), &[a, col])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    /// Row-wise softmax. Entries where `mask` is false get exact zeros and a
    /// fully masked row is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let (n, m) = x.shape();
        let mut out = RealMatrix::zeros(n, m);
        let all = vec![true; m];
        for r in 0..n {
            let row_mask = mask.map_or(&all[..], |mk| &mk[r * m..(r + 1) * m]);
            out.row_mut(r).copy_from_slice(&masked_softmax(x.row(r), row_mask));
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Causal softmax attention in which row `t` sees keys `t - window + 1 ..= t`.
    /// Costs `O(n window d)` instead of the dense `O(n^2 d)`.
    pub fn local_attention(&mut self, q: Var, k: Var, v: Var, window: usize, scale: f64) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let n = qm.rows();
        let w = window.clamp(1, n.max(1));
        let mut weights = RealMatrix::zeros(n, w);
        let mut out = RealMatrix::zeros(n, vm.cols());
        let mut logits = vec![0.0; w];
        for t in 0..n {
            let span = w.min(t + 1);
            for (o, l) in logits.iter_mut().enumerate().take(span) {
                *l = scale * crate::numerics::dot(qm.row(t), km.row(t - o));
            }
            let a = crate::numerics::softmax_stable(&logits[..span], 1.0).unwrap_or_else(|_| vec![f64::NAN; span]);
            for (o, &ao) in a.iter().enumerate() {
                weights.set(t, o, ao);
                for (y, x) in out.row_mut(t).iter_mut().zip(vm.row(t - o)) {
                    *y += ao * x;
                }
            }
        }
        self.push(out, Op::LocalAttention { q, k, v, scale, weights }, &[q, k, v])
    }

    /// `n x m -> n x 1`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = RealMatrix::from_fn(x.rows(), 1, |r, _| x.row(r).iter().sum());
        self.push(v, Op::SumRows(a), &[a])
    }

    /// `n x m -> 1 x m`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut acc = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (s, v) in acc.iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        self.push(RealMatrix::row_vector(&acc), Op::SumCols(a), &[a])
    }

    /// Mean over rows, `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows() as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = RealMatrix::from_raw(1, 1, vec![self.value(a).sum()]);
        self.push(v, Op::SumAll(a), &[a])
    }

    /// Diagonal linear recurrence `s_t = lambda ⊙ s_{t-1} + drive_t`, `s_0 = 0`.
    pub fn diag_scan(&mut self, lambda: Var, drive: Var) -> Var {
        let (l, u) = (self.value(lambda), self.value(drive));
        assert_eq!(l.shape(), (1, u.cols()), "diag_scan lambda shape");
        let (n, ds) = u.shape();
        let mut s = RealMatrix::zeros(n, ds);
        let mut prev = vec![0.0; ds];
        for t in 0..n {
            let row = s.row_mut(t);
            for i in 0..ds {
                row[i] = l.get(0, i) * prev[i] + u.get(t, i);
            }
            prev.copy_from_slice(row);
        }
        self.push(s, Op::DiagScan { lambda, drive }, &[lambda, drive])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).concat_cols(self.value(b));
        self.push(v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Stacks `1 x m` rows (or taller blocks) vertically.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "stack_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let v = RealMatrix::from_raw(rows, cols, data);
        self.push(v, Op::StackRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    /// Records a scalar loss whose local gradients were computed in closed
    /// form alongside its value.
    pub fn loss(&mut self, value: f64, local: Vec<(Var, RealMatrix)>) -> Var {
        let inputs: Vec<Var> = local.iter().map(|(v, _)| *v).collect();
        for (v, g) in &local {
            debug_assert_eq!(self.value(*v).shape(), g.shape());
        }
        self.push(
            RealMatrix::from_raw(1, 1, vec![value]),
            Op::Loss(local),
            &inputs,
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (v, g) = losses::task_loss_grad(self.value(logits), labels)?;
        Ok(self.loss(v, vec![(logits, g)]))
    }

    pub fn info_nce(&mut self, reps: Var, labels: &[usize], tau: f64) -> Result<Var> {
        let (v, g) = losses::info_nce_grad(self.value(reps), labels, tau)?;
        Ok(self.loss(v, vec![(reps, g)]))
    }

    pub fn redundancy(&mut self, h: Var, r: Var) -> Result<Var> {
        let (v, gh, gr) = losses::redundancy_loss_grad(self.value(h), self.value(r))?;
        Ok(self.loss(v, vec![(h, gh), (r, gr)]))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<RealMatrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(RealMatrix::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<RealMatrix>], v: Var, g: RealMatrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &RealMatrix, grads: &mut [Option<RealMatrix>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // c = a b^T: da = g b, db = g^T a
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.t_matmul(val(*a)));
                }
            }
            Op::TMatMul(a, b) => {
                // c = a^T b: da = b g^T, db = a g
                if wants(*a) {
                    self.accumulate(grads, *a, val(*b).matmul_t(g));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).matmul(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(val(*b)));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(val(*a)));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*row) {
                    self.accumulate(grads, *row, col_sums(g));
                }
            }
            Op::DivRow(a, row) => {
                let r = val(*row);
                if wants(*a) {
                    let ga = RealMatrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) / r.get(0, j));
                    self.accumulate(grads, *a, ga);
                }
                if wants(*row) {
                    let out = &node.value;
                    let gr = RealMatrix::from_fn(1, g.cols(), |_, j| {
                        -(0..g.rows()).map(|i| g.get(i, j) * out.get(i, j)).sum::<f64>() / r.get(0, j)
                    });
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(a, col) => {
                let (x, c) = (val(*a), val(*col));
                if wants(*a) {
                    let ga = RealMatrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * c.get(i, 0));
                    self.accumulate(grads, *a, ga);
                }
                if wants(*col) {
                    let gc = RealMatrix::from_fn(g.rows(), 1, |i, _| {
                        crate::numerics::dot(g.row(i), x.row(i))
                    });
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::DivCol(a, col) => {
                let c = val(*col);
                if wants(*a) {
                    let ga = RealMatrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) / c.get(i, 0));
                    self.accumulate(grads, *a, ga);
                }
                if wants(*col) {
                    let out = &node.value;
                    let gc = RealMatrix::from_fn(g.rows(), 1, |i, _| {
                        -crate::numerics::dot(g.row(i), out.row(i)) / c.get(i, 0)
                    });
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(&node.value, |gi, y| if y > 0.0 { gi / (2.0 * y) } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = RealMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = crate::numerics::dot(g.row(r), y.row(r));
                    for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = y.get(r, c) * (g.get(r, c) - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LocalAttention { q, k, v, scale, weights } => {
                let (qm, km, vm) = (val(*q), val(*k), val(*v));
                let n = qm.rows();
                let mut gq = RealMatrix::zeros(n, qm.cols());
                let mut gk = RealMatrix::zeros(km.rows(), km.cols());
                let mut gv = RealMatrix::zeros(vm.rows(), vm.cols());
                let mut da = vec![0.0; weights.cols()];
                for t in 0..n {
                    let span = weights.cols().min(t + 1);
                    let mut inner = 0.0;
                    for o in 0..span {
                        da[o] = crate::numerics::dot(g.row(t), vm.row(t - o));
                        inner += weights.get(t, o) * da[o];
                    }
                    for o in 0..span {
                        let a = weights.get(t, o);
                        for (gvj, gj) in gv.row_mut(t - o).iter_mut().zip(g.row(t)) {
                            *gvj += a * gj;
                        }
                        let dl = scale * a * (da[o] - inner);
                        for (gqj, kj) in gq.row_mut(t).iter_mut().zip(km.row(t - o)) {
                            *gqj += dl * kj;
                        }
                        for (gkj, qj) in gk.row_mut(t - o).iter_mut().zip(qm.row(t)) {
                            *gkj += dl * qj;
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let ga = RealMatrix::from_fn(x.rows(), x.cols(), |i, _| g.get(i, 0));
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let ga = RealMatrix::from_fn(x.rows(), x.cols(), |_, j| g.get(0, j));
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, RealMatrix::filled(x.rows(), x.cols(), g.get(0, 0)));
            }
            Op::DiagScan { lambda, drive } => {
                let l = val(*lambda);
                let s = &node.value;
                let (n, ds) = s.shape();
                let mut adj = RealMatrix::zeros(n, ds);
                let mut gl = vec![0.0; ds];
                let mut carry = vec![0.0; ds];
                for t in (0..n).rev() {
                    for i in 0..ds {
                        let a = g.get(t, i) + carry[i];
                        adj.set(t, i, a);
                        if t > 0 {
                            gl[i] += a * s.get(t - 1, i);
                        }
                        carry[i] = l.get(0, i) * a;
                    }
                }
                if wants(*lambda) {
                    self.accumulate(grads, *lambda, RealMatrix::row_vector(&gl));
                }
                self.accumulate(grads, *drive, adj);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let ga = RealMatrix::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                let gb = RealMatrix::from_fn(g.rows(), g.cols() - ca, |i, j| g.get(i, ca + j));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if wants(p) {
                        self.accumulate(grads, p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut ga = RealMatrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Loss(local) => {
                let s = g.get(0, 0);
                for (v, lg) in local {
                    if wants(*v) {
                        self.accumulate(grads, *v, lg.scale(s));
                    }
                }
            }
        }
    }
}

fn col_sums(g: &RealMatrix) -> RealMatrix {
    let mut acc = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (s, v) in acc.iter_mut().zip(g.row(r)) {
            *s += v;
        }
    }
    RealMatrix::row_vector(&acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, SeededRng};

    /// Checks d(sum(W ⊙ f(x)))/dx against central differences.
    fn check(shape: (usize, usize), build: impl Fn(&mut Tape, Var) -> Var, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let x0 = rng.normal_matrix(shape.0, shape.1, 0.7);
        let probe = {
            let mut t = Tape::new();
            let x = t.param(x0.clone());
            let y = build(&mut t, x);
            let s = t.value(y).shape();
            rng.normal_matrix(s.0, s.1, 1.0)
        };
        let objective = |data: &[f64]| {
            let mut t = Tape::new();
            let x = t.param(RealMatrix::from_raw(shape.0, shape.1, data.to_vec()));
            let y = build(&mut t, x);
            t.value(y).hadamard(&probe).sum()
        };
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let y = build(&mut t, x);
        let w = t.constant(probe.clone());
        let prod = t.mul(y, w);
        let root = t.sum_all(prod);
        let analytic = t.backward(root).wrt(x, shape);
        let numeric = fd_gradient(objective, x0.data(), 1e-6).unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        check((3, 4), |t, x| t.sigmoid(x), 1);
        check((3, 4), |t, x| { let s = t.mul(x, x); let s = t.offset(s, 0.5); t.sqrt(s) }, 2);
        check((3, 4), |t, x| { let r = t.slice_rows(x, 1, 1); t.add_row(x, r) }, 3);
        check((3, 4), |t, x| {
            let r = t.slice_rows(x, 0, 1);
            let r = t.mul(r, r);
            let r = t.offset(r, 1.0);
            t.div_row(x, r)
        }, 4);
        check((3, 4), |t, x| { let c = t.sum_rows(x); t.mul_col(x, c) }, 5);
        check((3, 4), |t, x| {
            let sq = t.mul(x, x);
            let c = t.sum_rows(sq);
            let c = t.offset(c, 1.0);
            t.div_col(x, c)
        }, 6);
    }

    #[test]
    fn products_and_reductions() {
        check((3, 4), |t, x| t.matmul_t(x, x), 7);
        check((3, 4), |t, x| t.t_matmul(x, x), 8);
        check((3, 3), |t, x| { let xt = t.transpose(x); t.matmul(x, xt) }, 9);
        check((3, 4), |t, x| t.mean_rows(x), 10);
        check((3, 4), |t, x| { let a = t.slice_rows(x, 0, 2); let b = t.slice_rows(x, 1, 2); t.concat_cols(a, b) }, 11);
        check((3, 4), |t, x| {
            let a = t.slice_rows(x, 2, 1);
            let b = t.slice_rows(x, 0, 1);
            t.stack_rows(&[a, b, a])
        }, 12);
    }

    #[test]
    fn masked_softmax_gradient() {
        let mask = vec![true, false, true, true, true, true, false, false, false, false, false, true];
        check((3, 4), move |t, x| t.softmax_rows(x, Some(&mask)), 13);
        check((3, 4), |t, x| t.softmax_rows(x, None), 14);
    }

    #[test]
    fn local_attention_matches_banded_dense_attention() {
        let mut rng = SeededRng::new(16);
        let (q0, k0, v0) = (rng.normal_matrix(7, 3, 1.0), rng.normal_matrix(7, 3, 1.0), rng.normal_matrix(7, 2, 1.0));
        for window in [1, 3, 7, 20] {
            let mut t = Tape::new();
            let (q, k, v) = (t.constant(q0.clone()), t.constant(k0.clone()), t.constant(v0.clone()));
            let local = t.local_attention(q, k, v, window, 0.6);
            let logits = t.matmul_t(q, k);
            let logits = t.scale(logits, 0.6);
            let mask: Vec<bool> = (0..49).map(|i| i % 7 <= i / 7 && i / 7 - i % 7 < window).collect();
            let a = t.softmax_rows(logits, Some(&mask));
            let dense = t.matmul(a, v);
            assert!(t.value(local).max_abs_diff(t.value(dense)) < 1e-14);
        }
        check((5, 3), |t, x| t.local_attention(x, x, x, 3, 0.8), 17);
        check((5, 3), |t, x| {
            let k = t.sigmoid(x);
            let v = t.scale(x, -1.5);
            t.local_attention(x, k, v, 2, 1.1)
        }, 18);
    }

    #[test]
    fn scan_gradient_covers_lambda_and_drive() {
        check((6, 3), |t, x| {
            let lam = t.slice_rows(x, 0, 1);
            let lam = t.sigmoid(lam);
            t.diag_scan(lam, x)
        }, 15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(RealMatrix::filled(2, 2, 1.0));
        let p = t.param(RealMatrix::filled(2, 2, 2.0));
        let y = t.mul(c, p);
        let root = t.sum_all(y);
        let g = t.backward(root);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &RealMatrix::filled(2, 2, 1.0));
    }
}
