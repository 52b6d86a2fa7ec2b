//! Reverse-mode automatic differentiation over [`Tensor`] matrices.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Leaves are either
//! constants (no gradient) or trainable inputs; [`Graph::backward`] walks the
//! tape once in reverse and returns the gradient of a scalar with respect to
//! every node that needs one.
//!
//! [`Graph::detach`] is the stop-gradient operator: its output carries the
//! input's value but nothing flows back through it.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `(n×c) + (1×c)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    /// Sum of all entries, `1×1`.
    Sum(Var),
    /// Per-row sum, `n×1`.
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    /// Each row repeated `r` times consecutively.
    RepeatRows(Var, usize),
    /// `1×c` broadcast to `n×c`.
    BroadcastRows(Var),
    /// Value set externally, gradient passes straight through to the input.
    StraightThrough(Var),
    /// Elementwise Bernoulli KL against a fixed prior, probabilities clamped.
    BernoulliKl(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Clamp range applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient reached the node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when none reached it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli KL `q ln(q/p) + (1-q) ln((1-q)/(1-p))` with `q` clamped.
pub fn bernoulli_kl(q: f64, p: f64) -> f64 {
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
}

fn bernoulli_kl_grad(q: f64, p: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
        return 0.0;
    }
    (q / p).ln() - ((1.0 - q) / (1.0 - p)).ln()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: same value, severed from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1, "add_row expects a 1×c row");
        assert_eq!(av.cols(), rv.cols(), "add_row column mismatch");
        let mut value = av.clone();
        let c = av.cols();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&rv.data()[..c]) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(value, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_vec(1, 1, vec![self.value(a).sum()]);
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = Tensor::from_vec(av.rows(), 1, data);
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let mut data = Vec::with_capacity(av.len() * times);
        for r in 0..av.rows() {
            for _ in 0..times {
                data.extend_from_slice(av.row(r));
            }
        }
        let value = Tensor::from_vec(av.rows() * times, av.cols(), data);
        let ng = self.ng(a);
        self.push(value, Op::RepeatRows(a, times), ng)
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast_rows expects a 1×c row");
        let mut data = Vec::with_capacity(av.cols() * rows);
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        let value = Tensor::from_vec(rows, av.cols(), data);
        let ng = self.ng(a);
        self.push(value, Op::BroadcastRows(a), ng)
    }

    /// Forward value `forward`, backward gradient identical to `a`'s.
    pub fn straight_through(&mut self, a: Var, forward: Tensor) -> Var {
        assert_eq!(
            self.shape(a),
            forward.shape(),
            "straight-through shape mismatch"
        );
        let ng = self.ng(a);
        self.push(forward, Op::StraightThrough(a), ng)
    }

    /// Elementwise clamped Bernoulli KL of probabilities `q` against prior `p`.
    pub fn bernoulli_kl(&mut self, q: Var, p: f64) -> Var {
        let value = self.value(q).map(|x| bernoulli_kl(x, p));
        let ng = self.ng(q);
        self.push(value, Op::BernoulliKl(q, p), ng)
    }

    /// `x·W + b` for a `1×c` bias row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Reverse sweep from scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(1, 1));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(a) {
                    let ga = g.matmul_t(self.value(b));
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let gb = self.value(a).t_matmul(g);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let ga = g.zip_map(self.value(b), |x, y| x * y);
                    self.accumulate(grads, a, ga);
                }
                if self.ng(b) {
                    let gb = g.zip_map(self.value(a), |x, y| x * y);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    self.accumulate(grads, row, gr);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |gi, y| gi * (1.0 - y * y));
                self.accumulate(grads, a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(a), |gi, x| gi * sign(x));
                self.accumulate(grads, a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(a), |gi, x| 2.0 * gi * x);
                self.accumulate(grads, a, ga);
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(out, |gi, y| if y > 0.0 { gi * 0.5 / y } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(a);
                let ga = Tensor::from_fn(r, c, |i, _| g.data()[i]);
                self.accumulate(grads, a, ga);
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        self.accumulate(grads, p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.ng(a) {
                    let (r, c) = self.shape(a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[start..end].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, a, ga);
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, g.clone().reshaped(r, c));
            }
            Op::RepeatRows(a, times) => {
                if self.ng(a) {
                    let (r, c) = self.shape(a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let dst = ga.row_mut(i);
                        for t in 0..times {
                            for (d, x) in dst.iter_mut().zip(g.row(i * times + t)) {
                                *d += x;
                            }
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
            }
            Op::BroadcastRows(a) => {
                if self.ng(a) {
                    let mut ga = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in ga.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
            }
            Op::StraightThrough(a) => self.accumulate(grads, a, g.clone()),
            Op::BernoulliKl(q, p) => {
                let gq = g.zip_map(self.value(q), |gi, x| gi * bernoulli_kl_grad(x, p));
                self.accumulate(grads, q, gq);
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around every entry of `x0`.
    fn numeric_grad(x0: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let eps = 1e-6;
        let mut out = Tensor::zeros(x0.rows(), x0.cols());
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        out
    }

    fn composite(x: &Tensor, w: &Tensor) -> (Graph, Var, Var, Var) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let h = g.matmul(xv, wv);
        let t = g.tanh(h);
        let s = g.sigmoid(t);
        let rep = g.repeat_rows(s, 2);
        let sq = g.square(rep);
        let rs = g.row_sum(sq);
        let sqrt = g.sqrt(rs);
        let kl = g.bernoulli_kl(s, 0.2);
        let a = g.sum(sqrt);
        let b = g.mean(kl);
        let slice = g.slice_cols(t, 1, 2);
        let ab = g.abs(slice);
        let c = g.sum(ab);
        let ab_sum = g.add(a, b);
        let total = g.add(ab_sum, c);
        (g, xv, wv, total)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let x = Tensor::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let w = Tensor::from_fn(4, 3, |r, c| ((r + 2 * c) % 4) as f64 * 0.25 - 0.4);
        let (g, xv, wv, total) = composite(&x, &w);
        let grads = g.backward(total);
        let gx = grads.get(xv).unwrap();
        let gw = grads.get(wv).unwrap();
        let nx = numeric_grad(&x, |xp| {
            let (g, _, _, t) = composite(xp, &w);
            g.scalar(t)
        });
        let nw = numeric_grad(&w, |wp| {
            let (g, _, _, t) = composite(&x, wp);
            g.scalar(t)
        });
        for (a, b) in gx.data().iter().zip(nx.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in gw.data().iter().zip(nw.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(2, 2, 0.5));
        let d = g.detach(x);
        let y = g.mul(d, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        // d(x_detached * x)/dx = x_detached only
        assert_eq!(grads.get(x).unwrap(), &Tensor::filled(2, 2, 0.5));
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(1, 2, vec![0.2, 0.7]));
        let s = g.sigmoid(x);
        let hard = g.value(s).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let st = g.straight_through(s, hard);
        assert_eq!(g.value(st).data(), &[1.0, 1.0]);
        let sum_st = g.sum(st);
        let gst = g.backward(sum_st);
        let sum_soft = g.sum(s);
        let gsoft = g.backward(sum_soft);
        assert_eq!(gst.get(x), gsoft.get(x));
    }

    #[test]
    fn bernoulli_kl_closed_form() {
        let expected = 0.9 * 9f64.ln() + 0.1 * (1.0f64 / 9.0).ln();
        assert!((bernoulli_kl(0.9, 0.1) - expected).abs() < 1e-12);
        assert_eq!(bernoulli_kl(0.3, 0.3), 0.0);
    }
}
