//! Eager Wengert tape whose reverse pass is itself recorded on the tape.
//!
//! Every vector-Jacobian rule below is written in terms of the same taped
//! primitives it differentiates, so the gradient nodes produced by one call to
//! [`Tape::vjp`] can be differentiated by a second call. That is all a
//! reverse-over-reverse Hessian-vector product needs.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Parameter (`requires_grad`) or constant input.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product.
    Mul(Var, Var),
    /// `op(a) · op(b)` with optional transposes.
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Scale(Var, f64),
    Shift(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    /// Heaviside step; derivative zero everywhere it exists.
    Step(Var),
    /// Sum of all entries into a 1×1 tensor.
    SumAll(Var),
    /// Broadcast a 1×1 tensor to `rows × cols`.
    Fill { src: Var, rows: usize, cols: usize },
    /// Column sums: `n × m → 1 × m`.
    SumRows(Var),
    /// Stack a `1 × m` row `n` times.
    RepeatRows(Var, usize),
    /// Row sums: `n × m → n × 1`.
    SumCols(Var),
    /// Repeat an `n × 1` column `m` times.
    RepeatCols(Var, usize),
    /// Row-wise softmax.
    Softmax(Var),
    /// Mean over rows of `logsumexp(z_i) - z_i[y_i]`.
    SoftmaxCrossEntropy { logits: Var, targets: Arc<[usize]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::SumAll(_) => "sum",
            Op::Fill { .. } => "fill",
            Op::SumRows(_) => "sum_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::SumCols(_) => "sum_cols",
            Op::RepeatCols(..) => "repeat_cols",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation record. Node indices are a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(z: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(z.len());
    for r in 0..z.rows() {
        let row = z.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &x in row {
            let e = (x - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Tensor::from_vec(z.rows(), z.cols(), out).expect("softmax shape")
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// First node (in tape order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.is_finite())
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_error(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_error(
                op,
                format!("operands {} {:?} and {} {:?}", a.0, sa, b.0, sb),
            ));
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (_, ka) = self.value(a).shape_t(ta);
        let (kb, _) = self.value(b).shape_t(tb);
        if ka != kb {
            return Err(self.shape_error(
                "matmul",
                format!(
                    "inner dimensions {} (node {}) and {} (node {}) differ",
                    ka, a.0, kb, b.0
                ),
            ));
        }
        let value = Tensor::matmul(self.value(a), self.value(b), ta, tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(Op::Shift(a, c), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), value, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), value, rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(Op::Softplus(a), value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn step(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::Step(a), value, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(Op::SumAll(a), value, rg)
    }

    pub fn fill(&mut self, src: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.value(src).shape() != (1, 1) {
            return Err(self.shape_error("fill", format!("source {} is not 1x1", src.0)));
        }
        let value = Tensor::filled(rows, cols, self.value(src).item());
        let rg = self.rg(src);
        Ok(self.push(Op::Fill { src, rows, cols }, value, rg))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, &x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let value = Tensor::from_vec(1, t.cols(), out).expect("sum_rows shape");
        let rg = self.rg(a);
        self.push(Op::SumRows(a), value, rg)
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != 1 {
            return Err(self.shape_error("repeat_rows", format!("node {} is not a row", a.0)));
        }
        let data = (0..n).flat_map(|_| t.data().iter().copied()).collect();
        let value = Tensor::from_vec(n, t.cols(), data).expect("repeat_rows shape");
        let rg = self.rg(a);
        Ok(self.push(Op::RepeatRows(a, n), value, rg))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let value = Tensor::column(data);
        let rg = self.rg(a);
        self.push(Op::SumCols(a), value, rg)
    }

    pub fn repeat_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = self.value(a);
        if t.cols() != 1 {
            return Err(self.shape_error("repeat_cols", format!("node {} is not a column", a.0)));
        }
        let data = t
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, m))
            .collect();
        let value = Tensor::from_vec(t.rows(), m, data).expect("repeat_cols shape");
        let rg = self.rg(a);
        Ok(self.push(Op::RepeatCols(a, m), value, rg))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(Op::Softmax(a), value, rg)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Arc<[usize]>) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != targets.len() || z.rows() == 0 {
            return Err(self.shape_error(
                "softmax_cross_entropy",
                format!("{} logit rows but {} targets", z.rows(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= z.cols()) {
            return Err(self.shape_error(
                "softmax_cross_entropy",
                format!("target class {} out of range for {} logits", bad, z.cols()),
            ));
        }
        let mut total = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, targets }, value, rg))
    }

    /// Reverse pass recorded on the tape.
    ///
    /// `seeds` pairs each output node with the node holding its adjoint; the
    /// returned handles are the accumulated adjoints of `wrt` (`None` when no
    /// path exists). The new nodes carry `requires_grad`, so the result can be
    /// differentiated again.
    pub fn vjp(&mut self, seeds: &[(Var, Var)], wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        let Some(top) = seeds.iter().map(|(out, _)| out.0).max() else {
            return Ok(vec![None; wrt.len()]);
        };
        let mut adj: Vec<Option<Var>> = vec![None; top + 1];
        for &(out, seed) in seeds {
            if self.value(out).shape() != self.value(seed).shape() {
                return Err(self.shape_error(
                    "seed",
                    format!("seed {} does not match output {}", seed.0, out.0),
                ));
            }
            if self.rg(out) {
                self.accumulate(&mut adj, out, seed)?;
            }
        }
        for i in (0..=top).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let y = Var(i);
            match op {
                Op::Leaf | Op::Step(_) => {}
                Op::Add(a, b) => {
                    self.send(&mut adj, a, g)?;
                    self.send(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.send(&mut adj, a, g)?;
                    if self.rg(b) {
                        let nb = self.scale(g, -1.0);
                        self.accumulate(&mut adj, b, nb)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = self.mul(g, b)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.rg(b) {
                        let gb = self.mul(g, a)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    if self.rg(a) {
                        let ga = match (ta, tb) {
                            (false, false) => self.matmul_t(g, b, false, true)?,
                            (false, true) => self.matmul_t(g, b, false, false)?,
                            (true, false) => self.matmul_t(b, g, false, true)?,
                            (true, true) => self.matmul_t(b, g, true, true)?,
                        };
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if self.rg(b) {
                        let gb = match (ta, tb) {
                            (false, false) => self.matmul_t(a, g, true, false)?,
                            (false, true) => self.matmul_t(g, a, true, false)?,
                            (true, false) => self.matmul_t(a, g, false, false)?,
                            (true, true) => self.matmul_t(g, a, true, true)?,
                        };
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Shift(a, _) => self.send(&mut adj, a, g)?,
                Op::Tanh(a) => {
                    // 1 - y²
                    let yy = self.mul(y, y)?;
                    let neg = self.scale(yy, -1.0);
                    let d = self.shift(neg, 1.0);
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Sigmoid(a) => {
                    // y (1 - y)
                    let neg = self.scale(y, -1.0);
                    let one_minus = self.shift(neg, 1.0);
                    let d = self.mul(y, one_minus)?;
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Softplus(a) => {
                    let d = self.sigmoid(a);
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Relu(a) => {
                    let d = self.step(a);
                    let ga = self.mul(g, d)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(a).shape();
                    let ga = self.fill(g, r, c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Fill { src, .. } => {
                    let ga = self.sum(g);
                    self.accumulate(&mut adj, src, ga)?;
                }
                Op::SumRows(a) => {
                    let n = self.value(a).rows();
                    let ga = self.repeat_rows(g, n)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::RepeatRows(a, _) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumCols(a) => {
                    let m = self.value(a).cols();
                    let ga = self.repeat_cols(g, m)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::RepeatCols(a, _) => {
                    let ga = self.sum_cols(g);
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Softmax(a) => {
                    // y ⊙ (g - rowsum(g ⊙ y))
                    let m = self.value(a).cols();
                    let gy = self.mul(g, y)?;
                    let rs = self.sum_cols(gy);
                    let bc = self.repeat_cols(rs, m)?;
                    let centered = self.sub(g, bc)?;
                    let ga = self.mul(y, centered)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    // g · (softmax(z) - onehot(y)) / n
                    let (n, m) = self.value(logits).shape();
                    let mut onehot = Tensor::zeros(n, m).into_data();
                    for (r, &t) in targets.iter().enumerate() {
                        onehot[r * m + t] = 1.0;
                    }
                    let onehot = self.constant(Tensor::from_vec(n, m, onehot).expect("onehot"));
                    let p = self.softmax(logits);
                    let diff = self.sub(p, onehot)?;
                    let scaled = self.scale(diff, 1.0 / n as f64);
                    let gb = self.fill(g, n, m)?;
                    let ga = self.mul(gb, scaled)?;
                    self.accumulate(&mut adj, logits, ga)?;
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| adj.get(w.0).copied().flatten())
            .collect())
    }

    fn send(&mut self, adj: &mut [Option<Var>], to: Var, g: Var) -> Result<()> {
        if self.rg(to) {
            self.accumulate(adj, to, g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], to: Var, g: Var) -> Result<()> {
        adj[to.0] = Some(match adj[to.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    /// Human-readable op name of a node, used in diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}
