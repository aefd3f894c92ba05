//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! Nodes are created in topological order, so [`Tape::backward`] simply walks
//! the tape from the root down to index 0, visiting each node once.
//!
//! Elementwise binary operations broadcast when one operand's shape is a
//! trailing suffix of the other's (or a single element), which covers bias
//! addition over a batch of rows without a dedicated op.
//!
//! ```
//! use optim4rl::autodiff::Tape;
//! use optim4rl::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Clip { x: Var, lo: f64, hi: f64 },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
    Reshape(Var),
    Gather { x: Var, indices: Vec<usize> },
    LogSoftmax(Var),
    StopGradient,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// How the smaller operand of an elementwise op repeats.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// lhs repeats with period `n`
    Lhs(usize),
    /// rhs repeats with period `n`
    Rhs(usize),
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Broadcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        return Ok((Broadcast::Same, a.shape().to_vec()));
    }
    if is_suffix(b.shape(), a.shape()) {
        return Ok((Broadcast::Rhs(b.numel()), a.shape().to_vec()));
    }
    if is_suffix(a.shape(), b.shape()) {
        return Ok((Broadcast::Lhs(a.numel()), b.shape().to_vec()));
    }
    if b.numel() == 1 {
        return Ok((Broadcast::Rhs(1), a.shape().to_vec()));
    }
    if a.numel() == 1 {
        return Ok((Broadcast::Lhs(1), b.shape().to_vec()));
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (bc, shape) = broadcast(op, a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    let data = match bc {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Rhs(p) => (0..n).map(|i| f(ad[i], bd[i % p])).collect(),
        Broadcast::Lhs(p) => (0..n).map(|i| f(ad[i % p], bd[i])).collect(),
    };
    Tensor::new(shape, data)
}

/// Sum `full` (the gradient of a broadcast result) back down to `shape`.
fn reduce_to(full: Vec<f64>, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if full.len() == n {
        return Tensor::new(shape.to_vec(), full).expect("same element count");
    }
    let mut out = vec![0.0; n];
    for (i, g) in full.into_iter().enumerate() {
        out[i % n] += g;
    }
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let err = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if b.shape().len() != 2 {
        return Err(err());
    }
    let (k, n) = (b.shape()[0], b.shape()[1]);
    match a.shape() {
        [ka] if *ka == k => Ok((1, k, n, vec![n])),
        [m, ka] if *ka == k => Ok((*m, k, n, vec![*m, n])),
        _ => Err(err()),
    }
}

/// Row-major `[m,k] x [k,n]`. The reduction over `k` runs in the same order for
/// every row, so each output row depends only on its own input row.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

/// A define-by-run record of tensor operations.
///
/// A tape can optionally replay recorded stop-gradient values
/// ([`Tape::with_frozen_stops`]). Re-running the same program on such a tape
/// evaluates the function whose derivative `backward` actually computes, which
/// is what finite-difference checks of straight-through estimators need.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stops: Vec<Tensor>,
    frozen: Option<Vec<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `stop_gradient` calls return `values` in order instead of
    /// their inputs' current values.
    pub fn with_frozen_stops(values: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by every `stop_gradient` call so far, in call order.
    pub fn stop_values(&self) -> &[Tensor] {
        &self.stops
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_with("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_with("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_with("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = zip_with("div", self.value(a), self.value(b), |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div(a, b), v, rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| -a);
        let rg = self.rg(x);
        self.push(Op::Neg(x), v, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), v, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a + c);
        let rg = self.rg(x);
        self.push(Op::AddScalar(x), v, rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`, or `[k] x [k,n] -> [n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n, shape) = matmul_dims(av, bv)?;
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), v, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        let rg = self.rg(x);
        self.push(Op::Mean(x), v, rg)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(op, v, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Clamp to `[lo, hi]`. The gradient passes wherever `lo <= x <= hi`.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clip { x, lo, hi }, |a| a.clamp(lo, hi))
    }

    /// Concatenate along the last axis; all leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let lead = first.shape()[..first.shape().len().saturating_sub(1)].to_vec();
        let rows = first.rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            let tl = &t.shape()[..t.shape().len().saturating_sub(1)];
            if tl != lead.as_slice() || t.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let t = self.value(x);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::Concat(xs.to_vec()), v, rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start > end || end > cols {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for row in t.data().chunks(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = w,
            None => shape.push(w),
        }
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Slice { x, start, end }, v, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    /// `out[i] = x.flat[indices[i]]`, shaped as `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Gather { x, indices }, v, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = log_softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(Op::LogSoftmax(x), v, rg)
    }

    /// Identity forward; contributes nothing to upstream gradients.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let live = self.value(x);
        let v = match &self.frozen {
            Some(frozen) => {
                let k = self.stops.len();
                let f = frozen.get(k).ok_or(Error::ShapeMismatch {
                    op: "stop_gradient(frozen)",
                    lhs: live.shape().to_vec(),
                    rhs: vec![],
                })?;
                if f.shape() != live.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "stop_gradient(frozen)",
                        lhs: live.shape().to_vec(),
                        rhs: f.shape().to_vec(),
                    });
                }
                f.clone()
            }
            None => live.clone(),
        };
        self.stops.push(v.clone());
        Ok(self.push(Op::StopGradient, v, false))
    }

    /// Forward `2·(x ≥ 0) − 1`, backward identity, built as `⊥[2(x≥0)−1−x] + x`.
    pub fn straight_through_sign(&mut self, x: Var) -> Result<Var> {
        let hard = self.value(x).map(|a| if a >= 0.0 { 1.0 } else { -1.0 });
        let hard = self.constant(hard);
        let diff = self.sub(hard, x)?;
        let diff = self.stop_gradient(diff)?;
        self.add(diff, x)
    }

    /// Reverse sweep seeded with 1.0 at `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.rg(root) {
            grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let ga = reduce_to(g.data().to_vec(), self.value(*a).shape());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = reduce_to(g.into_data(), self.value(*b).shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = reduce_to(g.data().to_vec(), self.value(*a).shape());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let neg = g.data().iter().map(|v| -v).collect();
                    let gb = reduce_to(neg, self.value(*b).shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let full = zip_with("mul", &g, bv, |x, y| x * y).expect("forward shapes");
                    self.accumulate(grads, *a, reduce_to(full.into_data(), av.shape()));
                }
                if self.rg(*b) {
                    let full = zip_with("mul", &g, av, |x, y| x * y).expect("forward shapes");
                    self.accumulate(grads, *b, reduce_to(full.into_data(), bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let full = zip_with("div", &g, bv, |x, y| x / y).expect("forward shapes");
                    self.accumulate(grads, *a, reduce_to(full.into_data(), av.shape()));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -y/b
                    let gy = zip_with("mul", &g, y, |x, q| -x * q).expect("forward shapes");
                    let full = zip_with("div", &gy, bv, |x, d| x / d).expect("forward shapes");
                    self.accumulate(grads, *b, reduce_to(full.into_data(), bv.shape()));
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.map(|v| -v)),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n, _) = matmul_dims(av, bv).expect("forward shapes");
                let gd = g.data();
                if self.rg(*a) {
                    // ga[i,p] = sum_j g[i,j] b[p,j]
                    let bd = bv.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let ga = Tensor::new(av.shape().to_vec(), ga).expect("shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    // gb[p,j] = sum_i a[i,p] g[i,j]
                    let ad = av.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    let gb = Tensor::new(bv.shape().to_vec(), gb).expect("shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gx = Tensor::full(xv.shape(), g.item() / xv.numel() as f64);
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => self.accumulate(grads, *x, mul_same(&g, y, |gv, yv| gv * yv)),
            Op::Log(x) => {
                let gx = mul_same(&g, self.value(*x), |gv, xv| gv / xv);
                self.accumulate(grads, *x, gx);
            }
            Op::Sqrt(x) => self.accumulate(grads, *x, mul_same(&g, y, |gv, yv| gv / (2.0 * yv))),
            Op::Tanh(x) => {
                self.accumulate(grads, *x, mul_same(&g, y, |gv, yv| gv * (1.0 - yv * yv)))
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, mul_same(&g, y, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::Relu(x) => {
                let gx = mul_same(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = mul_same(&g, self.value(*x), |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Clip { x, lo, hi } => {
                let gx = mul_same(&g, self.value(*x), |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let c = xv.cols();
                    if self.rg(x) {
                        let mut gx = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total + offset;
                            gx.extend_from_slice(&g.data()[base..base + c]);
                        }
                        let gx = Tensor::new(xv.shape().to_vec(), gx).expect("shape");
                        self.accumulate(grads, x, gx);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start, end } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let w = end - start;
                let mut gx = vec![0.0; xv.numel()];
                for (r, grow) in g.data().chunks(w.max(1)).enumerate().take(xv.rows()) {
                    gx[r * cols + start..r * cols + end].copy_from_slice(&grow[..w]);
                }
                let gx = Tensor::new(xv.shape().to_vec(), gx).expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.value(*x).shape()).expect("same numel");
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, indices } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.numel()];
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    gx[i] += gv;
                }
                let gx = Tensor::new(xv.shape().to_vec(), gx).expect("shape");
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                // gx = g - softmax * rowsum(g)
                let cols = y.cols();
                let mut gx = g.into_data();
                for (grow, yrow) in gx.chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let s: f64 = grow.iter().sum();
                    for (gv, &lp) in grow.iter_mut().zip(yrow) {
                        *gv -= lp.exp() * s;
                    }
                }
                let gx = Tensor::new(y.shape().to_vec(), gx).expect("shape");
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn mul_same(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(other.shape().to_vec(), data).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
