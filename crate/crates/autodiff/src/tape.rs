use crate::{Error, Result, Tensor};
use rayon::prelude::*;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Neg(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    /// tanh with linear tails beyond |x| = cut; keeps the map surjective.
    SatTanh { x: usize, cut: f64 },
    /// log of the SatTanh derivative, computed stably.
    SatTanhLogDeriv { x: usize, cut: f64 },
    Axpb { x: usize, a: f64, b: f64 },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    SumRows(usize),
    LogSumExpRows(usize),
    Reshape(usize),
    SliceFlat { x: usize, offset: usize },
    ConcatCols(Vec<usize>),
    SelectCols { x: usize, cols: Vec<usize> },
    GatherPerRow { x: usize, idx: Vec<usize> },
    GatherFlat { x: usize, idx: Vec<usize> },
    CumsumRows(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::SatTanh { .. } => "sat_tanh",
            Op::SatTanhLogDeriv { .. } => "sat_tanh_log_deriv",
            Op::Axpb { .. } => "axpb",
            Op::Add(_, _) => "add",
            Op::Sub(_, _) => "sub",
            Op::Mul(_, _) => "mul",
            Op::Div(_, _) => "div",
            Op::MatMul(_, _) => "matmul",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::LogSumExpRows(_) => "log_sum_exp_rows",
            Op::Reshape(_) => "reshape",
            Op::SliceFlat { .. } => "slice",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectCols { .. } => "select_cols",
            Op::GatherPerRow { .. } => "gather_per_row",
            Op::GatherFlat { .. } => "gather_flat",
            Op::CumsumRows(_) => "cumsum_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar tape output with respect to input leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for an input var. Zero tensor if the output never used it.
    pub fn take(&mut self, var: Var, shape_like: &Tensor) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(shape_like.shape().to_vec()))
    }
}

/// Wengert list rebuilt per evaluation. Single-threaded by construction;
/// run independent evaluations on independent tapes.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Stable softplus.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable log(1 - tanh(x)^2) = log sech^2(x).
pub fn log_sech2(x: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - x.abs() - (-2.0 * x.abs()).exp().ln_1p())
}

fn sat_tanh(x: f64, cut: f64) -> f64 {
    if x.abs() <= cut {
        x.tanh()
    } else {
        let slope = 1.0 - cut.tanh() * cut.tanh();
        x.signum() * cut.tanh() + (x - x.signum() * cut) * slope
    }
}

fn sat_tanh_deriv(x: f64, cut: f64) -> f64 {
    let t = x.abs().min(cut).tanh();
    1.0 - t * t
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Differentiated leaf.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Input, value, true)
    }

    /// Non-differentiated leaf (data, masks, fixed hyperparameters).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var> {
        let index = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite {
                index,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(index))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary<F>(&mut self, op: Op, x: Var, f: F) -> Result<Var>
    where
        F: Fn(f64) -> f64,
    {
        let value = self.nodes[x.0].value.clone();
        let mut value = value;
        for v in value.data_mut() {
            *v = f(*v);
        }
        let needs = self.needs(x);
        self.push(op, value, needs)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg(x.0), x, |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp(x.0), x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log(x.0), x, f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Tanh(x.0), x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid(x.0), x, sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus(x.0), x, softplus)
    }

    pub fn sat_tanh(&mut self, x: Var, cut: f64) -> Result<Var> {
        self.unary(Op::SatTanh { x: x.0, cut }, x, |v| sat_tanh(v, cut))
    }

    pub fn sat_tanh_log_deriv(&mut self, x: Var, cut: f64) -> Result<Var> {
        self.unary(Op::SatTanhLogDeriv { x: x.0, cut }, x, |v| {
            log_sech2(v.abs().min(cut))
        })
    }

    /// Elementwise a*x + b with constant coefficients.
    pub fn axpb(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        self.unary(Op::Axpb { x: x.0, a, b }, x, |v| a * v + b)
    }

    fn binary(&mut self, op: Op, lhs: Var, rhs: Var) -> Result<Var> {
        let (value, _) = broadcast_apply(
            &self.nodes[lhs.0].value,
            &self.nodes[rhs.0].value,
            op.name(),
            |a, b| match op {
                Op::Add(_, _) => a + b,
                Op::Sub(_, _) => a - b,
                Op::Mul(_, _) => a * b,
                Op::Div(_, _) => a / b,
                _ => unreachable!(),
            },
        )?;
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push(op, value, needs)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Op::Add(lhs.0, rhs.0), lhs, rhs)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Op::Sub(lhs.0, rhs.0), lhs, rhs)
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Op::Mul(lhs.0, rhs.0), lhs, rhs)
    }

    pub fn div(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Op::Div(lhs.0, rhs.0), lhs, rhs)
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = &self.nodes[lhs.0].value;
        let b = &self.nodes[rhs.0].value;
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let value = mm_nn(a.data(), b.data(), n, k, m);
        let needs = self.needs(lhs) || self.needs(rhs);
        self.push(Op::MatMul(lhs.0, rhs.0), Tensor::matrix(n, m, value)?, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x.0), Tensor::scalar(total), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x)?;
        self.axpb(s, 1.0 / n as f64, 0.0)
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, k) = require_matrix(t, "sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = t.data()[i * k..(i + 1) * k].iter().sum();
        }
        let needs = self.needs(x);
        self.push(Op::SumRows(x.0), Tensor::vector(out), needs)
    }

    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, k) = require_matrix(t, "log_sum_exp_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = log_sum_exp(&t.data()[i * k..(i + 1) * k]);
        }
        let needs = self.needs(x);
        self.push(Op::LogSumExpRows(x.0), Tensor::vector(out), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("source has {} elements", t.numel()),
            });
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        let needs = self.needs(x);
        self.push(Op::Reshape(x.0), value, needs)
    }

    /// 1-D window of the flattened source.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if offset + len > t.numel() {
            return Err(Error::IndexOutOfBounds {
                op: "slice",
                index: offset + len,
                shape: t.shape().to_vec(),
            });
        }
        let value = Tensor::vector(t.data()[offset..offset + len].to_vec());
        let needs = self.needs(x);
        self.push(Op::SliceFlat { x: x.0, offset }, value, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let n = require_matrix(&self.nodes[parts[0].0].value, "concat_cols")?.0;
        let mut total_cols = 0;
        for p in parts {
            let (rows, cols) = require_matrix(&self.nodes[p.0].value, "concat_cols")?;
            if rows != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: self.nodes[p.0].value.shape().to_vec(),
                });
            }
            total_cols += cols;
        }
        let mut out = vec![0.0; n * total_cols];
        let mut col_base = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (_, cols) = t.dims2();
            for i in 0..n {
                out[i * total_cols + col_base..i * total_cols + col_base + cols]
                    .copy_from_slice(&t.data()[i * cols..(i + 1) * cols]);
            }
            col_base += cols;
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            Tensor::matrix(n, total_cols, out)?,
            needs,
        )
    }

    /// Column gather; also serves as a fixed permutation.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, k) = require_matrix(t, "select_cols")?;
        for &c in cols {
            if c >= k {
                return Err(Error::IndexOutOfBounds {
                    op: "select_cols",
                    index: c,
                    shape: t.shape().to_vec(),
                });
            }
        }
        let m = cols.len();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for (j, &c) in cols.iter().enumerate() {
                out[i * m + j] = t.data()[i * k + c];
            }
        }
        let needs = self.needs(x);
        self.push(
            Op::SelectCols {
                x: x.0,
                cols: cols.to_vec(),
            },
            Tensor::matrix(n, m, out)?,
            needs,
        )
    }

    /// out[i] = x[i, idx[i]].
    pub fn gather_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, k) = require_matrix(t, "gather_per_row")?;
        if idx.len() != n {
            return Err(Error::InvalidShape {
                op: "gather_per_row",
                shape: t.shape().to_vec(),
                reason: format!("index list has length {}, expected {}", idx.len(), n),
            });
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            if idx[i] >= k {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_per_row",
                    index: idx[i],
                    shape: t.shape().to_vec(),
                });
            }
            out[i] = t.data()[i * k + idx[i]];
        }
        let needs = self.needs(x);
        self.push(
            Op::GatherPerRow {
                x: x.0,
                idx: idx.to_vec(),
            },
            Tensor::vector(out),
            needs,
        )
    }

    /// out[j] = flat(x)[idx[j]].
    pub fn gather_flat(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let mut out = vec![0.0; idx.len()];
        for (j, &i) in idx.iter().enumerate() {
            if i >= t.numel() {
                return Err(Error::IndexOutOfBounds {
                    op: "gather_flat",
                    index: i,
                    shape: t.shape().to_vec(),
                });
            }
            out[j] = t.data()[i];
        }
        let needs = self.needs(x);
        self.push(
            Op::GatherFlat {
                x: x.0,
                idx: idx.to_vec(),
            },
            Tensor::vector(out),
            needs,
        )
    }

    pub fn cumsum_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (n, k) = require_matrix(t, "cumsum_rows")?;
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..k {
                acc += t.data()[i * k + j];
                out[i * k + j] = acc;
            }
        }
        let needs = self.needs(x);
        self.push(Op::CumsumRows(x.0), Tensor::matrix(n, k, out)?, needs)
    }

    /// Reverse sweep from a scalar root. Gradients are returned for every
    /// node flagged as needing them; inputs are what callers care about.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for index in (0..=root.0).rev() {
            if !self.nodes[index].needs_grad {
                continue;
            }
            let grad = match grads[index].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(index, &grad, &mut grads);
            if matches!(self.nodes[index].op, Op::Input) {
                grads[index] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, contrib: Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, index: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let op = self.nodes[index].op.clone();
        match op {
            Op::Input | Op::Constant => {}
            Op::Neg(x) => {
                let mut g = grad.clone();
                for v in g.data_mut() {
                    *v = -*v;
                }
                self.accumulate(grads, x, g);
            }
            Op::Exp(x) => {
                let out = self.nodes[index].value.data();
                let mut g = grad.clone();
                for (v, o) in g.data_mut().iter_mut().zip(out) {
                    *v *= o;
                }
                self.accumulate(grads, x, g);
            }
            Op::Log(x) => {
                let xin = self.nodes[x].value.data();
                let mut g = grad.clone();
                for (v, xv) in g.data_mut().iter_mut().zip(xin) {
                    *v /= xv;
                }
                self.accumulate(grads, x, g);
            }
            Op::Tanh(x) => {
                let out = self.nodes[index].value.data();
                let mut g = grad.clone();
                for (v, t) in g.data_mut().iter_mut().zip(out) {
                    *v *= 1.0 - t * t;
                }
                self.accumulate(grads, x, g);
            }
            Op::Sigmoid(x) => {
                let out = self.nodes[index].value.data();
                let mut g = grad.clone();
                for (v, s) in g.data_mut().iter_mut().zip(out) {
                    *v *= s * (1.0 - s);
                }
                self.accumulate(grads, x, g);
            }
            Op::Softplus(x) => {
                let xin = self.nodes[x].value.data();
                let mut g = grad.clone();
                for (v, xv) in g.data_mut().iter_mut().zip(xin) {
                    *v *= sigmoid(*xv);
                }
                self.accumulate(grads, x, g);
            }
            Op::SatTanh { x, cut } => {
                let xin = self.nodes[x].value.data();
                let mut g = grad.clone();
                for (v, xv) in g.data_mut().iter_mut().zip(xin) {
                    *v *= sat_tanh_deriv(*xv, cut);
                }
                self.accumulate(grads, x, g);
            }
            Op::SatTanhLogDeriv { x, cut } => {
                let xin = self.nodes[x].value.data();
                let mut g = grad.clone();
                for (v, xv) in g.data_mut().iter_mut().zip(xin) {
                    *v *= if xv.abs() < cut { -2.0 * xv.tanh() } else { 0.0 };
                }
                self.accumulate(grads, x, g);
            }
            Op::Axpb { x, a, .. } => {
                let mut g = grad.clone();
                for v in g.data_mut() {
                    *v *= a;
                }
                self.accumulate(grads, x, g);
            }
            Op::Add(l, r) => {
                self.binary_backward(l, r, index, grad, grads, |_, _, g| (g, g));
            }
            Op::Sub(l, r) => {
                self.binary_backward(l, r, index, grad, grads, |_, _, g| (g, -g));
            }
            Op::Mul(l, r) => {
                self.binary_backward(l, r, index, grad, grads, |a, b, g| (g * b, g * a));
            }
            Op::Div(l, r) => {
                self.binary_backward(l, r, index, grad, grads, |a, b, g| {
                    (g / b, -g * a / (b * b))
                });
            }
            Op::MatMul(l, r) => {
                let a = &self.nodes[l].value;
                let b = &self.nodes[r].value;
                let (n, k) = a.dims2();
                let m = b.dims2().1;
                if self.nodes[l].needs_grad {
                    let ga = mm_nt(grad.data(), b.data(), n, m, k);
                    self.accumulate(grads, l, Tensor::matrix(n, k, ga).unwrap());
                }
                if self.nodes[r].needs_grad {
                    let gb = mm_tn(a.data(), grad.data(), n, k, m);
                    self.accumulate(grads, r, Tensor::matrix(k, m, gb).unwrap());
                }
            }
            Op::Sum(x) => {
                let g = grad.data()[0];
                let src = &self.nodes[x].value;
                self.accumulate(grads, x, Tensor::full(src.shape().to_vec(), g));
            }
            Op::SumRows(x) => {
                let src = &self.nodes[x].value;
                let (n, k) = src.dims2();
                let mut out = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        out[i * k + j] = grad.data()[i];
                    }
                }
                self.accumulate(grads, x, Tensor::matrix(n, k, out).unwrap());
            }
            Op::LogSumExpRows(x) => {
                let src = &self.nodes[x].value;
                let out = self.nodes[index].value.data();
                let (n, k) = src.dims2();
                let mut g = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        g[i * k + j] = grad.data()[i] * (src.data()[i * k + j] - out[i]).exp();
                    }
                }
                self.accumulate(grads, x, Tensor::matrix(n, k, g).unwrap());
            }
            Op::Reshape(x) => {
                let src = &self.nodes[x].value;
                let g = Tensor::new(src.shape().to_vec(), grad.data().to_vec()).unwrap();
                self.accumulate(grads, x, g);
            }
            Op::SliceFlat { x, offset } => {
                let src = &self.nodes[x].value;
                let mut g = Tensor::zeros(src.shape().to_vec());
                g.data_mut()[offset..offset + grad.numel()].copy_from_slice(grad.data());
                self.accumulate(grads, x, g);
            }
            Op::ConcatCols(parts) => {
                let (n, total_cols) = self.nodes[index].value.dims2();
                let mut col_base = 0;
                for p in parts {
                    let t = &self.nodes[p].value;
                    let (_, cols) = t.dims2();
                    if self.nodes[p].needs_grad {
                        let mut g = vec![0.0; n * cols];
                        for i in 0..n {
                            g[i * cols..(i + 1) * cols].copy_from_slice(
                                &grad.data()[i * total_cols + col_base
                                    ..i * total_cols + col_base + cols],
                            );
                        }
                        self.accumulate(grads, p, Tensor::matrix(n, cols, g).unwrap());
                    }
                    col_base += cols;
                }
            }
            Op::SelectCols { x, cols } => {
                let src = &self.nodes[x].value;
                let (n, k) = src.dims2();
                let m = cols.len();
                let mut g = Tensor::zeros(src.shape().to_vec());
                for i in 0..n {
                    for (j, &c) in cols.iter().enumerate() {
                        g.data_mut()[i * k + c] += grad.data()[i * m + j];
                    }
                }
                self.accumulate(grads, x, g);
            }
            Op::GatherPerRow { x, idx } => {
                let src = &self.nodes[x].value;
                let (n, k) = src.dims2();
                let mut g = Tensor::zeros(src.shape().to_vec());
                for i in 0..n {
                    g.data_mut()[i * k + idx[i]] += grad.data()[i];
                }
                self.accumulate(grads, x, g);
            }
            Op::GatherFlat { x, idx } => {
                let src = &self.nodes[x].value;
                let mut g = Tensor::zeros(src.shape().to_vec());
                for (j, &i) in idx.iter().enumerate() {
                    g.data_mut()[i] += grad.data()[j];
                }
                self.accumulate(grads, x, g);
            }
            Op::CumsumRows(x) => {
                let src = &self.nodes[x].value;
                let (n, k) = src.dims2();
                let mut g = vec![0.0; n * k];
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in (0..k).rev() {
                        acc += grad.data()[i * k + j];
                        g[i * k + j] = acc;
                    }
                }
                self.accumulate(grads, x, Tensor::matrix(n, k, g).unwrap());
            }
        }
    }

    fn binary_backward<F>(
        &self,
        l: usize,
        r: usize,
        index: usize,
        grad: &Tensor,
        grads: &mut [Option<Tensor>],
        partials: F,
    ) where
        F: Fn(f64, f64, f64) -> (f64, f64),
    {
        let a = &self.nodes[l].value;
        let b = &self.nodes[r].value;
        let out = &self.nodes[index].value;
        let (rr, cc) = out.dims2();
        let (ar, ac) = a.dims2();
        let (br, bc) = b.dims2();
        let need_l = self.nodes[l].needs_grad;
        let need_r = self.nodes[r].needs_grad;
        let mut ga = if need_l {
            Some(Tensor::zeros(a.shape().to_vec()))
        } else {
            None
        };
        let mut gb = if need_r {
            Some(Tensor::zeros(b.shape().to_vec()))
        } else {
            None
        };
        for i in 0..rr {
            for j in 0..cc {
                let ia = (if ar > 1 { i } else { 0 }) * ac + if ac > 1 { j } else { 0 };
                let ib = (if br > 1 { i } else { 0 }) * bc + if bc > 1 { j } else { 0 };
                let g = grad.data()[i * cc + j];
                let (da, db) = partials(a.data()[ia], b.data()[ib], g);
                if let Some(t) = ga.as_mut() {
                    t.data_mut()[ia] += da;
                }
                if let Some(t) = gb.as_mut() {
                    t.data_mut()[ib] += db;
                }
            }
        }
        if let Some(t) = ga {
            self.accumulate(grads, l, t);
        }
        if let Some(t) = gb {
            self.accumulate(grads, r, t);
        }
    }
}

fn require_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a matrix".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn broadcast_apply<F>(a: &Tensor, b: &Tensor, op: &'static str, f: F) -> Result<(Tensor, ())>
where
    F: Fn(f64, f64) -> f64,
{
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
    if !ok(ar, br) || !ok(ac, bc) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (rr, cc) = (ar.max(br), ac.max(bc));
    let mut out = vec![0.0; rr * cc];
    for i in 0..rr {
        for j in 0..cc {
            let ia = (if ar > 1 { i } else { 0 }) * ac + if ac > 1 { j } else { 0 };
            let ib = (if br > 1 { i } else { 0 }) * bc + if bc > 1 { j } else { 0 };
            out[i * cc + j] = f(a.data()[ia], b.data()[ib]);
        }
    }
    let shape = if a.shape().len().max(b.shape().len()) == 2 {
        vec![rr, cc]
    } else if a.shape().is_empty() && b.shape().is_empty() {
        vec![]
    } else {
        vec![rr * cc]
    };
    Ok((Tensor::new(shape, out)?, ()))
}

const PAR_ROWS: usize = 64;

fn mm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    let row = |i: usize, out_row: &mut [f64]| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if n >= PAR_ROWS {
        out.par_chunks_mut(m).enumerate().for_each(|(i, o)| row(i, o));
    } else {
        for (i, o) in out.chunks_mut(m).enumerate() {
            row(i, o);
        }
    }
    out
}

/// a [n,m] * b^T where b is [k,m] -> [n,k]
fn mm_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    let row = |i: usize, out_row: &mut [f64]| {
        let arow = &a[i * m..(i + 1) * m];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * m..(j + 1) * m];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    };
    if n >= PAR_ROWS {
        out.par_chunks_mut(k).enumerate().for_each(|(i, o)| row(i, o));
    } else {
        for (i, o) in out.chunks_mut(k).enumerate() {
            row(i, o);
        }
    }
    out
}

/// a^T * b where a is [n,k], b is [n,m] -> [k,m]
fn mm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            for (o, bv) in out[p * m..(p + 1) * m].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_row_and_col() {
        let mut t = Tape::new();
        let a = t
            .constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let row = t.constant(Tensor::vector(vec![10., 20., 30.])).unwrap();
        let s = t.add(a, row).unwrap();
        assert_eq!(t.value(s).data(), &[11., 22., 33., 14., 25., 36.]);
        let col = t
            .constant(Tensor::matrix(2, 1, vec![100., 200.]).unwrap())
            .unwrap();
        let s2 = t.add(a, col).unwrap();
        assert_eq!(t.value(s2).data(), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn nonfinite_is_reported_with_op_index() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(-1.0)).unwrap();
        let err = t.log(x).unwrap_err();
        match err {
            Error::NonFinite { index, op } => {
                assert_eq!(index, 1);
                assert_eq!(op, "log");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_small() {
        let mut t = Tape::new();
        let a = t
            .constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        let b = t
            .constant(Tensor::matrix(2, 2, vec![5., 6., 7., 8.]).unwrap())
            .unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19., 22., 43., 50.]);
    }
}
