//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! append-only, so the reverse sweep in [`Tape::backward`] is a single pass
//! from the loss back to the leaves. Nodes built only from constants are
//! never differentiated.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm { input: Var, inv_std: Vec<F> },
    SoftmaxRows(Var),
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    MeanRows(Var),
    MaxRows { input: Var, argmax: Vec<usize> },
    BceLogit { logit: Var, target: bool, pos_weight: F },
}

#[derive(Debug)]
struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(GELU_COEF);
    let half = F::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x);
    (y, dy)
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus<F: Scalar>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v).get(0, 0)
    }

    pub fn constant(&mut self, value: Matrix<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; linear layers store weights as `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.cols(), "add_row width");
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), r.cols(), "mul_row width");
        for i in 0..v.rows() {
            for (x, &g) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x *= g;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let x = self.value(a);
        let n = F::of(x.cols() as f64);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { input: a, inv_std }, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let v = Matrix::from_fn(x.rows(), len, |i, j| x.get(i, start + j));
        let rg = self.rg(a);
        self.push(v, Op::SliceCols { input: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            for i in 0..rows {
                v.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::stack_rows(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::StackRows(parts.to_vec()), rg)
    }

    /// Column means, `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = F::of(x.rows() as f64);
        let mut v = Matrix::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, &e) in v.row_mut(0).iter_mut().zip(x.row(i)) {
                *o += e;
            }
        }
        v.scale_assign(F::one() / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a), rg)
    }

    /// Column maxima, `r × c → 1 × c`.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Matrix::filled(1, x.cols(), F::neg_infinity());
        let mut argmax = vec![0; x.cols()];
        for i in 0..x.rows() {
            for (j, &e) in x.row(i).iter().enumerate() {
                if e > v.get(0, j) {
                    v.set(0, j, e);
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::MaxRows { input: a, argmax }, rg)
    }

    /// Binary cross-entropy on a `1 × 1` logit; positives weighted by `pos_weight`.
    pub fn bce_logit(&mut self, logit: Var, target: bool, pos_weight: F) -> Var {
        let l = self.scalar(logit);
        let loss = if target {
            pos_weight * softplus(-l)
        } else {
            softplus(l)
        };
        let rg = self.rg(logit);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::BceLogit {
                logit,
                target,
                pos_weight,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node. Returns one optional gradient per node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let acc = |v: Var, d: Matrix<F>, grads: &mut Vec<Option<Matrix<F>>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul_nt(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).matmul_tn(&g), &mut grads);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.matmul(self.value(*b)), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, g.matmul_tn(self.value(*a)), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        acc(*row, column_sums(&g), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    if self.rg(*row) {
                        let x = self.value(*a);
                        let mut dr = Matrix::zeros(1, r.cols());
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                let t = dr.get(0, j) + g.get(i, j) * x.get(i, j);
                                dr.set(0, j, t);
                            }
                        }
                        acc(*row, dr, &mut grads);
                    }
                    if self.rg(*a) {
                        let mut da = g.clone();
                        for i in 0..da.rows() {
                            for (d, &s) in da.row_mut(i).iter_mut().zip(r.row(0)) {
                                *d *= s;
                            }
                        }
                        acc(*a, da, &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.zip_map(self.value(*b), |x, y| x * y), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, g.zip_map(self.value(*a), |x, y| x * y), &mut grads);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|x| x * s), &mut grads);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| gv * gelu_parts(x).1);
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm { input, inv_std } => {
                    let xhat = &node.value;
                    let n = F::of(g.cols() as f64);
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let sum_g: F = gr.iter().copied().sum();
                        let sum_gx: F = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[i] / n;
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = k * (n * gr[j] - sum_g - xr[j] * sum_gx);
                        }
                    }
                    acc(*input, dx, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let dot: F = g.row(i).iter().zip(y.row(i)).map(|(&a, &b)| a * b).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = y.get(i, j) * (g.get(i, j) - dot);
                        }
                    }
                    acc(*a, dx, &mut grads);
                }
                Op::SliceCols { input, start } => {
                    let src = self.value(*input);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*input, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let d = Matrix::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                            acc(p, d, &mut grads);
                        }
                        off += w;
                    }
                }
                Op::StackRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        if self.rg(p) {
                            let d = Matrix::from_fn(h, g.cols(), |i, j| g.get(off + i, j));
                            acc(p, d, &mut grads);
                        }
                        off += h;
                    }
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let inv = F::one() / F::of(src.rows() as f64);
                    let d = Matrix::from_fn(src.rows(), src.cols(), |_, j| g.get(0, j) * inv);
                    acc(*a, d, &mut grads);
                }
                Op::MaxRows { input, argmax } => {
                    let src = self.value(*input);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (j, &i) in argmax.iter().enumerate() {
                        d.set(i, j, g.get(0, j));
                    }
                    acc(*input, d, &mut grads);
                }
                Op::BceLogit {
                    logit,
                    target,
                    pos_weight,
                } => {
                    let l = self.scalar(*logit);
                    let dl = if *target {
                        -*pos_weight * sigmoid(-l)
                    } else {
                        sigmoid(l)
                    };
                    acc(*logit, Matrix::filled(1, 1, dl * g.get(0, 0)), &mut grads);
                }
            }
        }
        Gradients { grads }
    }
}

fn column_sums<F: Scalar>(g: &Matrix<F>) -> Matrix<F> {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

/// Gradients of one backward pass; only leaves keep theirs.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Matrix<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
