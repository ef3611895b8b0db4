//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation executed through a [`Var`] handle.
//! [`Tape::backward`] replays the record in reverse execution order and
//! accumulates gradients into every leaf that was registered with
//! [`Tape::param`]. A tape is built fresh for each forward pass and dropped
//! afterwards; parameter tensors are shared with the tape through `Rc`, so
//! binding a parameter never copies it.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    LogSoftmax(usize),
    SumRows(usize),
    SumAll(usize),
    RepeatRows(usize, usize),
    Reshape(usize),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    PickCols(usize, Rc<Vec<usize>>),
    RowNegEntropy(usize),
    /// Logits, targets, clamp bound, and `d out / d logits` saved by the forward pass.
    BernoulliLogLik(usize, usize, f64, Rc<Vec<f64>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Elementwise activation selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
}

/// Arithmetic used inside matrix products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatmulPrecision {
    #[default]
    F64,
    /// Operands are rounded to `f32` for the product; results are stored as
    /// `f64`. Roughly twice as fast, for training runs only.
    F32,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    precision: MatmulPrecision,
}

fn gemm(precision: MatmulPrecision, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, out: &mut Tensor) {
    match precision {
        MatmulPrecision::F64 => general_mat_mul(1.0, &a, &b, 0.0, &mut out.view2_mut()),
        MatmulPrecision::F32 => {
            let (a32, b32) = (a.mapv(|v| v as f32), b.mapv(|v| v as f32));
            let mut c = Array2::<f32>::zeros((a.nrows(), b.ncols()));
            general_mat_mul(1.0, &a32, &b32, 0.0, &mut c);
            for (o, v) in out.data_mut().iter_mut().zip(c.iter()) {
                *o = *v as f64;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: MatmulPrecision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> MatmulPrecision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_rc(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf sharing storage with `value`.
    pub fn param(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push_rc(value, Op::Leaf, true)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    ///
    /// Leaf gradients accumulate across repeated calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        local[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(upstream) = local[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut grads = self.grads.borrow_mut();
                if grads.len() <= id {
                    grads.resize(id + 1, None);
                }
                match &mut grads[id] {
                    Some(g) => g.add_assign(&upstream),
                    slot @ None => *slot = Some(upstream),
                }
                continue;
            }
            backprop_node(&nodes, node, &upstream, &mut local, self.precision);
        }
        Ok(())
    }
}

fn accumulate(local: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut local[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, up: &Tensor, local: &mut [Option<Tensor>], precision: MatmulPrecision) {
    let out = &node.value;
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let needs = |id: usize| nodes[id].requires_grad;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if needs(a) {
                let mut ga = Tensor::zeros(av.shape());
                gemm(precision, up.view2(), bv.view2().t(), &mut ga);
                accumulate(local, nodes, a, ga);
            }
            if needs(b) {
                let mut gb = Tensor::zeros(bv.shape());
                gemm(precision, av.view2().t(), up.view2(), &mut gb);
                accumulate(local, nodes, b, gb);
            }
        }
        Op::AddRow(a, b) => {
            if needs(a) {
                accumulate(local, nodes, a, up.clone());
            }
            if needs(b) {
                let cols = up.cols();
                let mut gb = vec![0.0; cols];
                for row in up.data().chunks_exact(cols.max(1)) {
                    for (g, u) in gb.iter_mut().zip(row) {
                        *g += u;
                    }
                }
                accumulate(local, nodes, b, Tensor::from_parts(val(b).shape().to_vec(), gb));
            }
        }
        Op::Add(a, b) => {
            if needs(a) {
                accumulate(local, nodes, a, up.clone());
            }
            if needs(b) {
                accumulate(local, nodes, b, up.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                accumulate(local, nodes, a, up.clone());
            }
            if needs(b) {
                accumulate(local, nodes, b, up.map(|u| -u));
            }
        }
        Op::Mul(a, b) => {
            if needs(a) {
                accumulate(local, nodes, a, up.zip_map(val(b), |u, bv| u * bv));
            }
            if needs(b) {
                accumulate(local, nodes, b, up.zip_map(val(a), |u, av| u * av));
            }
        }
        Op::Scale(a, c) => accumulate(local, nodes, a, up.map(|u| u * c)),
        Op::AddScalar(a) => accumulate(local, nodes, a, up.clone()),
        Op::Square(a) => accumulate(local, nodes, a, up.zip_map(val(a), |u, x| 2.0 * x * u)),
        Op::Relu(a) => accumulate(
            local,
            nodes,
            a,
            up.zip_map(val(a), |u, x| if x > 0.0 { u } else { 0.0 }),
        ),
        Op::Sigmoid(a) => accumulate(local, nodes, a, up.zip_map(out, |u, s| u * s * (1.0 - s))),
        Op::Exp(a) => accumulate(local, nodes, a, up.zip_map(out, |u, e| u * e)),
        Op::Log(a) => accumulate(local, nodes, a, up.zip_map(val(a), |u, x| u / x)),
        Op::Softplus(a) => accumulate(local, nodes, a, up.zip_map(val(a), |u, x| u * sigmoid(x))),
        Op::Clamp(a, lo, hi) => accumulate(
            local,
            nodes,
            a,
            up.zip_map(val(a), |u, x| if x >= lo && x <= hi { u } else { 0.0 }),
        ),
        Op::LogSoftmax(a) => {
            // d/dx_j = u_j - softmax_j * sum_k u_k
            let cols = out.cols();
            let mut g = Vec::with_capacity(up.len());
            for (urow, orow) in up.data().chunks_exact(cols).zip(out.data().chunks_exact(cols)) {
                let total: f64 = urow.iter().sum();
                g.extend(urow.iter().zip(orow).map(|(u, lp)| u - lp.exp() * total));
            }
            accumulate(local, nodes, a, Tensor::from_parts(out.shape().to_vec(), g));
        }
        Op::SumRows(a) => {
            let av = val(a);
            let cols = av.cols();
            let mut g = Vec::with_capacity(av.len());
            for &u in up.data() {
                g.extend(std::iter::repeat_n(u, cols));
            }
            accumulate(local, nodes, a, Tensor::from_parts(av.shape().to_vec(), g));
        }
        Op::SumAll(a) => accumulate(local, nodes, a, Tensor::full(val(a).shape(), up.item())),
        Op::RepeatRows(a, times) => {
            let av = val(a);
            let cols = av.cols();
            let mut g = vec![0.0; av.len()];
            for (i, grow) in g.chunks_exact_mut(cols.max(1)).enumerate() {
                for r in 0..times {
                    let urow = up.row(i * times + r);
                    for (gv, u) in grow.iter_mut().zip(urow) {
                        *gv += u;
                    }
                }
            }
            accumulate(local, nodes, a, Tensor::from_parts(av.shape().to_vec(), g));
        }
        Op::Reshape(a) => {
            let g = Tensor::from_parts(val(a).shape().to_vec(), up.data().to_vec());
            accumulate(local, nodes, a, g);
        }
        Op::SliceCols(a, start, end) => {
            let av = val(a);
            let cols = av.cols();
            let width = end - start;
            let mut g = vec![0.0; av.len()];
            for (i, grow) in g.chunks_exact_mut(cols).enumerate() {
                grow[start..end].copy_from_slice(&up.data()[i * width..(i + 1) * width]);
            }
            accumulate(local, nodes, a, Tensor::from_parts(av.shape().to_vec(), g));
        }
        Op::SliceRows(a, start, end) => {
            let av = val(a);
            let cols = av.cols();
            let mut g = vec![0.0; av.len()];
            g[start * cols..end * cols].copy_from_slice(up.data());
            accumulate(local, nodes, a, Tensor::from_parts(av.shape().to_vec(), g));
        }
        Op::PickCols(a, ref idx) => {
            let av = val(a);
            let cols = av.cols();
            let mut g = vec![0.0; av.len()];
            for (i, (&j, &u)) in idx.iter().zip(up.data()).enumerate() {
                g[i * cols + j] = u;
            }
            accumulate(local, nodes, a, Tensor::from_parts(av.shape().to_vec(), g));
        }
        Op::RowNegEntropy(a) => {
            // out_i = sum_k p_k log p_k with p = exp(lp); d/d lp_k = p_k (lp_k + 1)
            let av = val(a);
            let cols = av.cols();
            let mut g = Vec::with_capacity(av.len());
            for (row, &u) in av.data().chunks_exact(cols).zip(up.data()) {
                g.extend(row.iter().map(|&lp| {
                    let p = lp.exp();
                    if p == 0.0 {
                        0.0
                    } else {
                        u * p * (lp + 1.0)
                    }
                }));
            }
            accumulate(local, nodes, a, Tensor::from_parts(av.shape().to_vec(), g));
        }
        Op::BernoulliLogLik(l, x, bound, ref dl) => {
            let lv = val(l);
            let cols = lv.cols().max(1);
            if needs(l) {
                let mut g = Vec::with_capacity(lv.len());
                for (drow, &u) in dl.chunks_exact(cols).zip(up.data()) {
                    g.extend(drow.iter().map(|d| u * d));
                }
                accumulate(local, nodes, l, Tensor::from_parts(lv.shape().to_vec(), g));
            }
            if needs(x) {
                let mut g = Vec::with_capacity(lv.len());
                for (lrow, &u) in lv.data().chunks_exact(cols).zip(up.data()) {
                    g.extend(lrow.iter().map(|&raw| u * raw.clamp(-bound, bound)));
                }
                accumulate(local, nodes, x, Tensor::from_parts(lv.shape().to_vec(), g));
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

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let mut out = Tensor::zeros(&[a.shape()[0], b.shape()[1]]);
        gemm(self.tape.precision, a.view2(), b.view2(), &mut out);
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// Adds the vector `bias` (length `m`) to every row of an `[n, m]` matrix.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        if a.rank() != 2 || b.len() != a.shape()[1] {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let cols = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_exact_mut(cols.max(1)) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.binary(bias, out, Op::AddRow(self.id, bias.id)))
    }

    /// `x W + b`.
    pub fn affine(&self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add_row(bias)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "add")?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "sub")?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&other, "mul")?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(bad) = a.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a.map(f64::ln), Op::Log(self.id)))
    }

    pub fn softplus(&self) -> Var<'t> {
        let v = self.value().map(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'t>> {
        Ok(match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Exp => self.exp(),
            Activation::Log => self.log()?,
            Activation::Softplus => self.softplus(),
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || a.cols() == 0 {
            return Err(Error::dim("log_softmax", a.shape(), &[]));
        }
        let cols = a.cols();
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.unary(out, Op::LogSoftmax(self.id)))
    }

    /// `[n, m] -> [n]`, summing each row.
    /// Row sums of `x * l - softplus(l)` where `l` is `self` clamped to
    /// `[-bound, bound]`: the Bernoulli log-likelihood of targets `x` in one
    /// node instead of five full-size intermediates.
    pub fn bernoulli_log_lik(&self, x: Var<'t>, bound: f64) -> Result<Var<'t>> {
        let (l, t) = self.same_shape(&x, "bernoulli_log_lik")?;
        if l.rank() != 2 {
            return Err(Error::Contract(format!(
                "bernoulli_log_lik expects a matrix, got {:?}",
                l.shape()
            )));
        }
        let cols = l.cols();
        let mut dl = Vec::with_capacity(l.len());
        let mut data = vec![0.0; l.rows()];
        if cols > 0 {
            for ((lr, xr), out) in l
                .data()
                .chunks_exact(cols)
                .zip(t.data().chunks_exact(cols))
                .zip(&mut data)
            {
                for (&raw, &xv) in lr.iter().zip(xr) {
                    let v = raw.clamp(-bound, bound);
                    // e lies in (0, 1], where ln(1 + e) is as accurate as ln_1p in absolute terms.
                    let e = (-v.abs()).exp();
                    *out += xv * v - (v.max(0.0) + (1.0 + e).ln());
                    let sig = if v >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                    dl.push(if raw.abs() <= bound { xv - sig } else { 0.0 });
                }
            }
        }
        let op = Op::BernoulliLogLik(self.id, x.id, bound, Rc::new(dl));
        Ok(self.binary(x, Tensor::from_parts(vec![l.rows()], data), op))
    }

    pub fn sum_rows(&self) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = (a.rows(), a.cols());
        let data: Vec<f64> = if cols == 0 {
            vec![0.0; rows]
        } else {
            a.data().chunks_exact(cols).map(|r| r.iter().sum()).collect()
        };
        self.unary(Tensor::from_parts(vec![rows], data), Op::SumRows(self.id))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Var<'t> {
        let v = self.value().repeat_rows(times);
        self.unary(v, Op::RepeatRows(self.id, times))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::dim("reshape", a.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), a.data().to_vec());
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || start > end || end > a.cols() {
            return Err(Error::dim("slice_cols", a.shape(), &[start, end]));
        }
        let cols = a.cols();
        let mut data = Vec::with_capacity(a.rows() * (end - start));
        for row in a.data().chunks_exact(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::from_parts(vec![a.rows(), end - start], data);
        Ok(self.unary(out, Op::SliceCols(self.id, start, end)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() == 0 || start > end || end > a.rows() {
            return Err(Error::dim("slice_rows", a.shape(), &[start, end]));
        }
        let cols = a.cols();
        let mut shape = a.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::from_parts(shape, a.data()[start * cols..end * cols].to_vec());
        Ok(self.unary(out, Op::SliceRows(self.id, start, end)))
    }

    /// `out[i] = x[i, index[i]]`.
    pub fn pick_cols(&self, index: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || index.len() != a.rows() || index.iter().any(|&j| j >= a.cols()) {
            return Err(Error::dim("pick_cols", a.shape(), &[index.len()]));
        }
        let data = index.iter().enumerate().map(|(i, &j)| a.get(i, j)).collect();
        let out = Tensor::from_parts(vec![a.rows()], data);
        Ok(self.unary(out, Op::PickCols(self.id, Rc::new(index.to_vec()))))
    }

    /// Row-wise `sum_k p_k log p_k` for a matrix of log-probabilities,
    /// with `0 log 0 = 0`.
    pub fn row_neg_entropy(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::dim("row_neg_entropy", a.shape(), &[]));
        }
        let cols = a.cols();
        let data = a
            .data()
            .chunks_exact(cols.max(1))
            .map(|row| {
                row.iter()
                    .map(|&lp| {
                        let p = lp.exp();
                        if p == 0.0 {
                            0.0
                        } else {
                            p * lp
                        }
                    })
                    .sum()
            })
            .collect();
        let out = Tensor::from_parts(vec![a.rows()], data);
        Ok(self.unary(out, Op::RowNegEntropy(self.id)))
    }
}
