//! Reverse-mode automatic differentiation on a single-use tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles and
//! replays them backwards to produce exact gradients with respect to the
//! named leaves. The operation set is fixed and small — dense layers,
//! pointwise nonlinearities, log-softmax/log-sum-exp, reductions, and a
//! quadratic form against a fixed factored matrix — because that is all
//! the objectives in this crate need.
//!
//! Tapes are built per evaluation: construct, run forward, call
//! [`Tape::backward`] once, then drop. Registering two leaves under the
//! same name is allowed and their gradients accumulate, which is how
//! multi-sample objectives share one underlying parameter.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::{solve_lower, solve_spd};
use crate::num::Real;
use crate::tensor::Tensor;

/// Recorded operation kinds.
#[derive(Debug)]
enum Op<F: Real> {
    /// Named differentiable input.
    Leaf,
    /// Unnamed input that receives no gradient.
    Constant,
    /// Matrix product (rank-1 operands are promoted rowwise/columnwise).
    Matmul,
    /// Elementwise sum, or row-broadcast sum with a rank-1 right operand.
    Add,
    /// Elementwise difference.
    Sub,
    /// Elementwise product of same-shape operands.
    Mul,
    /// Multiplication by a compile-time constant scalar.
    ScalarMul(F),
    Tanh,
    Relu,
    Square,
    /// Sum of all elements, producing a rank-0 tensor.
    Sum,
    /// Arithmetic mean of all elements, producing a rank-0 tensor.
    Mean,
    /// Rowwise log(Σ exp), max-shifted for stability.
    LogSumExp,
    /// Rowwise log-softmax, max-shifted for stability.
    LogSoftmax,
    /// `vᵀ (L Lᵀ)⁻¹ v` for a fixed lower-triangular factor `L`. The factor
    /// is constant: only `v` receives a gradient.
    QuadFormFixed { chol: Rc<Tensor<F>> },
}

#[derive(Debug)]
struct Node<F: Real> {
    op: Op<F>,
    inputs: Vec<usize>,
    value: Tensor<F>,
    name: Option<String>,
}

#[derive(Debug)]
struct TapeInner<F: Real> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

/// Recording tape. Cloning shares the underlying record.
#[derive(Debug)]
pub struct Tape<F: Real> {
    inner: Rc<RefCell<TapeInner<F>>>,
}

impl<F: Real> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug)]
pub struct Var<F: Real> {
    tape: Tape<F>,
    id: usize,
}

impl<F: Real> Clone for Var<F> {
    fn clone(&self) -> Self {
        Self { tape: self.tape.clone(), id: self.id }
    }
}

/// Gradients keyed by leaf name. Leaves registered more than once have
/// their contributions summed; leaves that do not influence the output
/// get explicit zero entries.
#[derive(Debug, Clone)]
pub struct Gradients<F: Real> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<F>> {
        self.map
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    fn push(&self, node: Node<F>) -> Result<Var<F>> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeUsage(
                "cannot record on a tape after backward has run".into(),
            ));
        }
        let id = inner.nodes.len();
        inner.nodes.push(node);
        Ok(Var { tape: self.clone(), id })
    }

    /// Registers a named differentiable input.
    pub fn leaf(&self, name: impl Into<String>, value: Tensor<F>) -> Result<Var<F>> {
        self.push(Node { op: Op::Leaf, inputs: vec![], value, name: Some(name.into()) })
    }

    /// Registers a value that participates in the forward pass but never
    /// receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Result<Var<F>> {
        self.push(Node { op: Op::Constant, inputs: vec![], value, name: None })
    }

    fn value_of(&self, id: usize) -> Tensor<F> {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Runs the reverse pass from a scalar output and consumes the tape.
    pub fn backward(&self, output: &Var<F>) -> Result<Gradients<F>> {
        if !Rc::ptr_eq(&self.inner, &output.tape.inner) {
            return Err(Error::TapeUsage("output belongs to a different tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeUsage("backward has already run on this tape".into()));
        }
        inner.consumed = true;

        let nodes = &inner.nodes;
        let out_value = &nodes[output.id].value;
        if out_value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                details: format!("output must be scalar, shape is {:?}", out_value.shape()),
            });
        }

        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(out_value.shape().to_vec(), F::one()));

        for id in (0..nodes.len()).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Matmul => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    let (m, k) = (a.rows(), a.cols());
                    let (kb, n) = if b.rank() == 1 { (b.len(), 1) } else { (b.shape()[0], b.shape()[1]) };
                    debug_assert_eq!(k, kb);
                    let g_mat = g.reshaped(vec![m, n])?;
                    let a_mat = a.reshaped(vec![m, k])?;
                    let b_mat = b.reshaped(vec![kb, n])?;
                    let da = g_mat.matmul_nt(&b_mat)?.reshaped(a.shape().to_vec())?;
                    let db = a_mat.matmul_tn(&g_mat)?.reshaped(b.shape().to_vec())?;
                    accumulate(&mut grads[node.inputs[0]], da)?;
                    accumulate(&mut grads[node.inputs[1]], db)?;
                }
                Op::Add => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    if a.rank() == 2 && b.rank() == 1 {
                        // Row-broadcast: the rank-1 operand collects column sums.
                        let n = b.len();
                        let mut db = Tensor::zeros(vec![n]);
                        for row in g.data().chunks(n) {
                            for (d, &gv) in db.data_mut().iter_mut().zip(row.iter()) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut grads[node.inputs[0]], g.clone())?;
                        accumulate(&mut grads[node.inputs[1]], db)?;
                    } else {
                        accumulate(&mut grads[node.inputs[0]], g.clone())?;
                        accumulate(&mut grads[node.inputs[1]], g.clone())?;
                    }
                }
                Op::Sub => {
                    accumulate(&mut grads[node.inputs[0]], g.clone())?;
                    accumulate(&mut grads[node.inputs[1]], g.scale(-F::one()))?;
                }
                Op::Mul => {
                    let a = &nodes[node.inputs[0]].value;
                    let b = &nodes[node.inputs[1]].value;
                    accumulate(&mut grads[node.inputs[0]], g.mul(b)?)?;
                    accumulate(&mut grads[node.inputs[1]], g.mul(a)?)?;
                }
                Op::ScalarMul(c) => {
                    accumulate(&mut grads[node.inputs[0]], g.scale(*c))?;
                }
                Op::Tanh => {
                    // d tanh(x) = 1 − tanh(x)², read from the stored output.
                    let y = &node.value;
                    let dx = g.mul(&y.map(|v| F::one() - v * v))?;
                    accumulate(&mut grads[node.inputs[0]], dx)?;
                }
                Op::Relu => {
                    let x = &nodes[node.inputs[0]].value;
                    let mask = x.map(|v| if v > F::zero() { F::one() } else { F::zero() });
                    accumulate(&mut grads[node.inputs[0]], g.mul(&mask)?)?;
                }
                Op::Square => {
                    let x = &nodes[node.inputs[0]].value;
                    let two = F::one() + F::one();
                    accumulate(&mut grads[node.inputs[0]], g.mul(&x.scale(two))?)?;
                }
                Op::Sum => {
                    let x = &nodes[node.inputs[0]].value;
                    let gv = g.data()[0];
                    accumulate(&mut grads[node.inputs[0]], Tensor::full(x.shape().to_vec(), gv))?;
                }
                Op::Mean => {
                    let x = &nodes[node.inputs[0]].value;
                    let gv = g.data()[0] / F::from_usize(x.len()).unwrap();
                    accumulate(&mut grads[node.inputs[0]], Tensor::full(x.shape().to_vec(), gv))?;
                }
                Op::LogSumExp => {
                    let x = &nodes[node.inputs[0]].value;
                    let y = &node.value;
                    let (rows, cols) = rowwise_dims(x);
                    let mut dx = Tensor::zeros(x.shape().to_vec());
                    for i in 0..rows {
                        let yi = y.data()[i];
                        let gi = g.data()[i];
                        for j in 0..cols {
                            dx.data_mut()[i * cols + j] =
                                gi * (x.data()[i * cols + j] - yi).exp();
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], dx)?;
                }
                Op::LogSoftmax => {
                    let y = &node.value;
                    let (rows, cols) = rowwise_dims(y);
                    let mut dx = Tensor::zeros(y.shape().to_vec());
                    for i in 0..rows {
                        let grow = &g.data()[i * cols..(i + 1) * cols];
                        let gsum: F = grow.iter().copied().sum();
                        for j in 0..cols {
                            let sm = y.data()[i * cols + j].exp();
                            dx.data_mut()[i * cols + j] = grow[j] - sm * gsum;
                        }
                    }
                    accumulate(&mut grads[node.inputs[0]], dx)?;
                }
                Op::QuadFormFixed { chol } => {
                    let v = &nodes[node.inputs[0]].value;
                    let u = solve_spd(chol, v.data())?;
                    let two_g = (F::one() + F::one()) * g.data()[0];
                    let dv = Tensor::from_vec(v.shape().to_vec(), u)?.scale(two_g);
                    accumulate(&mut grads[node.inputs[0]], dv)?;
                }
            }
        }

        let mut map: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let contribution = grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                match map.get_mut(name) {
                    Some(existing) => existing.axpy(F::one(), &contribution)?,
                    None => {
                        map.insert(name.clone(), contribution);
                    }
                }
            }
        }
        Ok(Gradients { map })
    }
}

fn accumulate<F: Real>(slot: &mut Option<Tensor<F>>, delta: Tensor<F>) -> Result<()> {
    match slot {
        Some(t) => t.axpy(F::one(), &delta),
        None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

/// Interprets a rank-1 tensor as a single row and a rank-2 tensor as a
/// stack of rows.
fn rowwise_dims<F: Real>(t: &Tensor<F>) -> (usize, usize) {
    match t.rank() {
        2 => (t.shape()[0], t.shape()[1]),
        _ => (1, t.len()),
    }
}

fn log_sum_exp_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (rows, cols) = rowwise_dims(x);
    if cols == 0 {
        return Err(Error::ShapeMismatch {
            op: "log_sum_exp",
            details: "operand has no columns".into(),
        });
    }
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &x.data()[i * cols..(i + 1) * cols];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let s: F = row.iter().map(|&v| (v - m).exp()).sum();
        out.push(m + s.ln());
    }
    if x.rank() == 2 {
        Tensor::from_vec(vec![rows], out)
    } else {
        Ok(Tensor::scalar(out[0]))
    }
}

fn log_softmax_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let lse = log_sum_exp_rows(x)?;
    let (rows, cols) = rowwise_dims(x);
    let mut out = x.clone();
    for i in 0..rows {
        let shift = lse.data()[i];
        for v in &mut out.data_mut()[i * cols..(i + 1) * cols] {
            *v = *v - shift;
        }
    }
    Ok(out)
}

impl<F: Real> Var<F> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Tape this var is recorded on, for registering companion constants.
    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    /// Copy of the forward value. Available before and after `backward`.
    pub fn value(&self) -> Tensor<F> {
        self.tape.value_of(self.id)
    }

    /// Forward value of a scalar node.
    pub fn item(&self) -> Result<F> {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<F>, op: &'static str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::TapeUsage(format!("{} operands are on different tapes", op)));
        }
        Ok(())
    }

    fn unary(&self, op: Op<F>, value: Tensor<F>) -> Result<Var<F>> {
        self.tape.push(Node { op, inputs: vec![self.id], value, name: None })
    }

    fn binary(&self, other: &Var<F>, op: Op<F>, value: Tensor<F>) -> Result<Var<F>> {
        self.tape.push(Node { op, inputs: vec![self.id, other.id], value, name: None })
    }

    pub fn matmul(&self, other: &Var<F>) -> Result<Var<F>> {
        self.same_tape(other, "matmul")?;
        let value = self.value().matmul(&other.value())?;
        self.binary(other, Op::Matmul, value)
    }

    pub fn add(&self, other: &Var<F>) -> Result<Var<F>> {
        self.same_tape(other, "add")?;
        let value = self.value().add(&other.value())?;
        self.binary(other, Op::Add, value)
    }

    pub fn sub(&self, other: &Var<F>) -> Result<Var<F>> {
        self.same_tape(other, "sub")?;
        let value = self.value().sub(&other.value())?;
        self.binary(other, Op::Sub, value)
    }

    pub fn mul(&self, other: &Var<F>) -> Result<Var<F>> {
        self.same_tape(other, "mul")?;
        let value = self.value().mul(&other.value())?;
        self.binary(other, Op::Mul, value)
    }

    pub fn scale(&self, c: F) -> Result<Var<F>> {
        let value = self.value().scale(c);
        self.unary(Op::ScalarMul(c), value)
    }

    pub fn tanh(&self) -> Result<Var<F>> {
        let value = self.value().map(F::tanh);
        self.unary(Op::Tanh, value)
    }

    pub fn relu(&self) -> Result<Var<F>> {
        let value = self.value().map(|v| if v > F::zero() { v } else { F::zero() });
        self.unary(Op::Relu, value)
    }

    pub fn square(&self) -> Result<Var<F>> {
        let value = self.value().map(|v| v * v);
        self.unary(Op::Square, value)
    }

    pub fn sum(&self) -> Result<Var<F>> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(Op::Sum, value)
    }

    pub fn mean(&self) -> Result<Var<F>> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mean",
                details: "cannot average zero elements".into(),
            });
        }
        let value = Tensor::scalar(v.sum() / F::from_usize(v.len()).unwrap());
        self.unary(Op::Mean, value)
    }

    /// Rowwise log(Σ exp). Rank-1 input yields a rank-0 output; rank-2
    /// input yields one value per row.
    pub fn log_sum_exp(&self) -> Result<Var<F>> {
        let value = log_sum_exp_rows(&self.value())?;
        self.unary(Op::LogSumExp, value)
    }

    /// Rowwise log-softmax with the same shape as the input.
    pub fn log_softmax(&self) -> Result<Var<F>> {
        let value = log_softmax_rows(&self.value())?;
        self.unary(Op::LogSoftmax, value)
    }

    /// Quadratic form `vᵀ (L Lᵀ)⁻¹ v` against a fixed Cholesky factor.
    /// Accepts a rank-1 operand or a single-column rank-2 operand.
    pub fn quad_form_fixed(&self, chol: Rc<Tensor<F>>) -> Result<Var<F>> {
        let v = self.value();
        let m = chol.shape()[0];
        let column_like = v.rank() == 1 || (v.rank() == 2 && v.shape()[1] == 1);
        if !column_like || v.len() != m {
            return Err(Error::ShapeMismatch {
                op: "quad_form_fixed",
                details: format!(
                    "factor is {}x{} but operand has shape {:?}",
                    m,
                    m,
                    v.shape()
                ),
            });
        }
        let w = solve_lower(&chol, v.data())?;
        let value = Tensor::scalar(w.iter().map(|&x| x * x).sum());
        self.unary(Op::QuadFormFixed { chol }, value)
    }
}

/// Central-difference gradient of a scalar function of a flat parameter
/// vector. Used as an independent check on the tape and for the one
/// objective term whose exact derivative this crate does not implement.
pub fn fd_gradient<F: Real>(
    mut f: impl FnMut(&[F]) -> Result<F>,
    x0: &[F],
    step: F,
) -> Result<Vec<F>> {
    let mut g = vec![F::zero(); x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x)?;
        x[i] = orig - step;
        let fm = f(&x)?;
        x[i] = orig;
        g[i] = (fp - fm) / (step + step);
    }
    Ok(g)
}
