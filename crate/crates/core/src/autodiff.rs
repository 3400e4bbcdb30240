//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it runs (define-by-run); the graph
//! is rebuilt for each loss evaluation, so sequence lengths are free to vary
//! between batches. [`Var`] is a cheap handle into the tape. Calling
//! [`Tape::backward`] sweeps the recorded nodes in reverse append order
//! exactly once and accumulates gradients into every `requires_grad` leaf.
//!
//! Matrix inverses are never materialized: everything that looks like an
//! inverse in covariance algebra goes through [`Var::solve_spd`] or
//! [`Var::log_det_spd`], which factor once and reuse the factor in the
//! backward rule.
//!
//! Tapes are single-threaded; distinct tapes on distinct threads are fully
//! independent, which is how batched losses are evaluated in parallel.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a matrix-valued node on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
    rows: usize,
    cols: usize,
}

/// A recording of matrix operations supporting a single reverse sweep.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

struct Node {
    value: Matrix,
    op: Op,
    /// True for requires-grad leaves and anything computed from one.
    needs_grad: bool,
    /// Persistent gradient buffer; only populated for requires-grad leaves.
    grad: Option<Matrix>,
    requires_grad: bool,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Tanh(usize),
    Exp(usize),
    ElemMul(usize, usize),
    /// diag(v) * m with v a column vector.
    RowScale(usize, usize),
    /// Column vector to diagonal matrix.
    DiagEmbed(usize),
    Sum(usize),
    Trace(usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    /// Value is the lower Cholesky factor of the argument.
    Cholesky(usize),
    /// Value is a^{-1} b; the factor of a is cached for the backward rule.
    SolveSpd {
        a: usize,
        b: usize,
        factor: Matrix,
    },
    /// 1x1 value log|a|; factor cached.
    LogDetSpd {
        a: usize,
        factor: Matrix,
    },
}

struct TapeInner {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Records a leaf. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// 1x1 constant.
    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Matrix::from_rows(1, 1, &[v]))
    }

    pub fn identity(&self, n: usize) -> Var {
        self.constant(Matrix::identity(n))
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in &mut self.inner.borrow_mut().nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Visits nodes in reverse append
    /// order exactly once; repeated calls without [`Tape::zero_grad`]
    /// accumulate into leaf gradients.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if loss.rows != 1 || loss.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar (1x1) loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let mut adjoint: Vec<Option<Matrix>> = Vec::new();
        adjoint.resize_with(loss.idx + 1, || None);
        adjoint[loss.idx] = Some(Matrix::from_rows(1, 1, &[1.0]));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            if !inner.nodes[idx].needs_grad {
                continue;
            }
            inner.step_backward(idx, &g, &mut adjoint)?;
            let node = &mut inner.nodes[idx];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => *acc = acc.add(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any.
    pub fn grad(&self, var: &Var) -> Option<Matrix> {
        self.inner.borrow().nodes[var.idx].grad.clone()
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "tape op produced a non-finite value");
        let rows = value.rows();
        let cols = value.cols();
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            idx,
            rows,
            cols,
        }
    }
}

impl TapeInner {
    fn value(&self, idx: usize) -> &Matrix {
        &self.nodes[idx].value
    }

    fn accumulate(
        &self,
        adjoint: &mut [Option<Matrix>],
        idx: usize,
        contribution: Matrix,
    ) -> Result<()> {
        if !self.nodes[idx].needs_grad {
            return Ok(());
        }
        match &mut adjoint[idx] {
            Some(acc) => *acc = acc.add(&contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn step_backward(
        &self,
        idx: usize,
        g: &Matrix,
        adjoint: &mut [Option<Matrix>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let ga = g.matmul(&self.value(b).transpose())?;
                    self.accumulate(adjoint, a, ga)?;
                }
                if self.nodes[b].needs_grad {
                    let gb = self.value(a).transpose().matmul(g)?;
                    self.accumulate(adjoint, b, gb)?;
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(adjoint, a, g.clone())?;
                self.accumulate(adjoint, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(adjoint, a, g.clone())?;
                self.accumulate(adjoint, b, g.scale(-1.0))?;
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(adjoint, a, g.scale(c))?;
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(adjoint, a, g.clone())?;
            }
            Op::Transpose(a) => {
                let a = *a;
                self.accumulate(adjoint, a, g.transpose())?;
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = &self.nodes[idx].value;
                let ga = Matrix::from_fn(y.rows(), y.cols(), |i, j| {
                    let t = y.get(i, j);
                    g.get(i, j) * (1.0 - t * t)
                });
                self.accumulate(adjoint, a, ga)?;
            }
            Op::Exp(a) => {
                let a = *a;
                let ga = g.hadamard(&self.nodes[idx].value)?;
                self.accumulate(adjoint, a, ga)?;
            }
            Op::ElemMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let ga = g.hadamard(self.value(b))?;
                    self.accumulate(adjoint, a, ga)?;
                }
                if self.nodes[b].needs_grad {
                    let gb = g.hadamard(self.value(a))?;
                    self.accumulate(adjoint, b, gb)?;
                }
            }
            Op::RowScale(v, m) => {
                let (v, m) = (*v, *m);
                if self.nodes[m].needs_grad {
                    let vv = self.value(v);
                    let gm = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * vv.get(i, 0));
                    self.accumulate(adjoint, m, gm)?;
                }
                if self.nodes[v].needs_grad {
                    let mv = self.value(m);
                    let gv = Matrix::from_fn(g.rows(), 1, |i, _| {
                        (0..g.cols()).map(|j| g.get(i, j) * mv.get(i, j)).sum()
                    });
                    self.accumulate(adjoint, v, gv)?;
                }
            }
            Op::DiagEmbed(v) => {
                let v = *v;
                let gv = Matrix::from_fn(g.rows(), 1, |i, _| g.get(i, i));
                self.accumulate(adjoint, v, gv)?;
            }
            Op::Sum(a) => {
                let a = *a;
                let s = g.scalar();
                let av = self.value(a);
                self.accumulate(adjoint, a, Matrix::from_fn(av.rows(), av.cols(), |_, _| s))?;
            }
            Op::Trace(a) => {
                let a = *a;
                let s = g.scalar();
                let av = self.value(a);
                let ga = Matrix::from_fn(av.rows(), av.cols(), |i, j| if i == j { s } else { 0.0 });
                self.accumulate(adjoint, a, ga)?;
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let ra = self.value(a).rows();
                let rb = self.value(b).rows();
                self.accumulate(adjoint, a, g.slice_rows(0, ra)?)?;
                self.accumulate(adjoint, b, g.slice_rows(ra, rb)?)?;
            }
            Op::SliceRows(a, start) => {
                let (a, start) = (*a, *start);
                let av = self.value(a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(start + i, j, g.get(i, j));
                    }
                }
                self.accumulate(adjoint, a, ga)?;
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                let av = self.value(a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(adjoint, a, ga)?;
            }
            Op::Cholesky(a) => {
                let a = *a;
                let l = &self.nodes[idx].value;
                self.accumulate(adjoint, a, cholesky_backward(l, g))?;
            }
            Op::SolveSpd { a, b, factor } => {
                let (a, b) = (*a, *b);
                // x = A^{-1} b;  b_bar = A^{-1} g;  A_bar = -b_bar x^T.
                let gb = factor.solve_with_factor(g)?;
                if self.nodes[a].needs_grad {
                    let x = &self.nodes[idx].value;
                    let ga = gb.matmul(&x.transpose())?.scale(-1.0);
                    self.accumulate(adjoint, a, ga)?;
                }
                if self.nodes[b].needs_grad {
                    self.accumulate(adjoint, b, gb)?;
                }
            }
            Op::LogDetSpd { a, factor } => {
                let a = *a;
                // d log|A| = Tr(A^{-1} dA).
                let n = factor.rows();
                let inv = factor.solve_with_factor(&Matrix::identity(n))?;
                self.accumulate(adjoint, a, inv.scale(g.scalar()))?;
            }
        }
        Ok(())
    }
}

/// Reverse-mode rule for the Cholesky factorization: given the factor `L`
/// of `A = L L^T` and the gradient `g` with respect to `L`, returns the
/// (symmetric) gradient with respect to `A`. Contributions to the
/// structurally-zero upper triangle of `L` are discarded.
fn cholesky_backward(l: &Matrix, g: &Matrix) -> Matrix {
    let n = l.rows();
    let masked = Matrix::from_fn(n, n, |i, j| if j <= i { g.get(i, j) } else { 0.0 });
    // P = Phi(L^T g): lower triangle with halved diagonal.
    let lt_g = l.transpose().matmul(&masked).expect("square shapes");
    let p = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            0.5 * lt_g.get(i, j)
        } else if j < i {
            lt_g.get(i, j)
        } else {
            0.0
        }
    });
    let sym = p.add(&p.transpose()).expect("same shape");
    // A_bar = 0.5 * L^{-T} (P + P^T) L^{-1}.
    let half = l.solve_lower_transposed(&sym);
    let solved = l.solve_lower_transposed(&half.transpose()).transpose();
    solved.scale(0.5)
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Snapshot of the node's value.
    pub fn value(&self) -> Matrix {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// The single entry of a 1x1 node.
    pub fn scalar_value(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.idx].value.scalar()
    }

    /// Accumulated gradient, if this is a requires-grad leaf.
    pub fn grad(&self) -> Option<Matrix> {
        self.tape.grad(self)
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "operands live on different tapes"
        );
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op, value: Matrix) -> Var {
        let needs = self.tape.inner.borrow().nodes[self.idx].needs_grad;
        self.tape.push(value, op(self.idx), needs, false)
    }

    fn binary(&self, other: &Var, op: impl FnOnce(usize, usize) -> Op, value: Matrix) -> Var {
        self.same_tape(other);
        let needs = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].needs_grad || inner.nodes[other.idx].needs_grad
        };
        self.tape.push(value, op(self.idx, other.idx), needs, false)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let value = {
            let inner = self.tape.inner.borrow();
            inner.value(self.idx).matmul(inner.value(other.idx))?
        };
        Ok(self.binary(other, Op::MatMul, value))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let value = {
            let inner = self.tape.inner.borrow();
            inner.value(self.idx).add(inner.value(other.idx))?
        };
        Ok(self.binary(other, Op::Add, value))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let value = {
            let inner = self.tape.inner.borrow();
            inner.value(self.idx).sub(inner.value(other.idx))?
        };
        Ok(self.binary(other, Op::Sub, value))
    }

    pub fn elem_mul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let value = {
            let inner = self.tape.inner.borrow();
            inner.value(self.idx).hadamard(inner.value(other.idx))?
        };
        Ok(self.binary(other, Op::ElemMul, value))
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.tape.inner.borrow().value(self.idx).scale(c);
        self.unary(|a| Op::Scale(a, c), value)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    /// Adds a scalar constant to every entry.
    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.tape.inner.borrow().value(self.idx).map(|v| v + c);
        self.unary(Op::AddScalar, value)
    }

    pub fn transpose(&self) -> Var {
        let value = self.tape.inner.borrow().value(self.idx).transpose();
        self.unary(Op::Transpose, value)
    }

    pub fn tanh(&self) -> Var {
        let value = self.tape.inner.borrow().value(self.idx).map(f64::tanh);
        self.unary(Op::Tanh, value)
    }

    pub fn exp(&self) -> Var {
        let value = self.tape.inner.borrow().value(self.idx).map(f64::exp);
        self.unary(Op::Exp, value)
    }

    /// diag(self) * m, with self a column vector.
    pub fn row_scale(&self, m: &Var) -> Result<Var> {
        self.same_tape(m);
        if self.cols != 1 || self.rows != m.rows {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: m.rows,
                rhs_cols: m.cols,
            });
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let v = inner.value(self.idx);
            let mm = inner.value(m.idx);
            Matrix::from_fn(mm.rows(), mm.cols(), |i, j| v.get(i, 0) * mm.get(i, j))
        };
        Ok(self.binary(m, Op::RowScale, value))
    }

    /// Column vector to diagonal matrix.
    pub fn diag_embed(&self) -> Result<Var> {
        if self.cols != 1 {
            return Err(Error::Contract(format!(
                "diag_embed requires a column vector, got {}x{}",
                self.rows, self.cols
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let v = inner.value(self.idx);
            Matrix::from_fn(v.rows(), v.rows(), |i, j| if i == j { v.get(i, 0) } else { 0.0 })
        };
        Ok(self.unary(Op::DiagEmbed, value))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self) -> Var {
        let value = Matrix::from_rows(1, 1, &[self.tape.inner.borrow().value(self.idx).sum()]);
        self.unary(Op::Sum, value)
    }

    pub fn trace(&self) -> Var {
        let value = Matrix::from_rows(1, 1, &[self.tape.inner.borrow().value(self.idx).trace()]);
        self.unary(Op::Trace, value)
    }

    pub fn concat_rows(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let value = {
            let inner = self.tape.inner.borrow();
            inner.value(self.idx).concat_rows(inner.value(other.idx))?
        };
        Ok(self.binary(other, Op::ConcatRows, value))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let value = self.tape.inner.borrow().value(self.idx).slice_rows(start, len)?;
        Ok(self.unary(|a| Op::SliceRows(a, start), value))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let value = self.tape.inner.borrow().value(self.idx).slice_cols(start, len)?;
        Ok(self.unary(|a| Op::SliceCols(a, start), value))
    }

    /// Lower Cholesky factor of a symmetric positive-definite matrix.
    pub fn cholesky(&self) -> Result<Var> {
        let value = {
            let inner = self.tape.inner.borrow();
            let a = inner.value(self.idx);
            check_symmetric(a)?;
            a.cholesky()?
        };
        Ok(self.unary(Op::Cholesky, value))
    }

    /// `self^{-1} * b` for symmetric positive-definite `self`.
    pub fn solve_spd(&self, b: &Var) -> Result<Var> {
        self.same_tape(b);
        let (value, factor) = {
            let inner = self.tape.inner.borrow();
            let a = inner.value(self.idx);
            check_symmetric(a)?;
            let factor = a.cholesky()?;
            let value = factor.solve_with_factor(inner.value(b.idx))?;
            (value, factor)
        };
        let needs = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.idx].needs_grad || inner.nodes[b.idx].needs_grad
        };
        Ok(self.tape.push(
            value,
            Op::SolveSpd {
                a: self.idx,
                b: b.idx,
                factor,
            },
            needs,
            false,
        ))
    }

    /// log-determinant of a symmetric positive-definite matrix, via its
    /// Cholesky factor.
    pub fn log_det_spd(&self) -> Result<Var> {
        let (value, factor, needs) = {
            let inner = self.tape.inner.borrow();
            let a = inner.value(self.idx);
            check_symmetric(a)?;
            let factor = a.cholesky()?;
            let ld: f64 = (0..factor.rows()).map(|i| 2.0 * factor.get(i, i).ln()).sum();
            (
                Matrix::from_rows(1, 1, &[ld]),
                factor,
                inner.nodes[self.idx].needs_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::LogDetSpd {
                a: self.idx,
                factor,
            },
            needs,
            false,
        ))
    }

    /// Quadratic form `v^T self^{-1} v` without materializing the inverse.
    pub fn inv_quad_form(&self, v: &Var) -> Result<Var> {
        let solved = self.solve_spd(v)?;
        v.transpose().matmul(&solved)
    }
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if a.rows() != a.cols() {
        return Err(Error::Contract(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let tol = 1e-9 * a.max_abs().max(1.0);
    let asym = a.asymmetry();
    if asym > tol {
        return Err(Error::Contract(format!(
            "matrix is not symmetric (max |A_ij - A_ji| = {asym:.3e})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of a scalar function of one matrix.
    fn fd_grad(at: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
        Matrix::from_fn(at.rows(), at.cols(), |i, j| {
            let mut plus = at.clone();
            plus.set(i, j, at.get(i, j) + h);
            let mut minus = at.clone();
            minus.set(i, j, at.get(i, j) - h);
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
    }

    fn max_rel_err(got: &Matrix, want: &Matrix) -> f64 {
        let scale = want.max_abs().max(1e-12);
        got.sub(want).unwrap().max_abs() / scale
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = random_matrix(&mut rng, 3, 3);
        let b0 = random_matrix(&mut rng, 3, 3);

        let loss_of = |a: &Matrix, b: &Matrix| {
            let tape = Tape::new();
            let av = tape.leaf(a.clone(), true);
            let bv = tape.leaf(b.clone(), true);
            av.matmul(&bv).unwrap().sum().scalar_value()
        };

        let tape = Tape::new();
        let a = tape.leaf(a0.clone(), true);
        let b = tape.leaf(b0.clone(), true);
        let loss = a.matmul(&b).unwrap().sum();
        tape.backward(&loss).unwrap();

        let fd_a = fd_grad(&a0, 1e-5, |m| loss_of(m, &b0));
        let fd_b = fd_grad(&b0, 1e-5, |m| loss_of(&a0, m));
        assert!(max_rel_err(&a.grad().unwrap(), &fd_a) <= 1e-6);
        assert!(max_rel_err(&b.grad().unwrap(), &fd_b) <= 1e-6);
    }

    #[test]
    fn logdet_gradient_via_cholesky_matches_finite_differences() {
        // SPD input built as B B^T + I from an unconstrained leaf, so that
        // finite differences over B are well defined.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b0 = random_matrix(&mut rng, 4, 4);

        let loss_of = |b: &Matrix| {
            let tape = Tape::new();
            let bv = tape.leaf(b.clone(), true);
            let spd = bv
                .matmul(&bv.transpose())
                .unwrap()
                .add(&tape.identity(4))
                .unwrap();
            spd.log_det_spd().unwrap().scalar_value()
        };

        let tape = Tape::new();
        let bv = tape.leaf(b0.clone(), true);
        let spd = bv
            .matmul(&bv.transpose())
            .unwrap()
            .add(&tape.identity(4))
            .unwrap();
        let loss = spd.log_det_spd().unwrap();
        tape.backward(&loss).unwrap();

        let fd = fd_grad(&b0, 1e-5, loss_of);
        assert!(max_rel_err(&bv.grad().unwrap(), &fd) <= 1e-5);
    }

    #[test]
    fn cholesky_factor_gradient_matches_finite_differences() {
        // Differentiates sum(chol(BB^T + I)) rather than a function of the
        // log-determinant, which exercises the factor's own backward rule.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b0 = random_matrix(&mut rng, 3, 3);

        let loss_of = |b: &Matrix| {
            let tape = Tape::new();
            let bv = tape.leaf(b.clone(), true);
            let spd = bv
                .matmul(&bv.transpose())
                .unwrap()
                .add(&tape.identity(3))
                .unwrap();
            spd.cholesky().unwrap().sum().scalar_value()
        };

        let tape = Tape::new();
        let bv = tape.leaf(b0.clone(), true);
        let spd = bv
            .matmul(&bv.transpose())
            .unwrap()
            .add(&tape.identity(3))
            .unwrap();
        let loss = spd.cholesky().unwrap().sum();
        tape.backward(&loss).unwrap();

        let fd = fd_grad(&b0, 1e-5, loss_of);
        assert!(max_rel_err(&bv.grad().unwrap(), &fd) <= 1e-5);
    }

    #[test]
    fn solve_spd_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b0 = random_matrix(&mut rng, 3, 3);
        let v0 = random_matrix(&mut rng, 3, 1);

        let loss_of = |b: &Matrix, v: &Matrix| {
            let tape = Tape::new();
            let bv = tape.leaf(b.clone(), true);
            let vv = tape.leaf(v.clone(), true);
            let spd = bv
                .matmul(&bv.transpose())
                .unwrap()
                .add(&tape.identity(3))
                .unwrap();
            spd.solve_spd(&vv).unwrap().sum().scalar_value()
        };

        let tape = Tape::new();
        let bv = tape.leaf(b0.clone(), true);
        let vv = tape.leaf(v0.clone(), true);
        let spd = bv
            .matmul(&bv.transpose())
            .unwrap()
            .add(&tape.identity(3))
            .unwrap();
        let loss = spd.solve_spd(&vv).unwrap().sum();
        tape.backward(&loss).unwrap();

        let fd_b = fd_grad(&b0, 1e-5, |m| loss_of(m, &v0));
        let fd_v = fd_grad(&v0, 1e-5, |m| loss_of(&b0, m));
        assert!(max_rel_err(&bv.grad().unwrap(), &fd_b) <= 1e-5);
        assert!(max_rel_err(&vv.grad().unwrap(), &fd_v) <= 1e-5);
    }

    #[test]
    fn composed_graph_gradient_matches_finite_differences() {
        // tanh / row_scale / slicing / quadratic form chained together.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w0 = random_matrix(&mut rng, 4, 4);

        let loss_of = |w: &Matrix| {
            let tape = Tape::new();
            let wv = tape.leaf(w.clone(), true);
            let x = tape.constant(Matrix::col_vec(&[0.3, -0.7, 0.2, 0.9]));
            let h = wv.matmul(&x).unwrap().tanh();
            let scaled = h.row_scale(&wv.slice_cols(0, 1).unwrap()).unwrap();
            let spd = wv
                .matmul(&wv.transpose())
                .unwrap()
                .add(&tape.identity(4))
                .unwrap();
            spd.inv_quad_form(&scaled).unwrap().scalar_value()
        };

        let tape = Tape::new();
        let wv = tape.leaf(w0.clone(), true);
        let x = tape.constant(Matrix::col_vec(&[0.3, -0.7, 0.2, 0.9]));
        let h = wv.matmul(&x).unwrap().tanh();
        let scaled = h.row_scale(&wv.slice_cols(0, 1).unwrap()).unwrap();
        let spd = wv
            .matmul(&wv.transpose())
            .unwrap()
            .add(&tape.identity(4))
            .unwrap();
        let loss = spd.inv_quad_form(&scaled).unwrap();
        tape.backward(&loss).unwrap();

        let fd = fd_grad(&w0, 1e-5, loss_of);
        assert!(max_rel_err(&wv.grad().unwrap(), &fd) <= 1e-4);
    }

    #[test]
    fn backward_of_leaf_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(1, 1, &[3.5]), true);
        tape.backward(&x).unwrap();
        assert_eq!(x.grad().unwrap().scalar(), 1.0);
    }

    #[test]
    fn backward_of_half_squared_frobenius_is_the_matrix() {
        // loss = tr(W^T W) / 2  =>  grad = W.
        let tape = Tape::new();
        let w0 = Matrix::from_rows(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let w = tape.leaf(w0.clone(), true);
        let loss = w.transpose().matmul(&w).unwrap().trace().scale(0.5);
        tape.backward(&loss).unwrap();
        assert!(max_rel_err(&w.grad().unwrap(), &w0) <= 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 1), true);
        let err = tape.backward(&x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(1, 1, &[2.0]), true);
        let loss = x.scale(3.0);
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().scalar(), 6.0);
        tape.zero_grad();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().scalar(), 3.0);
    }

    #[test]
    fn no_grad_leaf_accumulates_nothing() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(1, 1, &[2.0]), true);
        let c = tape.constant(Matrix::from_rows(1, 1, &[5.0]));
        let loss = x.elem_mul(&c).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().scalar(), 5.0);
        assert!(c.grad().is_none());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w0 = random_matrix(&mut rng, 3, 3);
        let (a, b) = (1.7, -0.4);

        let grads = |combine: bool| {
            let tape = Tape::new();
            let w = tape.leaf(w0.clone(), true);
            let f = w.matmul(&w).unwrap().trace();
            let g = w.tanh().sum();
            if combine {
                let loss = f.scale(a).add(&g.scale(b)).unwrap();
                tape.backward(&loss).unwrap();
                w.grad().unwrap()
            } else {
                tape.backward(&f).unwrap();
                let gf = w.grad().unwrap();
                tape.zero_grad();
                tape.backward(&g).unwrap();
                let gg = w.grad().unwrap();
                gf.scale(a).add(&gg.scale(b)).unwrap()
            }
        };

        assert!(max_rel_err(&grads(true), &grads(false)) <= 1e-12);
    }

    #[test]
    fn cholesky_of_llt_reproduces_lower_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let n = 3;
            let l0 = Matrix::from_fn(n, n, |i, j| {
                if j < i {
                    rng.random_range(-1.0..1.0)
                } else if j == i {
                    rng.random_range(0.2..2.0)
                } else {
                    0.0
                }
            });
            let a = l0.matmul(&l0.transpose()).unwrap();
            let tape = Tape::new();
            let av = tape.constant(a);
            let l = av.cholesky().unwrap().value();
            assert!(max_rel_err(&l, &l0) <= 1e-10);
        }
    }

    #[test]
    fn operations_do_not_mutate_inputs() {
        let tape = Tape::new();
        let a0 = Matrix::from_rows(2, 2, &[2.0, 0.1, 0.1, 3.0]);
        let a = tape.leaf(a0.clone(), true);
        let b = tape.leaf(Matrix::col_vec(&[1.0, 2.0]), true);
        let _ = a.matmul(&b).unwrap();
        let _ = a.cholesky().unwrap();
        let _ = a.solve_spd(&b).unwrap();
        let _ = a.tanh();
        assert_eq!(a.value(), a0);
        assert_eq!(b.value(), Matrix::col_vec(&[1.0, 2.0]));
    }

    #[test]
    fn cholesky_rejects_asymmetric_input() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(2, 2, &[1.0, 0.5, 0.2, 1.0]));
        assert!(a.cholesky().is_err());
    }
}
