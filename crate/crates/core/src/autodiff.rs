//! Recorded-graph reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! [`Gradients`] of every node that depends on a leaf marked
//! `requires_grad`.
//!
//! Parameters enter through [`Tape::param`], which memoises on the address of
//! the borrowed tensor so that the same parameter used in several places maps
//! to a single leaf. [`Gradients::accumulate_into`] uses the same key to add
//! the result into the tensor's gradient slot, so the tensor must not move
//! between recording and accumulation.
//!
//! ```
//! use transporter_core::{Tape, Tensor};
//!
//! let mut x = Tensor::vector(vec![1.0, -2.0, 3.0]).with_requires_grad(true);
//! let tape = Tape::new();
//! let v = tape.param(&x);
//! let loss = v.mul(&v).sum();
//! let grads = tape.backward(&loss).unwrap();
//! grads.accumulate_into(&mut x).unwrap();
//! assert_eq!(x.grad().unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    RowSoftmax(usize),
    RowNormalize(usize),
    ColNormalize(usize),
    NegAbsDiff(usize, usize, f64),
    ConcatCols(usize, usize),
    RepeatRows(usize),
    Reshape(usize),
    SelectRow(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: BTreeMap<usize, usize>,
}

/// The operation record. Cheap to clone; clones share the record.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

/// A handle to one recorded value.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl core::fmt::Debug for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

fn key(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: value.detached(),
            op,
            requires_grad,
        });
        Var { tape: self.clone(), id }
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf that gradients flow into when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a parameter, honouring its `requires_grad` flag. Repeated calls
    /// with the same tensor return the same leaf.
    pub fn param(&self, t: &Tensor) -> Var {
        if let Some(&id) = self.inner.borrow().params.get(&key(t)) {
            return Var { tape: self.clone(), id };
        }
        let v = self.push(t.detached(), Op::Leaf, t.requires_grad());
        self.inner.borrow_mut().params.insert(key(t), v.id);
        v
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = inner.params.clone();
        Ok(Gradients { grads, params })
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = node.value.data();
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_into(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            add_into(grads, nodes, b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            add_into(grads, nodes, b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            add_into(grads, nodes, b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(m, row) => {
            let c = nodes[row].value.len();
            add_into(grads, nodes, m, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            add_into(grads, nodes, row, |s| {
                for (k, gv) in g.iter().enumerate() {
                    s[k % c] += gv;
                }
            });
        }
        Op::Scale(a, f) => add_into(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += f * g)),
        Op::AddScalar(a) | Op::Reshape(a) => {
            add_into(grads, nodes, a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g))
        }
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a].value.dim2();
            let n = nodes[b].value.cols();
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            add_into(grads, nodes, a, |s| {
                let bt = transpose_raw(bv, k, n);
                let ga = matmul_raw(g, &bt, m, n, k);
                s.iter_mut().zip(&ga).for_each(|(s, g)| *s += g);
            });
            add_into(grads, nodes, b, |s| {
                let at = transpose_raw(av, m, k);
                let gb = matmul_raw(&at, g, k, m, n);
                s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g);
            });
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[a].value.dim2();
            add_into(grads, nodes, a, |s| {
                let gt = transpose_raw(g, c, r);
                s.iter_mut().zip(&gt).for_each(|(s, g)| *s += g);
            });
        }
        Op::Sum(a) => add_into(grads, nodes, a, |s| s.iter_mut().for_each(|s| *s += g[0])),
        Op::Mean(a) => {
            let n = nodes[a].value.len() as f64;
            add_into(grads, nodes, a, |s| s.iter_mut().for_each(|s| *s += g[0] / n))
        }
        Op::Tanh(a) => add_into(grads, nodes, a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        Op::Exp(a) => add_into(grads, nodes, a, |s| {
            for i in 0..s.len() {
                s[i] += g[i] * y[i];
            }
        }),
        Op::Square(a) => {
            let av = nodes[a].value.data();
            add_into(grads, nodes, a, |s| {
                for i in 0..s.len() {
                    s[i] += 2.0 * av[i] * g[i];
                }
            })
        }
        Op::RowSoftmax(a) => {
            let (r, c) = node.value.dim2();
            add_into(grads, nodes, a, |s| {
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(g, y)| g * y).sum();
                    for k in row {
                        s[k] += y[k] * (g[k] - dot);
                    }
                }
            });
        }
        Op::RowNormalize(a) => {
            let (r, c) = node.value.dim2();
            let sums = nodes[a].value.row_sums();
            add_into(grads, nodes, a, |s| {
                for (i, &sum) in sums.iter().enumerate().take(r) {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(g, y)| g * y).sum();
                    for k in row {
                        s[k] += (g[k] - dot) / sum;
                    }
                }
            });
        }
        Op::ColNormalize(a) => {
            let (r, c) = node.value.dim2();
            let sums = nodes[a].value.col_sums();
            add_into(grads, nodes, a, |s| {
                for j in 0..c {
                    let dot: f64 = (0..r).map(|i| g[i * c + j] * y[i * c + j]).sum();
                    for i in 0..r {
                        s[i * c + j] += (g[i * c + j] - dot) / sums[j];
                    }
                }
            });
        }
        Op::NegAbsDiff(a, b, tau) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            let n = bv.len();
            add_into(grads, nodes, a, |s| {
                for i in 0..av.len() {
                    for j in 0..n {
                        s[i] -= g[i * n + j] * math::signum0(av[i] - bv[j]) / tau;
                    }
                }
            });
            add_into(grads, nodes, b, |s| {
                for i in 0..av.len() {
                    for j in 0..n {
                        s[j] += g[i * n + j] * math::signum0(av[i] - bv[j]) / tau;
                    }
                }
            });
        }
        Op::ConcatCols(a, b) => {
            let (r, ca) = nodes[a].value.dim2();
            let cb = nodes[b].value.cols();
            let c = ca + cb;
            add_into(grads, nodes, a, |s| {
                for i in 0..r {
                    for j in 0..ca {
                        s[i * ca + j] += g[i * c + j];
                    }
                }
            });
            add_into(grads, nodes, b, |s| {
                for i in 0..r {
                    for j in 0..cb {
                        s[i * cb + j] += g[i * c + ca + j];
                    }
                }
            });
        }
        Op::RepeatRows(a) => {
            let c = nodes[a].value.len();
            add_into(grads, nodes, a, |s| {
                for (k, gv) in g.iter().enumerate() {
                    s[k % c] += gv;
                }
            });
        }
        Op::SelectRow(a, i) => {
            let c = g.len();
            add_into(grads, nodes, a, |s| {
                for j in 0..c {
                    s[i * c + j] += g[j];
                }
            });
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<usize, usize>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when no gradient reached it.
    pub fn wrt(&self, v: &Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of the leaf recorded for `t` by [`Tape::param`] into
    /// `t`'s gradient slot. Returns whether anything was added.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<bool> {
        if !t.requires_grad() {
            return Ok(false);
        }
        let Some(&id) = self.params.get(&key(t)) else {
            return Ok(false);
        };
        match self.grads.get(id).and_then(|g| g.as_deref()) {
            Some(g) => {
                t.accumulate_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn accumulate_all<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        for p in params {
            self.accumulate_into(p)?;
        }
        Ok(())
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.id].value)
    }

    fn rg(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        self.with_value(|t| t.clone())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.rg()
    }

    /// Stop-gradient: the same value as a fresh constant.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    fn unary(&self, op: Op, value: Tensor) -> Var {
        self.tape.push(value, op, self.rg())
    }

    fn binary(&self, other: &Var, op: Op, value: Tensor) -> Var {
        let rg = self.rg() || other.rg();
        self.tape.push(value, op, rg)
    }

    fn both<R>(&self, other: &Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.id].value, &inner.nodes[other.id].value)
    }

    pub fn try_add(&self, other: &Var) -> Result<Var> {
        let v = self.both(other, |a, b| a.add(b))?;
        Ok(self.binary(other, Op::Add(self.id, other.id), v))
    }

    pub fn try_sub(&self, other: &Var) -> Result<Var> {
        let v = self.both(other, |a, b| a.sub(b))?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), v))
    }

    pub fn try_mul(&self, other: &Var) -> Result<Var> {
        let v = self.both(other, |a, b| a.mul(b))?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), v))
    }

    /// Matrix product; errors name both shapes on mismatch.
    pub fn try_matmul(&self, other: &Var) -> Result<Var> {
        let v = self.both(other, |a, b| a.matmul(b))?;
        Ok(self.binary(other, Op::MatMul(self.id, other.id), v))
    }

    /// Adds a length-`c` row to every row of an `r x c` matrix.
    pub fn try_add_row(&self, row: &Var) -> Result<Var> {
        let v = self.both(row, |m, r| {
            let (rows, c) = m.dim2();
            if r.len() != c {
                return Err(Error::shape("add_row", m.shape(), r.shape()));
            }
            let mut d = m.data().to_vec();
            for i in 0..rows {
                for j in 0..c {
                    d[i * c + j] += r.data()[j];
                }
            }
            Tensor::new(m.shape(), d)
        })?;
        Ok(self.binary(row, Op::AddRow(self.id, row.id), v))
    }

    pub fn try_concat_cols(&self, other: &Var) -> Result<Var> {
        let v = self.both(other, |a, b| {
            let (ra, ca) = a.dim2();
            let (rb, cb) = b.dim2();
            if ra != rb {
                return Err(Error::shape("concat_cols", a.shape(), b.shape()));
            }
            let mut d = Vec::with_capacity(ra * (ca + cb));
            for i in 0..ra {
                d.extend_from_slice(a.row(i));
                d.extend_from_slice(b.row(i));
            }
            Tensor::new(&[ra, ca + cb], d)
        })?;
        Ok(self.binary(other, Op::ConcatCols(self.id, other.id), v))
    }

    /// `[i, j] -> -|a_i - b_j| / tau` for two vectors.
    pub fn try_neg_abs_diff(&self, other: &Var, tau: f64) -> Result<Var> {
        let v = self.both(other, |a, b| {
            let (n, m) = (a.len(), b.len());
            let mut d = Vec::with_capacity(n * m);
            for &x in a.data() {
                for &y in b.data() {
                    d.push(-math::abs(x - y) / tau);
                }
            }
            Tensor::new(&[n, m], d)
        })?;
        Ok(self.binary(other, Op::NegAbsDiff(self.id, other.id, tau), v))
    }

    pub fn try_reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.with_value(|t| t.reshape(shape))?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    // Infallible forms used inside network code where shapes are fixed by
    // construction. They panic with the dimension error on misuse.

    pub fn add(&self, other: &Var) -> Var {
        self.try_add(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.try_sub(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.try_mul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.try_matmul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn add_row(&self, row: &Var) -> Var {
        self.try_add_row(row).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn concat_cols(&self, other: &Var) -> Var {
        self.try_concat_cols(other).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        self.try_reshape(shape).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn scale(&self, s: f64) -> Var {
        let v = self.with_value(|t| t.scale(s));
        self.unary(Op::Scale(self.id, s), v)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        let v = self.with_value(|t| t.map(|x| x + s));
        self.unary(Op::AddScalar(self.id), v)
    }

    pub fn transpose(&self) -> Var {
        let v = self.with_value(|t| {
            let (r, c) = t.dim2();
            Tensor::new(&[c, r], transpose_raw(t.data(), r, c)).expect("transpose")
        });
        self.unary(Op::Transpose(self.id), v)
    }

    pub fn sum(&self) -> Var {
        let v = self.with_value(|t| Tensor::scalar(t.sum()));
        self.unary(Op::Sum(self.id), v)
    }

    pub fn mean(&self) -> Var {
        let v = self.with_value(|t| Tensor::scalar(t.mean()));
        self.unary(Op::Mean(self.id), v)
    }

    pub fn tanh(&self) -> Var {
        let v = self.with_value(|t| t.map(math::tanh));
        self.unary(Op::Tanh(self.id), v)
    }

    pub fn exp(&self) -> Var {
        let v = self.with_value(|t| t.map(math::exp));
        self.unary(Op::Exp(self.id), v)
    }

    pub fn square(&self) -> Var {
        let v = self.with_value(|t| t.map(|x| x * x));
        self.unary(Op::Square(self.id), v)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn row_softmax(&self) -> Var {
        let v = self.with_value(|t| {
            let (r, c) = t.dim2();
            let mut d = t.data().to_vec();
            for i in 0..r {
                let row = &mut d[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = math::exp(*x - max);
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            Tensor::new(t.shape(), d).expect("softmax")
        });
        self.unary(Op::RowSoftmax(self.id), v)
    }

    /// `diag(X 1)^-1 X`.
    pub fn row_normalize(&self) -> Var {
        let v = self.with_value(|t| {
            let (r, c) = t.dim2();
            let sums = t.row_sums();
            let mut d = t.data().to_vec();
            for i in 0..r {
                d[i * c..(i + 1) * c].iter_mut().for_each(|x| *x /= sums[i]);
            }
            Tensor::new(t.shape(), d).expect("row_normalize")
        });
        self.unary(Op::RowNormalize(self.id), v)
    }

    /// `X diag(1^T X)^-1`.
    pub fn col_normalize(&self) -> Var {
        let v = self.with_value(|t| {
            let (r, c) = t.dim2();
            let sums = t.col_sums();
            let mut d = t.data().to_vec();
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] /= sums[j];
                }
            }
            Tensor::new(t.shape(), d).expect("col_normalize")
        });
        self.unary(Op::ColNormalize(self.id), v)
    }

    /// Tiles a length-`c` vector into `n` rows.
    pub fn repeat_rows(&self, n: usize) -> Var {
        let v = self.with_value(|t| {
            let c = t.len();
            let mut d = Vec::with_capacity(n * c);
            for _ in 0..n {
                d.extend_from_slice(t.data());
            }
            Tensor::new(&[n, c], d).expect("repeat_rows")
        });
        self.unary(Op::RepeatRows(self.id), v)
    }

    /// Row `i` of a matrix as a vector.
    pub fn select_row(&self, i: usize) -> Var {
        let v = self.with_value(|t| Tensor::vector(t.row(i).to_vec()));
        self.unary(Op::SelectRow(self.id, i), v)
    }
}
