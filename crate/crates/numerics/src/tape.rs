//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so the node list is
//! already in topological order and `backward` is a single reverse sweep.
//! Parameters enter as borrowed leaves; nothing is copied until an op
//! produces a new value.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumericError, Result};
use crate::kernels::{self, PROB_FLOOR};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        stats: Vec<(f64, f64)>,
    },
    Softmax {
        x: usize,
        temperature: f64,
    },
    CausalSoftmax(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor,
    },
    KlDiv {
        target: Tensor,
        q: usize,
    },
    Sum(usize),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Single-writer recording of one forward computation.
pub struct Tape<'p> {
    id: u64,
    nodes: RefCell<Vec<Node<'p>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Value<'p>, op: Op, name: &'static str) -> Result<Var> {
        if !value.get().is_finite() {
            return Err(NumericError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.len() {
            return Err(NumericError::NotOnTape);
        }
        Ok(v.idx)
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> Result<R> {
        let i = self.idx(v)?;
        let nodes = self.nodes.borrow();
        Ok(f(nodes[i].value.get()))
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> Result<R> {
        let (i, j) = (self.idx(a)?, self.idx(b)?);
        let nodes = self.nodes.borrow();
        Ok(f(nodes[i].value.get(), nodes[j].value.get()))
    }

    /// Records an owned input (constant or data).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, "leaf")
            .expect("tensors are finite by construction")
    }

    /// Records a borrowed parameter tensor without copying it.
    pub fn param(&self, t: &'p Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, "param")
            .expect("tensors are finite by construction")
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Result<Tensor> {
        self.with(v, Tensor::clone)
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        self.with(v, |t| t.shape().to_vec())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, kernels::matmul)??;
        self.push(Value::Owned(out), Op::Matmul(a.idx, b.idx), "matmul")
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.with(a, kernels::transpose)??;
        self.push(Value::Owned(out), Op::Transpose(a.idx), "transpose")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(NumericError::Shape {
                    op: "add",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })??;
        self.push(Value::Owned(out), Op::Add(a.idx, b.idx), "add")
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let out = self.with2(x, b, |x, b| {
            let c = x.cols();
            if b.len() != c {
                return Err(NumericError::Shape {
                    op: "add_row",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })??;
        self.push(Value::Owned(out), Op::AddRow(x.idx, b.idx), "add_row")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with2(a, b, |x, y| {
            if x.shape() != y.shape() {
                return Err(NumericError::Shape {
                    op: "mul",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })??;
        self.push(Value::Owned(out), Op::Mul(a.idx, b.idx), "mul")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let out = self.with(a, |x| {
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())
        })?;
        self.push(Value::Owned(out), Op::Scale(a.idx, c), "scale")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.with(a, |x| {
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().map(|v| v.max(0.0)).collect(),
            )
        })?;
        self.push(Value::Owned(out), Op::Relu(a.idx), "relu")
    }

    /// Row-wise layer normalization with learned gain and bias vectors.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (i, g, b) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (out, stats) = {
            let nodes = self.nodes.borrow();
            kernels::layer_norm(
                nodes[i].value.get(),
                nodes[g].value.get(),
                nodes[b].value.get(),
            )?
        };
        self.push(
            Value::Owned(out),
            Op::LayerNorm {
                x: i,
                gamma: g,
                beta: b,
                stats,
            },
            "layer_norm",
        )
    }

    /// Softmax over the last dimension at the given temperature.
    pub fn softmax(&self, x: Var, temperature: f64) -> Result<Var> {
        let out = self.with(x, |t| kernels::softmax(t, temperature))??;
        self.push(
            Value::Owned(out),
            Op::Softmax {
                x: x.idx,
                temperature,
            },
            "softmax",
        )
    }

    /// Causally masked row softmax of a square score matrix.
    pub fn causal_softmax(&self, x: Var) -> Result<Var> {
        let out = self.with(x, kernels::causal_softmax)??;
        self.push(
            Value::Owned(out),
            Op::CausalSoftmax(x.idx),
            "causal_softmax",
        )
    }

    /// Rows `ids` of a `[V×d]` table, as an `[ids.len()×d]` matrix.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.with(table, |t| {
            let (v, d) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(NumericError::OutOfRange {
                        op: "gather_rows",
                        index: id,
                        bound: v,
                    });
                }
                data.extend_from_slice(t.row(id));
            }
            if ids.is_empty() {
                return Err(NumericError::Invalid {
                    op: "gather_rows",
                    msg: "no rows requested".into(),
                });
            }
            Ok(Tensor::from_parts(vec![ids.len(), d], data))
        })??;
        self.push(
            Value::Owned(out),
            Op::GatherRows {
                table: table.idx,
                ids: ids.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Stacks matrices (or vectors, as single rows) with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[*idxs.first().ok_or(NumericError::Invalid {
                op: "concat_rows",
                msg: "nothing to concatenate".into(),
            })?]
            .value
            .get();
            let c = first.cols();
            let mut data = Vec::new();
            for &i in &idxs {
                let t = nodes[i].value.get();
                if t.cols() != c {
                    return Err(NumericError::Shape {
                        op: "concat_rows",
                        lhs: first.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts(vec![data.len() / c, c], data)
        };
        self.push(Value::Owned(out), Op::ConcatRows(idxs), "concat_rows")
    }

    /// Rows `rows` of `x` (repeats allowed).
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = self.with(x, |t| {
            let n = t.rows();
            let mut data = Vec::with_capacity(rows.len() * t.cols());
            for &r in rows {
                if r >= n {
                    return Err(NumericError::OutOfRange {
                        op: "select_rows",
                        index: r,
                        bound: n,
                    });
                }
                data.extend_from_slice(t.row(r));
            }
            if rows.is_empty() {
                return Err(NumericError::Invalid {
                    op: "select_rows",
                    msg: "no rows requested".into(),
                });
            }
            Ok(Tensor::from_parts(vec![rows.len(), t.cols()], data))
        })??;
        self.push(
            Value::Owned(out),
            Op::SelectRows {
                x: x.idx,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    /// Mean next-token NLL of `logits [n×V]` against `targets`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (nll, probs) =
            self.with(logits, |t| kernels::cross_entropy_with_probs(t, targets))??;
        self.push(
            Value::Owned(Tensor::from_parts(vec![1], vec![nll])),
            Op::CrossEntropy {
                logits: logits.idx,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// `KL(target ‖ q)` where `target` is a fixed distribution and `q` is recorded.
    /// `q` is only required to be non-negative, since it normally comes out of
    /// a softmax and finite-difference probes step off the simplex.
    pub fn kl_div(&self, target: &Tensor, q: Var) -> Result<Var> {
        kernels::validate_distribution("kl_div", target)?;
        let value = self.with(q, |qt| {
            if qt.len() != target.len() {
                return Err(NumericError::Shape {
                    op: "kl_div",
                    lhs: target.shape().to_vec(),
                    rhs: qt.shape().to_vec(),
                });
            }
            if qt.data().iter().any(|x| *x < 0.0) {
                return Err(NumericError::Invalid {
                    op: "kl_div",
                    msg: "negative probability".into(),
                });
            }
            Ok(kernels::kl_value(target.data(), qt.data()))
        })??;
        self.push(
            Value::Owned(Tensor::from_parts(vec![1], vec![value])),
            Op::KlDiv {
                target: target.clone(),
                q: q.idx,
            },
            "kl_div",
        )
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.with(x, |t| t.data().iter().sum::<f64>())?;
        self.push(
            Value::Owned(Tensor::from_parts(vec![1], vec![s])),
            Op::Sum(x.idx),
            "sum",
        )
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.with(x, Tensor::len)?;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.get().len() != 1 {
            return Err(NumericError::Invalid {
                op: "backward",
                msg: format!(
                    "loss must be a scalar, got shape {:?}",
                    nodes[root].value.get().shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::from_parts(
            nodes[root].value.get().shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..=root).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let val = |j: usize| nodes[j].value.get();
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (at, bt) = (val(*a), val(*b));
                    let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_into(dy.data(), bt.data(), &mut da, m, n, k);
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_into(at.data(), dy.data(), &mut db, m, k, n);
                    accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, kernels::transpose(&dy)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy.clone());
                }
                Op::AddRow(x, b) => {
                    let c = dy.cols();
                    let mut db = vec![0.0; c];
                    for row in dy.data().chunks(c) {
                        for (s, v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    let bshape = val(*b).shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::from_parts(bshape, db));
                    accumulate(&mut grads, *x, dy.clone());
                }
                Op::Mul(a, b) => {
                    let (at, bt) = (val(*a), val(*b));
                    let da = dy
                        .data()
                        .iter()
                        .zip(bt.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db = dy
                        .data()
                        .iter()
                        .zip(at.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(at.shape().to_vec(), da));
                    accumulate(&mut grads, *b, Tensor::from_parts(bt.shape().to_vec(), db));
                }
                Op::Scale(a, c) => {
                    let d = dy.data().iter().map(|g| g * c).collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(dy.shape().to_vec(), d));
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let d = dy
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(dy.shape().to_vec(), d));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    stats,
                } => {
                    let (xt, gt) = (val(*x), val(*gamma));
                    let d = xt.cols();
                    let mut dx = vec![0.0; xt.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut xhat = vec![0.0; d];
                    let mut g = vec![0.0; d];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = xt.row(r);
                        let dyr = dy.row(r);
                        for j in 0..d {
                            xhat[j] = (xr[j] - mean) * rstd;
                            g[j] = dyr[j] * gt.data()[j];
                            dgamma[j] += dyr[j] * xhat[j];
                            dbeta[j] += dyr[j];
                        }
                        let g_mean = g.iter().sum::<f64>() / d as f64;
                        let gx_mean =
                            g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd * (g[j] - g_mean - xhat[j] * gx_mean);
                        }
                    }
                    let gshape = gt.shape().to_vec();
                    let bshape = val(*beta).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(xt.shape().to_vec(), dx));
                    accumulate(&mut grads, *gamma, Tensor::from_parts(gshape, dgamma));
                    accumulate(&mut grads, *beta, Tensor::from_parts(bshape, dbeta));
                }
                Op::Softmax { x, temperature } => {
                    let y = nodes[i].value.get();
                    let dx = softmax_vjp(y, &dy, *temperature);
                    accumulate(&mut grads, *x, dx);
                }
                Op::CausalSoftmax(x) => {
                    let y = nodes[i].value.get();
                    let dx = softmax_vjp(y, &dy, 1.0);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows { table, ids } => {
                    let t = val(*table);
                    let d = t.cols();
                    let mut dt = vec![0.0; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, g) in dt[id * d..(id + 1) * d].iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *table,
                        Tensor::from_parts(t.shape().to_vec(), dt),
                    );
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let n = val(p).len();
                        let g = dy.data()[offset..offset + n].to_vec();
                        offset += n;
                        accumulate(&mut grads, p, Tensor::from_parts(shape, g));
                    }
                }
                Op::SelectRows { x, rows } => {
                    let t = val(*x);
                    let d = t.cols();
                    let mut dx = vec![0.0; t.len()];
                    for (r, &src) in rows.iter().enumerate() {
                        for (o, g) in dx[src * d..(src + 1) * d].iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(t.shape().to_vec(), dx));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let up = dy.item();
                    let n = targets.len() as f64;
                    let v = probs.cols();
                    let mut d = probs.data().to_vec();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * v + t] -= 1.0;
                    }
                    for x in d.iter_mut() {
                        *x *= up / n;
                    }
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::from_parts(probs.shape().to_vec(), d),
                    );
                }
                Op::KlDiv { target, q } => {
                    let up = dy.item();
                    let qt = val(*q);
                    let d = target
                        .data()
                        .iter()
                        .zip(qt.data())
                        .map(|(&p, &qi)| {
                            if p > 0.0 && qi > PROB_FLOOR {
                                -up * p / qi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *q, Tensor::from_parts(qt.shape().to_vec(), d));
                }
                Op::Sum(x) => {
                    let t = val(*x);
                    let g = vec![dy.item(); t.len()];
                    accumulate(&mut grads, *x, Tensor::from_parts(t.shape().to_vec(), g));
                }
            }
            grads[i] = Some(dy);
        }
        let shapes = nodes
            .iter()
            .map(|n| n.value.get().shape().to_vec())
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

fn softmax_vjp(y: &Tensor, dy: &Tensor, temperature: f64) -> Tensor {
    let c = y.cols();
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dr[j] = yr[j] * (gr[j] - dot) / temperature;
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(NumericError::NotOnTape);
        }
        Ok(self.grads[v.idx]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.idx >= self.grads.len() {
            return Err(NumericError::NotOnTape);
        }
        Ok(self.grads[v.idx]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }
}
