//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles; calling
//! [`Var::backward`] on a scalar result replays the recording in reverse and
//! accumulates gradients into the tape's parameter leaves. One tape per
//! forward pass; tapes are single-threaded, independent tapes may run in
//! parallel on disjoint data.
//!
//! Design constraints baked in here:
//! - `f64` everywhere; every operation checks its output for NaN/Inf and
//!   fails rather than propagating poison.
//! - Gradients of parameter leaves accumulate across `backward` calls until
//!   [`Tape::zero_grad`] resets them.
//! - Nondifferentiable points use fixed subgradient conventions: `abs` has
//!   slope 0 at 0, `rowmax` routes gradient to the first attaining index,
//!   clamped entries get slope 0.

use std::cell::RefCell;

use crate::error::{GpomError, Result};
use crate::tensor::Tensor;

/// Layer-norm variance guard: denominator is `max(row_std, EPS_LN)`.
pub const EPS_LN: f64 = 1e-5;
/// Minimum divisor magnitude for elementwise division.
pub const EPS_DIV: f64 = 1e-12;
/// Population standardization guard: below this std the output is all zeros.
pub const EPS_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    Sigmoid,
    Abs,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Sum,
    RowMax,
}

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    Transpose {
        a: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    /// (n x k) + (1 x k) with the bias row broadcast over rows.
    AddBias {
        a: usize,
        bias: usize,
    },
    /// Per-row standardization over the last dimension, then gain/bias.
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        /// Normalized rows before gain/bias, kept for backward.
        normed: Tensor,
        /// Per-row denominator and whether the variance guard was active.
        denom: Vec<(f64, bool)>,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        /// Attaining column per row (RowMax only).
        argmax: Vec<usize>,
    },
    Detach,
    /// Standardize an n x 1 column by its own mean/std (population std).
    ColStandardize {
        a: usize,
        sigma: f64,
        guarded: bool,
    },
    /// External per-row scalar function: values supplied at forward time
    /// together with the rows' gradients (n x d Jacobian diag-by-row).
    RowFn {
        x: usize,
        jac: Tensor,
    },
    /// Rowwise selection between two same-shape tensors; the mask is a
    /// constant for gradient purposes.
    RowSelect {
        a: usize,
        b: usize,
        take_a: Vec<bool>,
    },
    /// Hard per-entry choice between x and v driven by per-row rates, with a
    /// straight-through sigmoid surrogate for backward.
    StChoice {
        x: usize,
        v: usize,
        rate: usize,
        /// Surrogate take-v probabilities (sigmoid of scaled logit gap).
        soft: Tensor,
        temperature: f64,
    },
    /// Componentwise clamp with per-column bounds; slope 0 where clamped.
    Clamp {
        a: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Persistent gradient slot; present only on parameter leaves.
    grad: Option<Tensor>,
}

/// Recording of one differentiable computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool, grad: Option<Tensor>) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(GpomError::NonFinite { op: op_name(&op) });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Record a constant: gradient never flows into it.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Record a trainable leaf with a persistent gradient slot.
    pub fn param(&self, value: Tensor) -> Result<Var<'_>> {
        let g = Tensor::zeros(value.rows(), value.cols());
        self.push(value, Op::Leaf, true, Some(g))
    }

    /// Reset every parameter leaf's accumulated gradient to zero.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = node.grad.as_mut() {
                *g = Tensor::zeros(g.rows(), g.cols());
            }
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Binary { kind, .. } => match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        },
        Op::Scale { .. } => "scale",
        Op::Unary { kind, .. } => match kind {
            UnaryKind::Tanh => "tanh",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Abs => "abs",
            UnaryKind::Neg => "neg",
        },
        Op::AddBias { .. } => "add_bias",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Reduce { kind, .. } => match kind {
            ReduceKind::Mean => "mean",
            ReduceKind::Sum => "sum",
            ReduceKind::RowMax => "rowmax",
        },
        Op::Detach { .. } => "detach",
        Op::ColStandardize { .. } => "col_standardize",
        Op::RowFn { .. } => "row_fn",
        Op::RowSelect { .. } => "row_select",
        Op::StChoice { .. } => "st_choice",
        Op::Clamp { .. } => "clamp",
        Op::ConcatCols { .. } => "concat_cols",
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.shape()
    }

    /// Accumulated gradient of a parameter leaf; `None` for other nodes.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            (a.value.matmul(&b.value)?, a.needs_grad || b.needs_grad)
        };
        self.tape.push(
            value,
            Op::Matmul {
                a: self.id,
                b: other.id,
            },
            needs,
            None,
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].value.transpose(), nodes[self.id].needs_grad)
        };
        self.tape.push(value, Op::Transpose { a: self.id }, needs, None)
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let scalar_b = b.is_scalar() && !a.is_scalar();
            if !scalar_b && a.shape() != b.shape() {
                return Err(GpomError::ShapeMismatch {
                    op: op_name(&Op::Binary {
                        kind,
                        a: 0,
                        b: 0,
                    }),
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            if kind == BinaryKind::Div {
                let min_mag = b.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                if min_mag < EPS_DIV {
                    return Err(GpomError::DivisionGuard {
                        op: "div",
                        magnitude: min_mag,
                    });
                }
            }
            let bv = |i: usize| if scalar_b { b.data()[0] } else { b.data()[i] };
            let data: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| match kind {
                    BinaryKind::Add => x + bv(i),
                    BinaryKind::Sub => x - bv(i),
                    BinaryKind::Mul => x * bv(i),
                    BinaryKind::Div => x / bv(i),
                })
                .collect();
            (
                Tensor::new(a.rows(), a.cols(), data)?,
                nodes[self.id].needs_grad || nodes[other.id].needs_grad,
            )
        };
        self.tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            needs,
            None,
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            (
                nodes[self.id].value.map(|v| v * c),
                nodes[self.id].needs_grad,
            )
        };
        self.tape.push(value, Op::Scale { a: self.id, c }, needs, None)
    }

    fn unary(&self, kind: UnaryKind) -> Result<Var<'t>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let value = match kind {
                UnaryKind::Tanh => a.map(f64::tanh),
                UnaryKind::Sigmoid => a.map(sigmoid),
                UnaryKind::Abs => a.map(f64::abs),
                UnaryKind::Neg => a.map(|v| -v),
            };
            (value, nodes[self.id].needs_grad)
        };
        self.tape
            .push(value, Op::Unary { kind, a: self.id }, needs, None)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Neg)
    }

    /// Add a 1 x k bias row to every row of an n x k tensor.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[bias.id].value;
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(GpomError::ShapeMismatch {
                    op: "add_bias",
                    left: a.shape(),
                    right: b.shape(),
                });
            }
            let mut out = a.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                for (j, r) in row.iter_mut().enumerate() {
                    *r += b.data()[j];
                }
            }
            (
                out,
                nodes[self.id].needs_grad || nodes[bias.id].needs_grad,
            )
        };
        self.tape.push(
            value,
            Op::AddBias {
                a: self.id,
                bias: bias.id,
            },
            needs,
            None,
        )
    }

    /// Per-row standardization over the last dimension followed by gain/bias.
    ///
    /// The denominator is `max(row_std, EPS_LN)`: exact unit variance for any
    /// healthy row, guarded output for (near-)constant rows.
    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (value, normed, denom, needs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gain.id].value;
            let b = &nodes[bias.id].value;
            for (name, t) in [("gain", g), ("bias", b)] {
                if t.rows() != 1 || t.cols() != x.cols() {
                    return Err(GpomError::ShapeMismatch {
                        op: if name == "gain" {
                            "layer_norm gain"
                        } else {
                            "layer_norm bias"
                        },
                        left: x.shape(),
                        right: t.shape(),
                    });
                }
            }
            let k = x.cols();
            let mut normed = Tensor::zeros(x.rows(), k);
            let mut out = Tensor::zeros(x.rows(), k);
            let mut denom = Vec::with_capacity(x.rows());
            for i in 0..x.rows() {
                let row = x.row(i);
                let mu = row.iter().sum::<f64>() / k as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / k as f64;
                let std = var.sqrt();
                let guarded = std < EPS_LN;
                let d = if guarded { EPS_LN } else { std };
                denom.push((d, guarded));
                for j in 0..k {
                    let n = (row[j] - mu) / d;
                    normed.set(i, j, n);
                    out.set(i, j, n * g.data()[j] + b.data()[j]);
                }
            }
            (
                out,
                normed,
                denom,
                nodes[self.id].needs_grad
                    || nodes[gain.id].needs_grad
                    || nodes[bias.id].needs_grad,
            )
        };
        self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                normed,
                denom,
            },
            needs,
            None,
        )
    }

    fn reduce(&self, kind: ReduceKind) -> Result<Var<'t>> {
        let (value, argmax, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.is_empty() {
                return Err(GpomError::Contract {
                    op: "reduce",
                    msg: "empty input".into(),
                });
            }
            let mut argmax = Vec::new();
            let value = match kind {
                ReduceKind::Mean => Tensor::new(
                    1,
                    1,
                    vec![a.data().iter().sum::<f64>() / a.len() as f64],
                )?,
                ReduceKind::Sum => Tensor::new(1, 1, vec![a.data().iter().sum::<f64>()])?,
                ReduceKind::RowMax => {
                    let mut out = Tensor::zeros(a.rows(), 1);
                    for i in 0..a.rows() {
                        let row = a.row(i);
                        let mut best = 0usize;
                        for (j, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = j;
                            }
                        }
                        argmax.push(best);
                        out.set(i, 0, row[best]);
                    }
                    out
                }
            };
            (value, argmax, nodes[self.id].needs_grad)
        };
        self.tape.push(
            value,
            Op::Reduce {
                kind,
                a: self.id,
                argmax,
            },
            needs,
            None,
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum)
    }

    pub fn rowmax(&self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::RowMax)
    }

    /// Value-equal tensor that blocks gradient flow.
    pub fn detach(&self) -> Result<Var<'t>> {
        let value = self.value();
        self.tape.push(value, Op::Detach, false, None)
    }

    /// Standardize an n x 1 column by its own mean and population std.
    /// Returns all zeros when the std falls below `EPS_STD`.
    pub fn col_standardize(&self) -> Result<Var<'t>> {
        let (value, sigma, guarded, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.cols() != 1 || a.rows() < 2 {
                return Err(GpomError::Contract {
                    op: "col_standardize",
                    msg: format!("expected n x 1 column with n >= 2, got {:?}", a.shape()),
                });
            }
            let n = a.rows() as f64;
            let mu = a.data().iter().sum::<f64>() / n;
            let var = a.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sigma = var.sqrt();
            let guarded = sigma < EPS_STD;
            let value = if guarded {
                Tensor::zeros(a.rows(), 1)
            } else {
                a.map(|v| (v - mu) / sigma)
            };
            (value, sigma, guarded, nodes[self.id].needs_grad)
        };
        self.tape.push(
            value,
            Op::ColStandardize {
                a: self.id,
                sigma,
                guarded,
            },
            needs,
            None,
        )
    }

    /// Record an externally evaluated per-row scalar function.
    ///
    /// `values` is the n x 1 result, `jac` the n x d matrix of each row
    /// value's gradient with respect to its input row.
    pub fn row_fn(&self, values: Tensor, jac: Tensor) -> Result<Var<'t>> {
        let needs = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if values.rows() != x.rows() || values.cols() != 1 || jac.shape() != x.shape() {
                return Err(GpomError::ShapeMismatch {
                    op: "row_fn",
                    left: x.shape(),
                    right: jac.shape(),
                });
            }
            nodes[self.id].needs_grad
        };
        self.tape
            .push(values, Op::RowFn { x: self.id, jac }, needs, None)
    }

    /// Componentwise clamp with per-column bounds.
    pub fn clamp(&self, lower: &[f64], upper: &[f64]) -> Result<Var<'t>> {
        let (value, needs) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if lower.len() != a.cols() || upper.len() != a.cols() {
                return Err(GpomError::Contract {
                    op: "clamp",
                    msg: "bounds length must equal column count".into(),
                });
            }
            let mut out = a.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = v.clamp(lower[j], upper[j]);
                }
            }
            (out, nodes[self.id].needs_grad)
        };
        self.tape.push(
            value,
            Op::Clamp {
                a: self.id,
                lower: lower.to_vec(),
                upper: upper.to_vec(),
            },
            needs,
            None,
        )
    }

    /// Run reverse-mode accumulation from a scalar root. Parameter-leaf
    /// gradients accumulate; call [`Tape::zero_grad`] between updates.
    pub fn backward(&self) -> Result<()> {
        backward_from(self.tape, self.id)
    }
}

/// Rowwise selection between two same-shape vars; `take_a[i]` picks `a`'s row.
/// The mask is a constant for gradient purposes.
pub fn row_select<'t>(a: Var<'t>, b: Var<'t>, take_a: &[bool]) -> Result<Var<'t>> {
    let tape = a.tape;
    let (value, needs) = {
        let nodes = tape.nodes.borrow();
        let av = &nodes[a.id].value;
        let bv = &nodes[b.id].value;
        if av.shape() != bv.shape() || take_a.len() != av.rows() {
            return Err(GpomError::ShapeMismatch {
                op: "row_select",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = av.clone();
        for (i, &keep) in take_a.iter().enumerate() {
            if !keep {
                out.row_mut(i).copy_from_slice(bv.row(i));
            }
        }
        (out, nodes[a.id].needs_grad || nodes[b.id].needs_grad)
    };
    tape.push(
        value,
        Op::RowSelect {
            a: a.id,
            b: b.id,
            take_a: take_a.to_vec(),
        },
        needs,
        None,
    )
}

/// Hard per-entry choice between `x` and `v`: entry (i, k) takes `v` iff
/// `rate[i] >= logits[i][k]` (ties take `v`). Backward follows the sigmoid
/// surrogate `s = sigmoid((rate_i - logit_ik) / temperature)` instead of the
/// hard step. With `soft_forward` the surrogate itself is the output, which
/// makes the whole pipeline finite-difference checkable.
pub fn st_choice<'t>(
    x: Var<'t>,
    v: Var<'t>,
    rate: Var<'t>,
    logits: &Tensor,
    temperature: f64,
    soft_forward: bool,
) -> Result<Var<'t>> {
    if temperature <= 0.0 {
        return Err(GpomError::Contract {
            op: "st_choice",
            msg: "temperature must be positive".into(),
        });
    }
    let tape = x.tape;
    let (value, soft, needs) = {
        let nodes = tape.nodes.borrow();
        let xv = &nodes[x.id].value;
        let vv = &nodes[v.id].value;
        let rv = &nodes[rate.id].value;
        if xv.shape() != vv.shape() || logits.shape() != xv.shape() {
            return Err(GpomError::ShapeMismatch {
                op: "st_choice",
                left: xv.shape(),
                right: vv.shape(),
            });
        }
        if rv.cols() != 1 || rv.rows() != xv.rows() {
            return Err(GpomError::ShapeMismatch {
                op: "st_choice",
                left: xv.shape(),
                right: rv.shape(),
            });
        }
        let (n, d) = xv.shape();
        let mut soft = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let r = rv.get(i, 0);
            for k in 0..d {
                let s = sigmoid((r - logits.get(i, k)) / temperature);
                soft.set(i, k, s);
                let u = if soft_forward {
                    (1.0 - s) * xv.get(i, k) + s * vv.get(i, k)
                } else if r >= logits.get(i, k) {
                    vv.get(i, k)
                } else {
                    xv.get(i, k)
                };
                out.set(i, k, u);
            }
        }
        (
            out,
            soft,
            nodes[x.id].needs_grad || nodes[v.id].needs_grad || nodes[rate.id].needs_grad,
        )
    };
    tape.push(
        value,
        Op::StChoice {
            x: x.id,
            v: v.id,
            rate: rate.id,
            soft,
            temperature,
        },
        needs,
        None,
    )
}

/// Concatenate vars with equal row counts along the column axis.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let tape = parts
        .first()
        .ok_or_else(|| GpomError::Contract {
            op: "concat_cols",
            msg: "at least one part required".into(),
        })?
        .tape;
    let (value, needs) = {
        let nodes = tape.nodes.borrow();
        let n = nodes[parts[0].id].value.rows();
        let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
        let mut out = Tensor::zeros(n, total);
        let mut offset = 0;
        for p in parts {
            let t = &nodes[p.id].value;
            if t.rows() != n {
                return Err(GpomError::ShapeMismatch {
                    op: "concat_cols",
                    left: (n, total),
                    right: t.shape(),
                });
            }
            for i in 0..n {
                let src = t.row(i);
                out.row_mut(i)[offset..offset + t.cols()].copy_from_slice(src);
            }
            offset += t.cols();
        }
        (out, parts.iter().any(|p| nodes[p.id].needs_grad))
    };
    tape.push(
        value,
        Op::ConcatCols {
            parts: parts.iter().map(|p| p.id).collect(),
        },
        needs,
        None,
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: usize, delta: &Tensor) {
    match adj[id].as_mut() {
        Some(g) => g.add_scaled(delta, 1.0),
        None => adj[id] = Some(delta.clone()),
    }
}

fn backward_from(tape: &Tape, root: usize) -> Result<()> {
    let mut nodes = tape.nodes.borrow_mut();
    if !nodes[root].value.is_scalar() {
        return Err(GpomError::Contract {
            op: "backward",
            msg: format!(
                "root must be 1x1, got {:?}",
                nodes[root].value.shape()
            ),
        });
    }
    let mut adj: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
    adj[root] = Some(Tensor::filled(1, 1, 1.0));

    for id in (0..=root).rev() {
        let Some(g) = adj[id].take() else { continue };
        if !nodes[id].needs_grad {
            continue;
        }
        if !g.all_finite() {
            return Err(GpomError::NonFinite { op: "backward" });
        }
        // Split adjacent borrows: read this node's op/value, write into adj.
        match &nodes[id].op {
            Op::Leaf => {
                if let Some(slot) = nodes[id].grad.as_mut() {
                    slot.add_scaled(&g, 1.0);
                }
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                if nodes[a].needs_grad {
                    let ga = g.matmul_nt(&nodes[b].value)?;
                    accumulate(&mut adj, a, &ga);
                }
                if nodes[b].needs_grad {
                    let gb = nodes[a].value.matmul_tn(&g)?;
                    accumulate(&mut adj, b, &gb);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                if nodes[a].needs_grad {
                    accumulate(&mut adj, a, &g.transpose());
                }
            }
            Op::Binary { kind, a, b } => {
                let (kind, a, b) = (*kind, *a, *b);
                let scalar_b = nodes[b].value.is_scalar() && !nodes[a].value.is_scalar();
                if nodes[a].needs_grad {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => {
                            let bv = &nodes[b].value;
                            if scalar_b {
                                g.map(|v| v * bv.scalar())
                            } else {
                                elementwise_product(&g, bv)
                            }
                        }
                        BinaryKind::Div => {
                            let bv = &nodes[b].value;
                            if scalar_b {
                                g.map(|v| v / bv.scalar())
                            } else {
                                elementwise_quotient(&g, bv)
                            }
                        }
                    };
                    accumulate(&mut adj, a, &ga);
                }
                if nodes[b].needs_grad {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let full = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.map(|v| -v),
                        BinaryKind::Mul => elementwise_product(&g, av),
                        BinaryKind::Div => {
                            // d(a/b)/db = -a / b^2
                            let mut out = Tensor::zeros(g.rows(), g.cols());
                            for i in 0..g.len() {
                                let bi = if scalar_b { bv.scalar() } else { bv.data()[i] };
                                out.data_mut()[i] = -g.data()[i] * av.data()[i] / (bi * bi);
                            }
                            out
                        }
                    };
                    let gb = if scalar_b {
                        Tensor::filled(1, 1, full.data().iter().sum::<f64>())
                    } else {
                        full
                    };
                    accumulate(&mut adj, b, &gb);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if nodes[a].needs_grad {
                    accumulate(&mut adj, a, &g.map(|v| v * c));
                }
            }
            Op::Unary { kind, a } => {
                let a = *a;
                if nodes[a].needs_grad {
                    let y = &nodes[id].value;
                    let x = &nodes[a].value;
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Tanh => 1.0 - y.data()[i] * y.data()[i],
                            UnaryKind::Sigmoid => y.data()[i] * (1.0 - y.data()[i]),
                            UnaryKind::Abs => {
                                let xi = x.data()[i];
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Neg => -1.0,
                        };
                        ga.data_mut()[i] = g.data()[i] * d;
                    }
                    accumulate(&mut adj, a, &ga);
                }
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                if nodes[a].needs_grad {
                    accumulate(&mut adj, a, &g);
                }
                if nodes[bias].needs_grad {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gb.data_mut()[j] += g.get(i, j);
                        }
                    }
                    accumulate(&mut adj, bias, &gb);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                denom,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let k = g.cols();
                if nodes[gain].needs_grad {
                    let mut gg = Tensor::zeros(1, k);
                    for i in 0..g.rows() {
                        for j in 0..k {
                            gg.data_mut()[j] += g.get(i, j) * normed.get(i, j);
                        }
                    }
                    accumulate(&mut adj, gain, &gg);
                }
                if nodes[bias].needs_grad {
                    let mut gb = Tensor::zeros(1, k);
                    for i in 0..g.rows() {
                        for j in 0..k {
                            gb.data_mut()[j] += g.get(i, j);
                        }
                    }
                    accumulate(&mut adj, bias, &gb);
                }
                if nodes[x].needs_grad {
                    let gv = &nodes[gain].value;
                    let mut gx = Tensor::zeros(g.rows(), k);
                    for i in 0..g.rows() {
                        let (d, guarded) = denom[i];
                        // Adjoint of the normalized row.
                        let gn: Vec<f64> =
                            (0..k).map(|j| g.get(i, j) * gv.data()[j]).collect();
                        let mean_gn = gn.iter().sum::<f64>() / k as f64;
                        if guarded {
                            // Denominator is the constant guard.
                            for j in 0..k {
                                gx.set(i, j, (gn[j] - mean_gn) / d);
                            }
                        } else {
                            let mean_gn_n = (0..k)
                                .map(|j| gn[j] * normed.get(i, j))
                                .sum::<f64>()
                                / k as f64;
                            for j in 0..k {
                                gx.set(
                                    i,
                                    j,
                                    (gn[j] - mean_gn - normed.get(i, j) * mean_gn_n) / d,
                                );
                            }
                        }
                    }
                    accumulate(&mut adj, x, &gx);
                }
            }
            Op::Reduce { kind, a, argmax } => {
                let a = *a;
                if nodes[a].needs_grad {
                    let av_shape = nodes[a].value.shape();
                    let ga = match kind {
                        ReduceKind::Mean => {
                            let c = g.scalar() / (av_shape.0 * av_shape.1) as f64;
                            Tensor::filled(av_shape.0, av_shape.1, c)
                        }
                        ReduceKind::Sum => Tensor::filled(av_shape.0, av_shape.1, g.scalar()),
                        ReduceKind::RowMax => {
                            let mut out = Tensor::zeros(av_shape.0, av_shape.1);
                            for (i, &j) in argmax.iter().enumerate() {
                                out.set(i, j, g.get(i, 0));
                            }
                            out
                        }
                    };
                    accumulate(&mut adj, a, &ga);
                }
            }
            Op::Detach => {}
            Op::ColStandardize { a, sigma, guarded } => {
                let (a, sigma, guarded) = (*a, *sigma, *guarded);
                if nodes[a].needs_grad && !guarded {
                    let y = &nodes[id].value;
                    let n = g.rows() as f64;
                    let mean_g = g.data().iter().sum::<f64>() / n;
                    let mean_gy = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * yi)
                        .sum::<f64>()
                        / n;
                    let mut ga = Tensor::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        ga.set(
                            i,
                            0,
                            (g.get(i, 0) - mean_g - y.get(i, 0) * mean_gy) / sigma,
                        );
                    }
                    accumulate(&mut adj, a, &ga);
                }
            }
            Op::RowFn { x, jac } => {
                let x = *x;
                if nodes[x].needs_grad {
                    let mut gx = Tensor::zeros(jac.rows(), jac.cols());
                    for i in 0..jac.rows() {
                        let gi = g.get(i, 0);
                        for j in 0..jac.cols() {
                            gx.set(i, j, gi * jac.get(i, j));
                        }
                    }
                    accumulate(&mut adj, x, &gx);
                }
            }
            Op::RowSelect { a, b, take_a } => {
                let (a, b) = (*a, *b);
                let mut ga = Tensor::zeros(g.rows(), g.cols());
                let mut gb = Tensor::zeros(g.rows(), g.cols());
                for (i, &keep) in take_a.iter().enumerate() {
                    if keep {
                        ga.row_mut(i).copy_from_slice(g.row(i));
                    } else {
                        gb.row_mut(i).copy_from_slice(g.row(i));
                    }
                }
                if nodes[a].needs_grad {
                    accumulate(&mut adj, a, &ga);
                }
                if nodes[b].needs_grad {
                    accumulate(&mut adj, b, &gb);
                }
            }
            Op::StChoice {
                x,
                v,
                rate,
                soft,
                temperature,
            } => {
                let (x, v, rate, tau) = (*x, *v, *rate, *temperature);
                if nodes[x].needs_grad {
                    let mut gx = Tensor::zeros(g.rows(), g.cols());
                    for i in 0..g.len() {
                        gx.data_mut()[i] = g.data()[i] * (1.0 - soft.data()[i]);
                    }
                    accumulate(&mut adj, x, &gx);
                }
                if nodes[v].needs_grad {
                    let mut gv = Tensor::zeros(g.rows(), g.cols());
                    for i in 0..g.len() {
                        gv.data_mut()[i] = g.data()[i] * soft.data()[i];
                    }
                    accumulate(&mut adj, v, &gv);
                }
                if nodes[rate].needs_grad {
                    let xv = &nodes[x].value;
                    let vv = &nodes[v].value;
                    let mut gr = Tensor::zeros(g.rows(), 1);
                    for i in 0..g.rows() {
                        let mut acc = 0.0;
                        for k in 0..g.cols() {
                            let s = soft.get(i, k);
                            acc += g.get(i, k) * s * (1.0 - s) / tau
                                * (vv.get(i, k) - xv.get(i, k));
                        }
                        gr.set(i, 0, acc);
                    }
                    accumulate(&mut adj, rate, &gr);
                }
            }
            Op::Clamp { a, lower, upper } => {
                let a = *a;
                if nodes[a].needs_grad {
                    let x = &nodes[a].value;
                    let mut ga = Tensor::zeros(g.rows(), g.cols());
                    for i in 0..x.rows() {
                        for j in 0..x.cols() {
                            let v = x.get(i, j);
                            if v >= lower[j] && v <= upper[j] {
                                ga.set(i, j, g.get(i, j));
                            }
                        }
                    }
                    accumulate(&mut adj, a, &ga);
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let cols = nodes[p].value.cols();
                    if nodes[p].needs_grad {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            gp.row_mut(i)
                                .copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        accumulate(&mut adj, p, &gp);
                    }
                    offset += cols;
                }
            }
        }
    }
    Ok(())
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= bv;
    }
    out
}

fn elementwise_quotient(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o /= bv;
    }
    out
}
