//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every node on the [`Tape`] carries a whole matrix, so the bookkeeping
//! cost scales with the number of layers rather than the number of scalar
//! entries. Values that are not on the tape are *detached*: operations whose
//! inputs are all detached are evaluated eagerly and never recorded, which
//! makes detachment absorbing.
//!
//! ```
//! use sivi::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let p = tape.leaf(Tensor::scalar(3.0));
//! let loss = tape.sum(&tape.square(&p));
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&p).item(), 6.0);
//! ```

mod mlp;
mod tensor;

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

pub use mlp::{forward_mlp, BoundMlp, Dense, MlpParams};
pub use tensor::{log_add_exp, log_sigmoid, log_sum_exp, sigmoid, Tensor};
pub(crate) use tensor::{add_row, matmul, matmul_t, matmul_tn, sq_dist};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("backward() needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("loss is detached from the tape; nothing to differentiate")]
    DetachedLoss,
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
}

/// A value flowing through a computation, optionally recorded on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<usize>,
}

impl Var {
    /// A detached value; contributes no gradient to anything.
    pub fn constant(value: Tensor) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, no tape handle (stop-gradient).
    pub fn detach(&self) -> Var {
        Var {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

/// Free-function form of [`Var::detach`].
pub fn detach(v: &Var) -> Var {
    v.detach()
}

type Input = (Option<usize>, Rc<Tensor>);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulT { x: Input, w: Input },
    AddRow { x: Option<usize>, b: Option<usize> },
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    Mul { a: Input, b: Input },
    MulRow { x: Input, r: Input },
    Scale { a: usize, c: f64 },
    Shift { a: usize },
    Exp { a: usize, out: Rc<Tensor> },
    Log { a: usize, input: Rc<Tensor> },
    Relu { a: usize, input: Rc<Tensor> },
    Sigmoid { a: usize, out: Rc<Tensor> },
    LogSigmoid { a: usize, input: Rc<Tensor> },
    Square { a: usize, input: Rc<Tensor> },
    Sum { a: usize, shape: (usize, usize) },
    SumRows { a: usize, cols: usize },
    SliceCols { a: usize, start: usize, cols: usize },
    LogAddExp { a: Option<usize>, b: Option<usize>, weight_a: Tensor },
}

/// Append-only record of the operations applied to attached values.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Op>>,
}

fn attached(v: &Var) -> Input {
    (v.node, Rc::clone(&v.value))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input (typically a parameter tensor).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var::constant(value)
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        Var {
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    fn unary(&self, a: &Var, value: Tensor, op: impl FnOnce(usize) -> Op) -> Var {
        match a.node {
            Some(id) => self.push(value, op(id)),
            None => Var::constant(value),
        }
    }

    /// `x · wᵀ`: a batch `x: m×n` through a weight matrix `w: k×n`.
    pub fn matmul_t(&self, x: &Var, w: &Var) -> Var {
        let value = matmul_t(&x.value, &w.value);
        if x.node.is_none() && w.node.is_none() {
            return Var::constant(value);
        }
        self.push(
            value,
            Op::MatMulT {
                x: attached(x),
                w: attached(w),
            },
        )
    }

    /// Adds the `1×k` row `b` to each row of `x`.
    pub fn add_row(&self, x: &Var, b: &Var) -> Var {
        let value = add_row(&x.value, &b.value);
        if x.node.is_none() && b.node.is_none() {
            return Var::constant(value);
        }
        self.push(
            value,
            Op::AddRow {
                x: x.node,
                b: b.node,
            },
        )
    }

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let value = a.value.zip_map(&b.value, |x, y| x + y);
        if a.node.is_none() && b.node.is_none() {
            return Var::constant(value);
        }
        self.push(value, Op::Add(a.node, b.node))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        let value = a.value.zip_map(&b.value, |x, y| x - y);
        if a.node.is_none() && b.node.is_none() {
            return Var::constant(value);
        }
        self.push(value, Op::Sub(a.node, b.node))
    }

    /// Element-wise product.
    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        let value = a.value.zip_map(&b.value, |x, y| x * y);
        if a.node.is_none() && b.node.is_none() {
            return Var::constant(value);
        }
        self.push(
            value,
            Op::Mul {
                a: attached(a),
                b: attached(b),
            },
        )
    }

    /// Multiplies each row of `x` element-wise by the `1×k` row `r`.
    pub fn mul_row(&self, x: &Var, r: &Var) -> Var {
        let (rows, cols) = x.shape();
        assert_eq!(r.shape(), (1, cols), "mul_row expects a matching row");
        let mut value = (*x.value).clone();
        for i in 0..rows {
            for (v, s) in value.row_slice_mut(i).iter_mut().zip(r.value.data()) {
                *v *= s;
            }
        }
        if x.node.is_none() && r.node.is_none() {
            return Var::constant(value);
        }
        self.push(
            value,
            Op::MulRow {
                x: attached(x),
                r: attached(r),
            },
        )
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        self.unary(a, a.value.map(|x| c * x), |id| Op::Scale { a: id, c })
    }

    pub fn neg(&self, a: &Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, a: &Var, c: f64) -> Var {
        self.unary(a, a.value.map(|x| x + c), |id| Op::Shift { a: id })
    }

    pub fn exp(&self, a: &Var) -> Var {
        let out = Rc::new(a.value.map(f64::exp));
        match a.node {
            Some(id) => self.push(
                (*out).clone(),
                Op::Exp {
                    a: id,
                    out: Rc::clone(&out),
                },
            ),
            None => Var { value: out, node: None },
        }
    }

    pub fn log(&self, a: &Var) -> Var {
        let input = Rc::clone(&a.value);
        self.unary(a, a.value.map(f64::ln), |id| Op::Log { a: id, input })
    }

    pub fn relu(&self, a: &Var) -> Var {
        let input = Rc::clone(&a.value);
        self.unary(a, a.value.map(|x| x.max(0.0)), |id| Op::Relu { a: id, input })
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = Rc::new(a.value.map(sigmoid));
        match a.node {
            Some(id) => self.push(
                (*out).clone(),
                Op::Sigmoid {
                    a: id,
                    out: Rc::clone(&out),
                },
            ),
            None => Var { value: out, node: None },
        }
    }

    pub fn log_sigmoid(&self, a: &Var) -> Var {
        let input = Rc::clone(&a.value);
        self.unary(a, a.value.map(log_sigmoid), |id| Op::LogSigmoid {
            a: id,
            input,
        })
    }

    pub fn square(&self, a: &Var) -> Var {
        let input = Rc::clone(&a.value);
        self.unary(a, a.value.map(|x| x * x), |id| Op::Square { a: id, input })
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&self, a: &Var) -> Var {
        let shape = a.shape();
        self.unary(a, Tensor::scalar(a.value.sum()), |id| Op::Sum { a: id, shape })
    }

    /// Row sums: `m×k → m×1`.
    pub fn sum_rows(&self, a: &Var) -> Var {
        let (rows, cols) = a.shape();
        let data = a.value.iter_rows().map(|r| r.iter().sum()).collect();
        self.unary(a, Tensor::new(rows, 1, data), |id| Op::SumRows { a: id, cols })
    }

    pub fn mean(&self, a: &Var) -> Var {
        let n = a.value.len() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&self, a: &Var, start: usize, end: usize) -> Var {
        let cols = a.shape().1;
        self.unary(a, a.value.slice_cols(start, end), |id| Op::SliceCols {
            a: id,
            start,
            cols,
        })
    }

    /// Element-wise stable `log(exp(a) + exp(b))`.
    pub fn log_add_exp(&self, a: &Var, b: &Var) -> Var {
        let value = a.value.zip_map(&b.value, log_add_exp);
        if a.node.is_none() && b.node.is_none() {
            return Var::constant(value);
        }
        // d/da = exp(a - out); a -inf operand gets weight zero.
        let weight_a = a.value.zip_map(&value, |x, o| {
            if x == f64::NEG_INFINITY {
                0.0
            } else {
                (x - o).exp()
            }
        });
        self.push(
            value,
            Op::LogAddExp {
                a: a.node,
                b: b.node,
                weight_a,
            },
        )
    }

    /// Inner product of all entries, `Σ a ⊙ b` as `1×1`.
    pub fn dot(&self, a: &Var, b: &Var) -> Var {
        let prod = self.mul(a, b);
        self.sum(&prod)
    }

    /// Propagates `∂loss/∂node` to every recorded node, visiting each once
    /// in reverse topological order.
    pub fn backward(&self, loss: &Var) -> Result<Gradients, AutodiffError> {
        let (rows, cols) = loss.shape();
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows, cols });
        }
        let root = loss.node.ok_or(AutodiffError::DetachedLoss)?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes[id], &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: Option<usize>, g: Tensor) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
    match op {
        Op::Leaf => {}
        Op::MatMulT { x, w } => {
            // y = x wᵀ  ⇒  dx = g w,  dw = gᵀ x
            if x.0.is_some() {
                accumulate(grads, x.0, matmul(g, &w.1));
            }
            if w.0.is_some() {
                accumulate(grads, w.0, matmul_tn(g, &x.1));
            }
        }
        Op::AddRow { x, b } => {
            accumulate(grads, *x, g.clone());
            if b.is_some() {
                let mut col_sums = Tensor::zeros(1, g.cols());
                for r in g.iter_rows() {
                    for (s, v) in col_sums.data_mut().iter_mut().zip(r) {
                        *s += v;
                    }
                }
                accumulate(grads, *b, col_sums);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            if b.is_some() {
                accumulate(grads, *b, g.map(|x| -x));
            }
        }
        Op::Mul { a, b } => {
            if a.0.is_some() {
                accumulate(grads, a.0, g.zip_map(&b.1, |x, y| x * y));
            }
            if b.0.is_some() {
                accumulate(grads, b.0, g.zip_map(&a.1, |x, y| x * y));
            }
        }
        Op::MulRow { x, r } => {
            if x.0.is_some() {
                let mut gx = g.clone();
                for i in 0..gx.rows() {
                    for (v, s) in gx.row_slice_mut(i).iter_mut().zip(r.1.data()) {
                        *v *= s;
                    }
                }
                accumulate(grads, x.0, gx);
            }
            if r.0.is_some() {
                let mut gr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for ((s, gv), xv) in gr
                        .data_mut()
                        .iter_mut()
                        .zip(g.row_slice(i))
                        .zip(x.1.row_slice(i))
                    {
                        *s += gv * xv;
                    }
                }
                accumulate(grads, r.0, gr);
            }
        }
        Op::Scale { a, c } => accumulate(grads, Some(*a), g.map(|x| c * x)),
        Op::Shift { a } => accumulate(grads, Some(*a), g.clone()),
        Op::Exp { a, out } => accumulate(grads, Some(*a), g.zip_map(out, |x, y| x * y)),
        Op::Log { a, input } => accumulate(grads, Some(*a), g.zip_map(input, |x, y| x / y)),
        Op::Relu { a, input } => accumulate(
            grads,
            Some(*a),
            g.zip_map(input, |x, y| if y > 0.0 { x } else { 0.0 }),
        ),
        Op::Sigmoid { a, out } => {
            accumulate(grads, Some(*a), g.zip_map(out, |x, s| x * s * (1.0 - s)))
        }
        Op::LogSigmoid { a, input } => accumulate(
            grads,
            Some(*a),
            g.zip_map(input, |x, v| x * sigmoid(-v)),
        ),
        Op::Square { a, input } => {
            accumulate(grads, Some(*a), g.zip_map(input, |x, v| 2.0 * x * v))
        }
        Op::Sum { a, shape } => accumulate(grads, Some(*a), Tensor::filled(shape.0, shape.1, g.item())),
        Op::SumRows { a, cols } => {
            let mut out = Tensor::zeros(g.rows(), *cols);
            for i in 0..g.rows() {
                let gi = g.get(i, 0);
                out.row_slice_mut(i).iter_mut().for_each(|v| *v = gi);
            }
            accumulate(grads, Some(*a), out);
        }
        Op::SliceCols { a, start, cols } => {
            let mut out = Tensor::zeros(g.rows(), *cols);
            for i in 0..g.rows() {
                out.row_slice_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row_slice(i));
            }
            accumulate(grads, Some(*a), out);
        }
        Op::LogAddExp { a, b, weight_a } => {
            if a.is_some() {
                accumulate(grads, *a, g.zip_map(weight_a, |x, w| x * w));
            }
            if b.is_some() {
                accumulate(grads, *b, g.zip_map(weight_a, |x, w| x * (1.0 - w)));
            }
        }
    }
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `∂loss/∂v`; zero when `v` is detached or does not influence the loss.
    pub fn wrt(&self, v: &Var) -> Tensor {
        let (r, c) = v.shape();
        v.node
            .and_then(|id| self.grads.get(id).cloned().flatten())
            .unwrap_or_else(|| Tensor::zeros(r, c))
    }
}
