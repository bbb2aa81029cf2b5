//! Reverse-mode tape.
//!
//! Nodes are appended in creation order, so the node index is already a
//! topological order and backward is a single reverse sweep. Parameter leaves
//! borrow their values from the [`ParamStore`] the graph was opened on.
//!
//! Non-differentiable points use subgradient 0. When kink tracking is on,
//! every branch taken by a piecewise op (ReLU sign, `abs` sign, top-k
//! selection, data-dependent sample selection) is folded into a signature so
//! the gradient checker can tell whether a perturbation crossed a kink.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use super::kernels::{self, bidx, broadcast_shape};
use super::{ParamId, ParamStore, Shape, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Softplus,
    Softmax,
    MaskedSoftmax,
    NormalizeRows,
    RowNorm,
    RowSumSq,
    RowMean,
    RowVar,
    ColMean,
    Sum,
    Mean,
    Concat,
    SliceCols,
    GatherRows,
    GroupMean,
}

impl OpKind {
    pub const ALL: [OpKind; 32] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::AddScalar,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::Softplus,
        OpKind::Softmax,
        OpKind::MaskedSoftmax,
        OpKind::NormalizeRows,
        OpKind::RowNorm,
        OpKind::RowSumSq,
        OpKind::RowMean,
        OpKind::RowVar,
        OpKind::ColMean,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Concat,
        OpKind::SliceCols,
        OpKind::GatherRows,
        OpKind::GroupMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddScalar => "add_scalar",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Softplus => "softplus",
            OpKind::Softmax => "softmax",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::NormalizeRows => "normalize_rows",
            OpKind::RowNorm => "row_norm",
            OpKind::RowSumSq => "row_sum_sq",
            OpKind::RowMean => "row_mean",
            OpKind::RowVar => "row_var",
            OpKind::ColMean => "col_mean",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::SliceCols => "slice_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::GroupMean => "group_mean_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Softmax(Var),
    MaskedSoftmax(Var, Box<[bool]>),
    NormalizeRows(Var, Box<[f64]>),
    RowNorm(Var),
    RowSumSq(Var),
    RowMean(Var),
    RowVar(Var),
    ColMean(Var),
    Sum(Var),
    Mean(Var),
    Concat(Box<[Var]>),
    SliceCols(Var, usize),
    GatherRows(Var, Box<[usize]>),
    GroupMean(Var, usize),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Softmax(_) => OpKind::Softmax,
            Op::MaskedSoftmax(..) => OpKind::MaskedSoftmax,
            Op::NormalizeRows(..) => OpKind::NormalizeRows,
            Op::RowNorm(_) => OpKind::RowNorm,
            Op::RowSumSq(_) => OpKind::RowSumSq,
            Op::RowMean(_) => OpKind::RowMean,
            Op::RowVar(_) => OpKind::RowVar,
            Op::ColMean(_) => OpKind::ColMean,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat(_) => OpKind::Concat,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::GroupMean(..) => OpKind::GroupMean,
        }
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct KinkTracker {
    hash: u64,
    decisions: u64,
}

impl KinkTracker {
    fn push(&mut self, bit: bool) {
        self.hash = (self.hash ^ (bit as u64 + 1)).wrapping_mul(0x0000_0100_0000_01b3);
        self.decisions += 1;
    }
}

/// Gradients of one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Tensor)>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Graph::variable`] or
    /// [`Graph::param`]; `None` when the leaf was unreachable from the loss.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    store: Option<&'a ParamStore>,
    bound: Vec<Option<Var>>,
    kinks: Option<KinkTracker>,
    fault: Option<OpKind>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            kinks: None,
            fault: None,
            detached: Vec::new(),
            replay: None,
        }
    }

    /// A graph whose [`Graph::param`] leaves read from `store`.
    pub fn with_params(store: &'a ParamStore) -> Self {
        let mut g = Self::new();
        g.store = Some(store);
        g.bound = vec![None; store.len()];
        g
    }

    /// Enables branch-signature recording for the gradient checker.
    pub fn track_kinks(mut self) -> Self {
        self.kinks = Some(KinkTracker {
            hash: 0xcbf2_9ce4_8422_2325,
            decisions: 0,
        });
        self
    }

    /// Makes the `i`-th [`Graph::detach`] call return `values[i]` instead of
    /// the live value, so that stop-gradient quantities stay fixed while the
    /// gradient checker perturbs parameters.
    pub fn replay_detached(mut self, values: Vec<Tensor>) -> Self {
        self.replay = Some(values);
        self
    }

    /// Values produced by [`Graph::detach`] so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    /// Parameters bound into this graph, in id order.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.bound
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Scales the backward rule of `kind` by 1.5. Test fixture for exercising
    /// the gradient checker's failure path.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Hash of all branch decisions taken so far plus their count, when
    /// tracking is on.
    pub fn signature(&self) -> Option<(u64, u64)> {
        self.kinks.map(|k| (k.hash, k.decisions))
    }

    /// Records a data-dependent branch (sample selection, ordering test).
    pub fn note_decision(&mut self, bit: bool) {
        if let Some(k) = &mut self.kinks {
            k.push(bit);
        }
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `[1 × 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    ///
    /// Panics if the graph was not opened with [`Graph::with_params`].
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("graph opened without a parameter store");
        self.nodes.push(Node {
            value: Value::Borrowed(store.value(id)),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    /// Constant copy of `v`; gradient does not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let i = self.detached.len();
        let t = match self.replay.as_ref().and_then(|r| r.get(i)) {
            Some(t) if t.shape() == self.value(v).shape() => t.clone(),
            _ => self.value(v).clone(),
        };
        self.detached.push(t.clone());
        self.constant(t)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    // ---- broadcasting binary ops ----------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let s = broadcast_shape(sa, sb).ok_or(Error::Shape {
            op: name,
            lhs: sa,
            rhs: sb,
        })?;
        let (da, db) = (ta.data(), tb.data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(s.len());
            for r in 0..s.rows {
                for c in 0..s.cols {
                    out.push(f(da[bidx(sa, r, c)], db[bidx(sb, r, c)]));
                }
            }
            out
        };
        Ok(Tensor::from_parts(s, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Div(a, b), ng))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if let Some(k) = &mut self.kinks {
            for &x in self.nodes[a.0].value.data() {
                k.push(x > 0.0);
            }
        }
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, 0)`; an alias of [`Graph::relu`] used for hinge losses.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), libm::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), libm::log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        if let Some(k) = &mut self.kinks {
            for &x in self.nodes[a.0].value.data() {
                k.push(x > 0.0);
                k.push(x < 0.0);
            }
        }
        self.unary(a, Op::Abs(a), libm::fabs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), libm::sqrt)
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), kernels::softplus)
    }

    // ---- row-wise ops ---------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - m);
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::from_parts(t.shape(), out);
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Softmax over the entries where `mask` is true; masked-out entries are 0
    /// and receive no gradient. Every row needs at least one selected entry.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if mask.len() != r * c {
            return Err(contract("masked_softmax: mask length must equal tensor size"));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(contract("masked_softmax: row with no selected entry"));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = libm::exp(row[j] - mx);
                    s += o[j];
                }
            }
            for x in o.iter_mut() {
                *x /= s;
            }
        }
        if let Some(k) = &mut self.kinks {
            for &on in mask {
                k.push(on);
            }
        }
        let out = Tensor::from_parts(Shape::new(r, c), out);
        let ng = self.ng(a);
        Ok(self.push(out, Op::MaskedSoftmax(a, mask.into()), ng))
    }

    /// Per-row standardization `(x − μ) / √(σ² + 1e-5)` with population
    /// variance; the core of layer normalization.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-5;
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut inv = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + EPS);
            for x in row.iter_mut() {
                *x = (*x - mu) * is;
            }
            inv.push(is);
        }
        let out = Tensor::from_parts(t.shape(), out);
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows(a, inv.into()), ng)
    }

    /// Layer normalization with learnable `[1 × c]` scale and shift.
    pub fn layer_norm(&mut self, a: Var, scale: Var, shift: Var) -> Result<Var> {
        let n = self.normalize_rows(a);
        let s = self.mul(n, scale)?;
        self.add(s, shift)
    }

    /// Euclidean norm of each row, `[r × c] → [r × 1]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols().max(1);
        let out: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|r| libm::sqrt(r.iter().map(|x| x * x).sum::<f64>()))
            .collect();
        let rows = t.rows();
        if let Some(k) = &mut self.kinks {
            for &n in &out {
                k.push(n > 0.0);
            }
        }
        let out = Tensor::from_parts(Shape::new(rows, 1), out);
        let ng = self.ng(a);
        self.push(out, Op::RowNorm(a), ng)
    }

    /// Squared Euclidean norm of each row.
    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols().max(1);
        let out: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>())
            .collect();
        let out = Tensor::from_parts(Shape::new(t.rows(), 1), out);
        let ng = self.ng(a);
        self.push(out, Op::RowSumSq(a), ng)
    }

    /// Row-wise squared Euclidean distance `‖a − b‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.row_sum_sq(d))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols().max(1);
        let out: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|r| r.iter().sum::<f64>() / c as f64)
            .collect();
        let out = Tensor::from_parts(Shape::new(t.rows(), 1), out);
        let ng = self.ng(a);
        self.push(out, Op::RowMean(a), ng)
    }

    /// Population variance of each row.
    pub fn row_var(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols().max(1);
        let out: Vec<f64> = t
            .data()
            .chunks(c)
            .map(|r| {
                let mu = r.iter().sum::<f64>() / c as f64;
                r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64
            })
            .collect();
        let out = Tensor::from_parts(Shape::new(t.rows(), 1), out);
        let ng = self.ng(a);
        self.push(out, Op::RowVar(a), ng)
    }

    /// Mean over the batch axis, `[r × c] → [1 × c]`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let out = Tensor::from_parts(Shape::new(1, c), out);
        let ng = self.ng(a);
        self.push(out, Op::ColMean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.shape().len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    // ---- structural -----------------------------------------------------

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let r = self.shape(first).rows;
        for &p in parts {
            if self.shape(p).rows != r {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first),
                    rhs: self.shape(p),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).cols).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(Shape::new(r, total), out),
            Op::Concat(parts.into()),
            ng,
        ))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape(),
                rhs: Shape::new(1, start + len),
            });
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::from_parts(Shape::new(t.rows(), len), out);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Rows picked by `indices` (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(contract(alloc::format!(
                "gather_rows: index {bad} out of range for {}",
                t.shape()
            )));
        }
        let out = t.select_rows(indices);
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherRows(a, indices.into()), ng))
    }

    /// Mean of each consecutive block of `group` rows,
    /// `[(n·group) × c] → [n × c]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = self.value(a);
        if group == 0 || !t.rows().is_multiple_of(group) {
            return Err(Error::Shape {
                op: "group_mean_rows",
                lhs: t.shape(),
                rhs: Shape::new(group, t.cols()),
            });
        }
        let (n, c) = (t.rows() / group, t.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for s in 0..group {
                for (x, y) in o.iter_mut().zip(t.row(i * group + s)) {
                    *x += y;
                }
            }
            for x in o.iter_mut() {
                *x /= group as f64;
            }
        }
        let out = Tensor::from_parts(Shape::new(n, c), out);
        let ng = self.ng(a);
        Ok(self.push(out, Op::GroupMean(a, group), ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a `[1 × 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != Shape::SCALAR {
            return Err(contract(alloc::format!(
                "backward needs a scalar loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some(f) = self.fault {
                if f == node.op.kind() {
                    for x in &mut g {
                        *x *= 1.5;
                    }
                }
            }
            if let Op::Leaf = node.op {
                let t = Tensor::from_parts(node.value.shape(), g);
                if let Some(id) = node.param {
                    out.params.push((id, t.clone()));
                }
                out.leaves.push((Var(i), t));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn propagate(&self, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let buf = slot(grads, *a, ta.shape().len());
                    kernels::add_matmul_a_bt(buf, g, tb, ta.rows());
                }
                if self.ng(*b) {
                    let buf = slot(grads, *b, tb.shape().len());
                    kernels::add_matmul_at_b(buf, ta, g, tb.cols());
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    let s = y.shape();
                    let buf = slot(grads, *a, s.len());
                    for i in 0..s.rows {
                        for j in 0..s.cols {
                            buf[j * s.rows + i] += g[i * s.cols + j];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.binary_backward(&node.op, *a, *b, y.shape(), g, grads);
            }
            Op::AddScalar(a) => add_into(slot_if(self, grads, *a), g),
            Op::Scale(a, s) => {
                if let Some(buf) = slot_if(self, grads, *a) {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                }
            }
            Op::Relu(a) => self.elementwise(*a, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Tanh(a) => self.elementwise_out(*a, y, g, grads, |yv| 1.0 - yv * yv),
            Op::Sigmoid(a) => self.elementwise_out(*a, y, g, grads, |yv| yv * (1.0 - yv)),
            Op::Exp(a) => self.elementwise_out(*a, y, g, grads, |yv| yv),
            Op::Log(a) => self.elementwise(*a, g, grads, |x, _| 1.0 / x),
            Op::Abs(a) => self.elementwise(*a, g, grads, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Square(a) => self.elementwise(*a, g, grads, |x, _| 2.0 * x),
            Op::Sqrt(a) => self.elementwise_out(*a, y, g, grads, |yv| {
                if yv > 0.0 {
                    0.5 / yv
                } else {
                    0.0
                }
            }),
            Op::Softplus(a) => self.elementwise(*a, g, grads, |x, _| kernels::sigmoid(x)),
            Op::Softmax(a) => {
                if let Some(buf) = slot_if(self, grads, *a) {
                    let c = y.cols();
                    for (i, (yr, gr)) in y.data().chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a, _mask) => {
                // Unselected outputs are identically zero, so the plain
                // softmax Jacobian restricted to the selected set applies.
                if let Some(buf) = slot_if(self, grads, *a) {
                    let c = y.cols();
                    for (i, (yr, gr)) in y.data().chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            buf[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows(a, inv) => {
                if let Some(buf) = slot_if(self, grads, *a) {
                    let c = y.cols();
                    let cf = c as f64;
                    for (i, (yr, gr)) in y.data().chunks(c).zip(g.chunks(c)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / cf;
                        let mgy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / cf;
                        for j in 0..c {
                            buf[i * c + j] += inv[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                if let Some(buf) = slot_if(self, grads, *a) {
                    let c = x.cols();
                    for i in 0..x.rows() {
                        let n = y.data()[i];
                        if n == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            buf[i * c + j] += g[i] * x.data()[i * c + j] / n;
                        }
                    }
                }
            }
            Op::RowSumSq(a) => {
                let x = self.value(*a);
                if let Some(buf) = slot_if(self, grads, *a) {
                    let c = x.cols();
                    for i in 0..x.rows() {
                        for j in 0..c {
                            buf[i * c + j] += 2.0 * g[i] * x.data()[i * c + j];
                        }
                    }
                }
            }
            Op::RowMean(a) => {
                let x = self.value(*a);
                if let Some(buf) = slot_if(self, grads, *a) {
                    let c = x.cols();
                    for i in 0..x.rows() {
                        for j in 0..c {
                            buf[i * c + j] += g[i] / c as f64;
                        }
                    }
                }
            }
            Op::RowVar(a) => {
                let x = self.value(*a);
                if let Some(buf) = slot_if(self, grads, *a) {
                    let c = x.cols();
                    let cf = c as f64;
                    for i in 0..x.rows() {
                        let r = x.row(i);
                        let mu = r.iter().sum::<f64>() / cf;
                        for j in 0..c {
                            buf[i * c + j] += g[i] * 2.0 * (r[j] - mu) / cf;
                        }
                    }
                }
            }
            Op::ColMean(a) => {
                let x = self.value(*a);
                if let Some(buf) = slot_if(self, grads, *a) {
                    let (r, c) = (x.rows(), x.cols());
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(buf) = slot_if(self, grads, *a) {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(buf) = slot_if(self, grads, *a) {
                    let n = buf.len() as f64;
                    for o in buf.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::Concat(parts) => {
                let (r, total) = (y.rows(), y.cols());
                let mut off = 0;
                for &p in parts.iter() {
                    let c = self.shape(p).cols;
                    if self.ng(p) {
                        let buf = slot(grads, p, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.shape(*a);
                let len = y.cols();
                if let Some(buf) = slot_if(self, grads, *a) {
                    for i in 0..x.rows {
                        for j in 0..len {
                            buf[i * x.cols + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = y.cols();
                if let Some(buf) = slot_if(self, grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            buf[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::GroupMean(a, group) => {
                let c = y.cols();
                if let Some(buf) = slot_if(self, grads, *a) {
                    for i in 0..y.rows() {
                        for s in 0..*group {
                            let r = i * group + s;
                            for j in 0..c {
                                buf[r * c + j] += g[i * c + j] / *group as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    fn binary_backward(
        &self,
        op: &Op,
        a: Var,
        b: Var,
        s: Shape,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (da, db) = (ta.data(), tb.data());
        // d out / d a and d out / d b at a broadcast position.
        let partials = |x: f64, yv: f64| -> (f64, f64) {
            match op {
                Op::Add(..) => (1.0, 1.0),
                Op::Sub(..) => (1.0, -1.0),
                Op::Mul(..) => (yv, x),
                Op::Div(..) => (1.0 / yv, -x / (yv * yv)),
                _ => unreachable!(),
            }
        };
        let (na, nb) = (self.ng(a), self.ng(b));
        let mut ga = if na { Some(vec![0.0; sa.len()]) } else { None };
        let mut gb = if nb { Some(vec![0.0; sb.len()]) } else { None };
        for r in 0..s.rows {
            for c in 0..s.cols {
                let (ia, ib) = (bidx(sa, r, c), bidx(sb, r, c));
                let (pa, pb) = partials(da[ia], db[ib]);
                let gv = g[r * s.cols + c];
                if let Some(ga) = &mut ga {
                    ga[ia] += gv * pa;
                }
                if let Some(gb) = &mut gb {
                    gb[ib] += gv * pb;
                }
            }
        }
        if let Some(ga) = ga {
            add_into(Some(slot(grads, a, sa.len())), &ga);
        }
        if let Some(gb) = gb {
            add_into(Some(slot(grads, b, sb.len())), &gb);
        }
    }

    fn elementwise(
        &self,
        a: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, usize) -> f64,
    ) {
        if !self.ng(a) {
            return;
        }
        let x = self.value(a).data();
        let buf = slot(grads, a, x.len());
        for (i, (o, &gv)) in buf.iter_mut().zip(g).enumerate() {
            *o += gv * d(x[i], i);
        }
    }

    fn elementwise_out(
        &self,
        a: Var,
        y: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        d: impl Fn(f64) -> f64,
    ) {
        if !self.ng(a) {
            return;
        }
        let buf = slot(grads, a, y.shape().len());
        for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(y.data()) {
            *o += gv * d(yv);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn slot_if<'g>(
    graph: &Graph<'_>,
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if graph.ng(v) {
        let len = graph.shape(v).len();
        Some(slot(grads, v, len))
    } else {
        None
    }
}

fn add_into(buf: Option<&mut Vec<f64>>, g: &[f64]) {
    if let Some(buf) = buf {
        for (o, &v) in buf.iter_mut().zip(g) {
            *o += v;
        }
    }
}
