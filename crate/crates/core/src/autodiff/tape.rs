use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::dist::collective::{Collective, RoundKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ParamStore;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds, used for error messages and for fault injection in negative
/// controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    MulCol,
    Concat,
    SliceCols,
    SliceRows,
    Reshape,
    RowSqNorm,
    Scale,
    SumRows,
    SumAll,
    Silu,
    Exp,
    Transpose,
    Gather,
    Scatter,
    AllReduce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulCol => "mul_col",
            OpKind::Concat => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::Reshape => "reshape",
            OpKind::RowSqNorm => "row_sqnorm",
            OpKind::Scale => "scale",
            OpKind::SumRows => "sum_rows",
            OpKind::SumAll => "sum_all",
            OpKind::Silu => "silu",
            OpKind::Exp => "exp",
            OpKind::Transpose => "transpose",
            OpKind::Gather => "gather_rows",
            OpKind::Scatter => "scatter_add_rows",
            OpKind::AllReduce => "all_reduce_sum",
        }
    }
}

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    RowSqNorm(Var),
    Scale(Var, f64),
    SumRows(Var),
    SumAll(Var),
    Silu(Var),
    Exp(Var),
    Transpose(Var),
    Gather(Var, Arc<[usize]>),
    Scatter(Var, Arc<[usize]>),
    AllReduce(Var, Arc<dyn Collective>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::Concat(_) => OpKind::Concat,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::RowSqNorm(_) => OpKind::RowSqNorm,
            Op::Scale(..) => OpKind::Scale,
            Op::SumRows(_) => OpKind::SumRows,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Silu(_) => OpKind::Silu,
            Op::Exp(_) => OpKind::Exp,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Gather(..) => OpKind::Gather,
            Op::Scatter(..) => OpKind::Scatter,
            Op::AllReduce(..) => OpKind::AllReduce,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by one backward pass, keyed by name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, and
/// [`Tape::backward`] walks them in exact reverse. A tape is built for one
/// sample and thrown away after its backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
    consumed: bool,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            consumed: false,
            fault: None,
        }
    }

    /// A tape for inference only; `backward` on it is an error.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Negates the backward rule of one op kind. Used only by negative
    /// controls that must observe a failing gradient check.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.kind().name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Records the current value of a named parameter. Repeated calls with the
    /// same name return the same leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Broadcast add of a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        let rg = self.requires(a) || self.requires(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.value(a).mul_col(self.value(col))?;
        let rg = self.requires(a) || self.requires(col);
        self.push(out, Op::MulCol(a, col), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, end)?;
        let rg = self.requires(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        let rg = self.requires(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        let rg = self.requires(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn row_sqnorm(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).row_sqnorm();
        let rg = self.requires(a);
        self.push(out, Op::RowSqNorm(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        let rg = self.requires(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_rows();
        let rg = self.requires(a);
        self.push(out, Op::SumRows(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).rows();
        if n == 0 {
            return Err(Error::invalid("mean over zero rows"));
        }
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum_all());
        let rg = self.requires(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.requires(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.requires(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.requires(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let out = self.value(a).gather_rows(&index)?;
        let rg = self.requires(a);
        self.push(out, Op::Gather(a, index), rg)
    }

    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        let out = self.value(a).scatter_add_rows(&index, rows)?;
        let rg = self.requires(a);
        self.push(out, Op::Scatter(a, index), rg)
    }

    /// Sums `a` across every participant of `comm`. The backward rule is an
    /// all-reduce of the incoming gradients, so every contributor receives
    /// the sum of all replicas' output gradients.
    pub fn all_reduce_sum(&mut self, a: Var, comm: Arc<dyn Collective>) -> Result<Var> {
        let out = comm.all_reduce_sum(self.value(a), RoundKind::Forward)?;
        self.push(out, Op::AllReduce(a, comm), true)
    }

    /// Reverse pass from a `1x1` loss. Returns the gradient of every
    /// parameter reachable from `loss`; the tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.grad_enabled {
            return Err(Error::NoGrad);
        }
        let shape = self.shape(loss).to_vec();
        if shape != [1, 1] {
            return Err(Error::NotScalar(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let g = match (&node.op, grads[i].take()) {
                // Every replica must join every backward round, reachable or not.
                (Op::AllReduce(a, comm), g) => {
                    let g = g.unwrap_or_else(|| {
                        Tensor::zeros(node.value.rows(), node.value.cols())
                    });
                    let summed = comm.all_reduce_sum(&g, RoundKind::Backward)?;
                    self.accumulate(&mut grads, *a, summed)?;
                    continue;
                }
                (_, Some(g)) if node.requires_grad => g,
                _ => continue,
            };
            let g = if self.fault == Some(node.op.kind()) {
                g.scale(-1.0)
            } else {
                g
            };
            self.propagate(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.requires(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::AllReduce(..) => {}
            Op::Param(name) => {
                out.insert(name.clone(), g);
            }
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let ga = g.matmul_bt(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires(*b) {
                    let gb = self.value(*a).matmul_at(&g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.scale(-1.0))?;
                self.accumulate(grads, *a, g)?;
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::AddRow(a, row) => {
                if self.requires(*row) {
                    self.accumulate(grads, *row, g.sum_rows())?;
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::MulCol(a, col) => {
                if self.requires(*col) {
                    let av = self.value(*a);
                    let gc: Vec<f64> = (0..av.rows())
                        .map(|r| {
                            g.row(r)
                                .iter()
                                .zip(av.row(r))
                                .fold(0.0, |acc, (x, y)| acc + x * y)
                        })
                        .collect();
                    self.accumulate(grads, *col, Tensor::new(av.rows(), 1, gc)?)?;
                }
                if self.requires(*a) {
                    self.accumulate(grads, *a, g.mul_col(self.value(*col))?)?;
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires(p) {
                        self.accumulate(grads, p, g.slice_cols(start, start + w)?)?;
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut full = Tensor::zeros(av.rows(), av.cols());
                let w = g.cols();
                for r in 0..av.rows() {
                    full.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, full)?;
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut full = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                full.data_mut()[*start * c..(*start + g.rows()) * c].copy_from_slice(g.data());
                self.accumulate(grads, *a, full)?;
            }
            Op::Reshape(a) => {
                let av = self.value(*a);
                let ga = g.reshape(av.rows(), av.cols())?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::RowSqNorm(a) => {
                let av = self.value(*a);
                let ga = av.mul_col(&g)?.scale(2.0);
                self.accumulate(grads, *a, ga)?;
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.scale(*s))?;
            }
            Op::SumRows(a) => {
                let n = self.value(*a).rows();
                let mut ga = Tensor::zeros(n, g.cols());
                for r in 0..n {
                    ga.row_mut(r).copy_from_slice(g.data());
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                let ga = Tensor::full(av.rows(), av.cols(), g.item()?);
                self.accumulate(grads, *a, ga)?;
            }
            Op::Silu(a) => {
                let d = self.value(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, g.mul(&d)?)?;
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.mul(&node.value)?)?;
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose())?;
            }
            Op::Gather(a, index) => {
                let rows = self.value(*a).rows();
                self.accumulate(grads, *a, g.scatter_add_rows(index, rows)?)?;
            }
            Op::Scatter(a, index) => {
                self.accumulate(grads, *a, g.gather_rows(index)?)?;
            }
        }
        Ok(())
    }
}
