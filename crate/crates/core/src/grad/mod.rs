//! Reverse-mode gradient tape over small dense matrices.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s. Nodes are appended
//! in evaluation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep. Leaves created with
//! [`Tape::param`] are tied to a [`ParamStore`] entry and receive the
//! accumulated gradient.
//!
//! Custom kernels (the rasterizer, Gaussian projection) plug in through the
//! [`Backward`] trait and [`Tape::custom`].

mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{sigmoid, PERSPECTIVE_ZMIN};

/// Row-major dense matrix. Scalars are 1x1, vectors are n x 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Self { rows: rows.len(), cols: N, data: rows.iter().flatten().copied().collect() }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Keeps the rows whose flag is set.
    pub fn select_rows(&self, keep: &[bool]) -> Tensor {
        assert_eq!(keep.len(), self.rows);
        let mut data = Vec::with_capacity(self.data.len());
        let mut rows = 0;
        for (r, &k) in keep.iter().enumerate() {
            if k {
                data.extend_from_slice(self.row(r));
                rows += 1;
            }
        }
        Tensor { rows, cols: self.cols, data }
    }

    /// Copies the listed rows, in order.
    pub fn take_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { rows: idx.len(), cols: self.cols, data }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row length");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Stacks tensors with equal column counts.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols);
        assert!(parts.iter().all(|t| t.cols == cols), "vstack column mismatch");
        Tensor { rows: parts.iter().map(|t| t.rows).sum(), cols, data: parts.iter().flat_map(|t| t.data.iter().copied()).collect() }
    }
}

/// Gradient rule of a recorded primitive.
///
/// Receives the forward inputs, the forward output and `dL/d(output)`;
/// returns `dL/d(input)` per input (`None` when the input gets no gradient).
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every optimizable array and its gradient accumulator.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Replaces the value and resets the gradient to the new shape.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.grad = Tensor::zeros(value.rows(), value.cols());
        p.value = value;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    param: Option<ParamId>,
    name: &'static str,
}

/// Append-only record of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, inputs: Vec<usize>, op: Option<Box<dyn Backward>>, param: Option<ParamId>, name: &'static str) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert!(inputs.iter().all(|&i| i < nodes.len()));
        nodes.push(Node { value: Rc::new(value), inputs, op, param, name });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, None, "constant")
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a parameter; its gradient flows back into the store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Vec::new(), None, Some(id), "param")
    }

    /// Records a primitive with a user-supplied gradient rule.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, op: Box<dyn Backward>, name: &'static str) -> Var<'t> {
        self.push(value, inputs.iter().map(|v| v.id).collect(), Some(op), None, name)
    }

    /// Accumulates `d(loss)/d(param)` into every parameter reachable from `loss`.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if out.shape() != (1, 1) {
            return Err(Error::NonScalarLoss { rows: out.rows(), cols: out.cols() });
        }
        if let Some(bad) = nodes[..=loss.id].iter().find(|n| !n.value.is_finite()) {
            return Err(Error::NonFiniteValue { op: bad.name.to_string() });
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                let p = store.get_mut(pid);
                if p.grad.shape() != g.shape() {
                    return Err(Error::ShapeMismatch(format!("gradient for `{}`", p.name)));
                }
                p.grad.add_assign(&g);
                continue;
            }
            let Some(op) = &node.op else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let input_grads = op.backward(&inputs, &node.value, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "`{}` returned wrong gradient count", node.name);
            for (&src, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !ig.is_finite() {
                    return Err(Error::NonFiniteValue { op: format!("{} (backward)", node.name) });
                }
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// Per-parameter agreement between analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub per_param: Vec<(String, f64)>,
    pub max_error: f64,
}

/// Compares tape gradients against central differences.
///
/// For each parameter the error is `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)`;
/// the report's `max_error` is the maximum over parameters.
pub fn check_gradients<F>(store: &mut ParamStore, step: f64, loss_fn: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    store.zero_grad();
    {
        let tape = Tape::new();
        let loss = loss_fn(&tape, store)?;
        tape.backward(loss, store)?;
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss_fn(&tape, s)?.item())
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_error: f64 = 0.0;
    for id in ids {
        let analytic = store.grad(id).clone();
        let mut numeric = Tensor::zeros(analytic.rows(), analytic.cols());
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - step;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            numeric.data_mut()[k] = (up - down) / (2.0 * step);
        }
        let diff = analytic.data().iter().zip(numeric.data()).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let denom = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
        let err = diff / denom;
        max_error = max_error.max(err);
        per_param.push((store.get(id).name.clone(), err));
    }
    Ok(GradCheck { per_param, max_error })
}
