//! Dense f64 tensors with taped reverse-mode differentiation.
//!
//! A [`Tensor`] is a plain shape + flat row-major buffer. Differentiable
//! computation runs on a [`Tape`]: leaves are copied in, ops append nodes, and
//! [`Tape::backward`] accumulates gradients for every node reached from the
//! loss. The graph is acyclic by construction because an op can only reference
//! nodes that already exist.
//!
//! Everything is double precision and single-threaded per tape; identical
//! inputs produce bit-identical outputs.

pub mod gradcheck;
mod tape;

pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("cross_entropy: every position is excluded from the loss")]
    DegenerateBatch,
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
}

/// Dense row-major array of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadLength {
                op: "tensor",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), n],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (rank-1 counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows: tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols: tensor of rank {} is not a matrix", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Named, optionally trainable tensor. Gradients accumulate in `grad`; the
/// training loop zeroes them between steps.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Vec<f64>>,
    pub trainable: bool,
}

impl Parameter {
    pub fn ensure_grad(&mut self) -> &mut Vec<f64> {
        let n = self.tensor.numel();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Handle into a [`ParamSet`]; resolved once at model construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered parameter store. Order is the construction order, which makes
/// initialization, updates, and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

/// Maps parameters onto tape leaves for one forward pass. Only bound groups
/// participate in the pass, so an instruction-only step never touches encoder
/// or adapter state.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new(params: &ParamSet) -> Self {
        Binding {
            vars: vec![None; params.len()],
        }
    }

    /// Binds every parameter whose name starts with `prefix`.
    pub fn bind_prefix(&mut self, tape: &mut Tape, params: &ParamSet, prefix: &str) {
        for (id, p) in params.iter() {
            if p.name.starts_with(prefix) && self.vars[id.0].is_none() {
                self.vars[id.0] = Some(tape.leaf(&p.tensor));
            }
        }
    }

    pub fn bind_all(tape: &mut Tape, params: &ParamSet) -> Self {
        let mut b = Binding::new(params);
        b.bind_prefix(tape, params, "");
        b
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter not bound for this pass")
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }

    /// Adds tape gradients into the trainable parameters' grad buffers and
    /// returns the ids that actually received gradient this pass.
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut ParamSet) -> Vec<ParamId> {
        let mut touched = Vec::new();
        for (id, p) in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(var) = self.vars[id.0] else { continue };
            let Some(g) = tape.grad(var) else { continue };
            let buf = p.ensure_grad();
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
            touched.push(id);
        }
        touched
    }
}
