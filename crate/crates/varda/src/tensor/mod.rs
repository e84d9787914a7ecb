//! Dense row-major tensors and the operation tape that differentiates them.
//!
//! A [`Tensor`] is a shape plus shared `Vec<Real>` storage with a gradient
//! slot beside it. A [`Tape`] records every operation applied through it as a
//! boxed backward closure; [`Tape::backward`] replays those closures in
//! reverse, accumulating gradients into every tensor that requires them. The
//! tape is consumed by `backward`, so a second call without a fresh forward
//! pass is an error rather than a silent wrong answer.

mod gradcheck;
mod kernels;
mod ops;
pub mod vten;

pub use gradcheck::{grad_check, GradCheckReport};

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward called on a tape that was already consumed; rerun the forward pass first")]
    TapeConsumed,
    #[error("backward called on a non-recording tape")]
    InactiveTape,
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("loss does not depend on any tensor that requires gradients")]
    NoGradPath,
    #[error("parameter {name:?} has no gradient; it was not part of the last backward pass")]
    MissingGrad { name: String },
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<Real>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<Real>>>,
}

/// Shared handle to one dense tensor. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize, TensorError> {
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        n = n.checked_mul(e).ok_or(TensorError::InvalidArgument {
            op: "tensor",
            detail: format!("shape {shape:?} overflows usize"),
        })?;
    }
    Ok(n)
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<Real>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Constant tensor (no gradient slot is ever filled for it).
    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Tensor, TensorError> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} wants {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor::new(shape.to_vec(), data, false))
    }

    /// Trainable tensor: participates in backward passes.
    pub fn param(shape: &[usize], data: Vec<Real>) -> Result<Tensor, TensorError> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                detail: format!("shape {shape:?} wants {n} elements, got {}", data.len()),
            });
        }
        Ok(Tensor::new(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor, TensorError> {
        let n = checked_numel(shape)?;
        Ok(Tensor::new(shape.to_vec(), vec![0.0; n], false))
    }

    pub fn scalar(v: Real) -> Tensor {
        Tensor::new(vec![], vec![v], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the values. Do not hold across calls that mutate this tensor.
    pub fn data(&self) -> Ref<'_, [Real]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<Real> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Real {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Mutate values in place (optimizer updates, finite-difference probes).
    pub fn with_data_mut(&self, f: impl FnOnce(&mut [Real])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<Real>> {
        self.inner.grad.borrow().clone()
    }

    /// Remove and return the accumulated gradient, leaving the slot empty.
    pub fn take_grad(&self) -> Option<Vec<Real>> {
        self.inner.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutate the gradient in place if one is present (norm clipping).
    pub fn map_grad(&self, f: impl FnOnce(&mut [Real])) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            f(g);
        }
    }

    /// Add `g` into the gradient slot. No-op for tensors that do not require
    /// gradients, so backward closures can call it unconditionally.
    pub(crate) fn accumulate_grad(&self, g: &[Real]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// True if every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }
}

type Record = Box<dyn FnOnce()>;

/// Records operations for one forward pass and replays them in reverse.
pub struct Tape {
    records: RefCell<Vec<Record>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl Tape {
    /// Tape that records backward closures for every differentiable op.
    pub fn new() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// Non-recording tape for inference: ops run forward only and their
    /// outputs never require gradients.
    pub fn no_grad() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations so far.
    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    fn push(&self, rec: impl FnOnce() + 'static) {
        self.records.borrow_mut().push(Box::new(rec));
    }

    /// Whether an op with these inputs should produce a grad-tracked output.
    fn track(&self, inputs: &[&Tensor]) -> bool {
        self.recording && !self.consumed.get() && inputs.iter().any(|t| t.requires_grad())
    }

    fn out(&self, shape: Vec<usize>, data: Vec<Real>, inputs: &[&Tensor]) -> Tensor {
        Tensor::new(shape, data, self.track(inputs))
    }

    /// Seed `d loss / d loss = 1` and replay all records in reverse order,
    /// accumulating gradients into every tensor that requires them. Consumes
    /// the recorded operations: a second call without a new forward pass
    /// returns [`TensorError::TapeConsumed`].
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if !self.recording {
            return Err(TensorError::InactiveTape);
        }
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss { numel: loss.numel() });
        }
        if !loss.requires_grad() {
            return Err(TensorError::NoGradPath);
        }
        self.consumed.set(true);
        loss.accumulate_grad(&[1.0]);
        let records = std::mem::take(&mut *self.records.borrow_mut());
        for rec in records.into_iter().rev() {
            rec();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
