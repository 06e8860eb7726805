//! N-dimensional f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values: every operation produces a fresh buffer and
//! never touches its inputs. Gradient tracking is explicit — operations are
//! recorded on a [`Tape`] passed to each op, and [`Tape::backward`] replays
//! the recording in reverse to accumulate gradients for every leaf tensor
//! flagged with `requires_grad`.
//!
//! All reductions run in a fixed serial order per output element, so results
//! are bit-identical between the serial and the opt-in parallel execution
//! modes (parallelism only ever splits work across independent output
//! elements).

pub mod ops;
pub mod tape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use tape::{BackwardMode, Gradients, Tape};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a tensor value. Clones share the id; operations mint
/// fresh ids for their outputs.
pub type TensorId = u64;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid operation configuration: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("tensor is not on this tape")]
    NotOnTape,
    #[error("tensor was not flagged for gradient retention before backward")]
    RetentionMissing,
    #[error("eval-mode batch norm requires running statistics but none were provided")]
    UninitializedStats,
}

/// Dense f32 tensor, row-major, immutable after creation.
#[derive(Debug, Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![1.0; numel]).expect("ones: valid shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![value; numel]).expect("full: valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(vec![1], vec![value]).expect("scalar")
    }

    /// Flag this tensor as a differentiation leaf. Keeps the identity.
    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn is_grad_leaf(&self) -> bool {
        self.requires_grad
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Row-major element access by multi-index.
    pub fn at(&self, index: &[usize]) -> f32 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape. Does not record on any tape; use
    /// [`ops::reshape`] inside differentiated computations.
    pub fn with_shape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot view {:?} as {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Shape of the broadcast result of two shapes under trailing-dimension
/// alignment, or an error when some axis pair disagrees and neither is 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}
