//! Operation tape for reverse-mode differentiation.
//!
//! Every differentiable op records one entry: op kind plus saved context,
//! input node ids, output node id. Entries are appended in execution order,
//! so the list is topologically sorted by construction; [`Tape::backward`]
//! walks it once in reverse, accumulating gradients additively per node.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::ops::Op;
use super::{Tensor, TensorError, TensorId};

/// How ReLU nodes propagate gradients during a backward pass.
///
/// `Guided` additionally zeroes the gradient wherever the upstream gradient
/// is non-positive (the guided-backpropagation gate). It is reserved for the
/// explanation operators; training always uses `Standard`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    Standard,
    Guided,
}

/// Process-wide count of guided ReLU gate applications. Lets tests assert
/// that the guided backward never runs inside a training step.
static GUIDED_GATE_COUNT: AtomicU64 = AtomicU64::new(0);

pub fn guided_gate_invocations() -> u64 {
    GUIDED_GATE_COUNT.load(Ordering::Relaxed)
}

pub(crate) fn note_guided_gate() {
    GUIDED_GATE_COUNT.fetch_add(1, Ordering::Relaxed);
}

pub(crate) struct Node {
    pub tensor_id: TensorId,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f32>>,
    pub requires_grad: bool,
    pub is_leaf: bool,
}

pub(crate) struct Entry {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub output: usize,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    index: HashMap<TensorId, usize>,
    entries: Vec<Entry>,
    retained: HashSet<usize>,
    consumed: bool,
}

/// Recording surface for one differentiated computation.
///
/// A tape owns no tensors; it snapshots `Arc` handles to their buffers.
/// Recording and backward are per-session single-threaded, but independent
/// tapes can run concurrently.
pub struct Tape {
    inner: Mutex<Inner>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape: ops executed against it can be differentiated.
    pub fn new() -> Self {
        Self { inner: Mutex::new(Inner::default()), recording: true }
    }

    /// A non-recording tape: ops run forward-only with no tracking cost.
    pub fn inference() -> Self {
        Self { inner: Mutex::new(Inner::default()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_entries(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    /// Op kinds currently recorded, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.inner.lock().unwrap().entries.iter().map(|e| e.op.name()).collect()
    }

    fn intern(inner: &mut Inner, t: &Tensor) -> usize {
        if let Some(&idx) = inner.index.get(&t.id()) {
            return idx;
        }
        let idx = inner.nodes.len();
        inner.nodes.push(Node {
            tensor_id: t.id(),
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            requires_grad: t.is_grad_leaf(),
            is_leaf: true,
        });
        inner.index.insert(t.id(), idx);
        idx
    }

    pub(crate) fn record(&self, op: Op, inputs: &[&Tensor], output: &Tensor) {
        if !self.recording {
            return;
        }
        let mut inner = self.inner.lock().unwrap();
        let input_ids: Vec<usize> = inputs.iter().map(|t| Self::intern(&mut inner, t)).collect();
        let requires = input_ids.iter().any(|&i| inner.nodes[i].requires_grad);
        let out_idx = inner.nodes.len();
        inner.nodes.push(Node {
            tensor_id: output.id(),
            shape: output.shape().to_vec(),
            data: output.data_arc(),
            requires_grad: requires,
            is_leaf: false,
        });
        inner.index.insert(output.id(), out_idx);
        inner.entries.push(Entry { op, inputs: input_ids, output: out_idx });
    }

    /// Keep the gradient of an intermediate tensor so it can be queried
    /// after backward (feature-map probes for Grad-CAM).
    pub fn retain_grad(&self, t: &Tensor) -> Result<(), TensorError> {
        let mut inner = self.inner.lock().unwrap();
        let Some(&idx) = inner.index.get(&t.id()) else {
            return Err(TensorError::NotOnTape);
        };
        inner.retained.insert(idx);
        Ok(())
    }

    pub fn is_retained(&self, t: &Tensor) -> bool {
        let inner = self.inner.lock().unwrap();
        inner.index.get(&t.id()).is_some_and(|idx| inner.retained.contains(idx))
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// fails with [`TensorError::TapeConsumed`].
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, TensorError> {
        self.backward_with_mode(loss, BackwardMode::Standard)
    }

    pub fn backward_with_mode(
        &self,
        loss: &Tensor,
        mode: BackwardMode,
    ) -> Result<Gradients, TensorError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.consumed = true;
        let Some(&loss_idx) = inner.index.get(&loss.id()) else {
            return Err(TensorError::NotOnTape);
        };
        if inner.nodes[loss_idx].data.len() != 1 {
            return Err(TensorError::InvalidConfig(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[loss_idx].shape
            )));
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[loss_idx] = Some(vec![1.0]);

        for entry in inner.entries.iter().rev() {
            if !inner.nodes[entry.output].requires_grad && !inner.retained.contains(&entry.output)
            {
                continue;
            }
            let Some(grad_out) = grads[entry.output].take() else {
                continue;
            };
            let want: Vec<bool> = entry
                .inputs
                .iter()
                .map(|&i| inner.nodes[i].requires_grad || inner.retained.contains(&i))
                .collect();
            let input_grads = entry.op.backward(
                &entry.inputs.iter().map(|&i| &inner.nodes[i]).collect::<Vec<_>>(),
                &inner.nodes[entry.output],
                &grad_out,
                mode,
                &want,
            );
            // Retained intermediates keep their gradient for later queries.
            if inner.retained.contains(&entry.output) {
                grads[entry.output] = Some(grad_out);
            }
            for (slot, g) in entry.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    match &mut grads[*slot] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        none => *none = Some(g),
                    }
                }
            }
        }

        let mut map = HashMap::new();
        for (idx, node) in inner.nodes.iter().enumerate() {
            let wanted =
                (node.requires_grad && node.is_leaf) || inner.retained.contains(&idx);
            if !wanted {
                continue;
            }
            let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.data.len()]);
            let t = Tensor::from_vec(node.shape.clone(), data).expect("gradient shape");
            map.insert(node.tensor_id, t);
        }
        Ok(Gradients { map })
    }

    /// Gradient of `scalar` with respect to a retained intermediate.
    ///
    /// The intermediate must have been flagged with [`Tape::retain_grad`]
    /// before calling this; otherwise fails with `RetentionMissing`.
    pub fn grad_of_output_wrt(
        &self,
        intermediate: &Tensor,
        scalar: &Tensor,
    ) -> Result<Tensor, TensorError> {
        if !self.is_retained(intermediate) {
            return Err(TensorError::RetentionMissing);
        }
        let grads = self.backward(scalar)?;
        Ok(grads
            .wrt(intermediate)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(intermediate.shape())))
    }
}

/// Result of a backward pass: gradient per leaf (and per retained
/// intermediate), keyed by tensor identity.
#[derive(Debug)]
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    /// Gradient for a parameter, densified: tensors that never participated
    /// in the loss get an explicit zero gradient.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> Tensor {
        self.map.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
