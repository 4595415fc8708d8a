//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every model module in this crate runs on these tensors. The design is
//! deliberately small: row-major storage, a dynamic shape vector, and a
//! backward closure per node. Losses are scalars, so `backward` is only
//! callable on single-element tensors.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

mod checkpoint;
mod gradcheck;
mod init;
mod ops;

pub use ops::cross_entropy_rows;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{gradcheck, gradcheck_with};
pub use init::{seeded_rng, ParamInit};

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: non-finite values produced from finite inputs")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with gradient recording disabled on this thread.
///
/// All tensors created inside come out as constants with no tape history,
/// which makes evaluation-only forward passes cheap.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

type BackwardFn = Box<dyn Fn(&TensorInner)>;

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to an immutable tensor value plus its (optional) tape record.
///
/// Cloning is cheap (reference count bump). Values never change after
/// construction; training updates replace leaf tensors wholesale.
#[derive(Clone)]
pub struct Tensor(Rc<TensorInner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(TensorInner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                details: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, false, vec![], None))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                details: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        Ok(Tensor::new_inner(shape.to_vec(), data, true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new_inner(shape.to_vec(), vec![0.0; n], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_inner(vec![1], vec![v], false, vec![], None)
    }

    /// Result of an op: output requires grad iff recording is on and any
    /// parent requires grad; otherwise the tape edges are dropped.
    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Ok(Tensor::new_inner(shape, data, true, parents, Some(backward)))
        } else {
            Ok(Tensor::new_inner(shape, data, false, vec![], None))
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// New constant leaf sharing this tensor's values (cuts the tape).
    pub fn detach(&self) -> Tensor {
        Tensor::new_inner(self.0.shape.clone(), self.0.data.clone(), false, vec![], None)
    }

    pub(crate) fn accum_grad(&self, contrib: &[f64]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.0.data.len()]);
        debug_assert_eq!(buf.len(), contrib.len());
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }

    /// Reverse-mode sweep from a scalar. Visits each recorded node exactly
    /// once, in reverse topological order, accumulating into leaf grads.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("expected scalar, got shape {:?}", self.0.shape),
            });
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = topo_order(self);
        self.accum_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.0.backward {
                if node.0.grad.borrow().is_some() {
                    back(&node.0);
                }
            }
        }
        Ok(())
    }
}

impl TensorInner {
    fn grad_ref(&self) -> std::cell::Ref<'_, Option<Vec<f64>>> {
        self.grad.borrow()
    }

    /// Gradient of this node during backward; present by construction when
    /// the node is reachable from the loss.
    fn out_grad(&self) -> Vec<f64> {
        self.grad_ref().as_ref().expect("backward before grad seeded").clone()
    }
}

/// Postorder over the grad-requiring subgraph: parents precede children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    if !root.0.requires_grad {
        return order;
    }
    visited.insert(root.0.id);
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    while let Some((node, start)) = stack.pop() {
        let mut descended = false;
        let mut i = start;
        while i < node.0.parents.len() {
            let p = &node.0.parents[i];
            if p.0.requires_grad && !visited.contains(&p.0.id) {
                visited.insert(p.0.id);
                let child = p.clone();
                stack.push((node.clone(), i + 1));
                stack.push((child, 0));
                descended = true;
                break;
            }
            i += 1;
        }
        if !descended {
            order.push(node);
        }
    }
    order
}
