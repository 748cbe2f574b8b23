use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn FnOnce()>;

/// Reverse-mode tape. Ops append one node each in forward order; the
/// backward pass walks the nodes in reverse, visiting each exactly once.
/// A tape is confined to a single worker (it is deliberately `!Sync`).
pub struct GradTape {
    nodes: RefCell<Vec<BackwardFn>>,
    active: bool,
}

impl GradTape {
    /// Recording tape for training / gradient checks.
    pub fn new() -> GradTape {
        GradTape {
            nodes: RefCell::new(Vec::new()),
            active: true,
        }
    }

    /// Non-recording tape for inference; ops run forward only.
    pub fn disabled() -> GradTape {
        GradTape {
            nodes: RefCell::new(Vec::new()),
            active: false,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Whether an op on these inputs should be recorded.
    pub(crate) fn tracks(&self, inputs: &[&Tensor]) -> bool {
        self.active && inputs.iter().any(|t| t.is_tracked())
    }

    pub(crate) fn record(&self, f: impl FnOnce() + 'static) {
        self.nodes.borrow_mut().push(Box::new(f));
    }

    /// Runs the backward pass from a scalar `loss`, accumulating gradients
    /// into every tracked tensor. Consumes the tape.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.is_tracked() {
            return Err(Error::contract(
                "backward: loss was not produced on this tape",
            ));
        }
        loss.set_grad(vec![1.0]);
        let nodes = self.nodes.into_inner();
        for node in nodes.into_iter().rev() {
            node();
        }
        Ok(())
    }
}

impl Default for GradTape {
    fn default() -> Self {
        GradTape::new()
    }
}
