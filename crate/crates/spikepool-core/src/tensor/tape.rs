use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One recorded operation. The closure reads the output's gradient and
/// accumulates into the inputs' gradients; it captures the tensors it needs.
pub(crate) struct Node {
    pub(crate) backward: Box<dyn Fn()>,
    pub(crate) output: Tensor,
}

/// Gradient tape for one forward pass.
///
/// Ops record nodes in execution order; [`Tape::backward`] replays them in
/// reverse and then clears the tape. BPTT unrolls all timesteps of a
/// sequence onto one tape. An inference tape records nothing.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    in_backward: Cell<bool>,
}

impl Tape {
    /// Recording tape for a training forward pass.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            in_backward: Cell::new(false),
        }
    }

    /// Non-recording tape: ops run forward-only.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            in_backward: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Whether an op over these inputs must record a backward rule.
    pub(crate) fn should_record(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.is_tracked())
    }

    /// Records a backward rule and marks `output` as produced by this tape.
    pub(crate) fn record(&self, output: &Tensor, backward: Box<dyn Fn()>) {
        let mut nodes = self.nodes.borrow_mut();
        output.set_node(nodes.len());
        nodes.push(Node {
            backward,
            output: output.clone(),
        });
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Populates gradients of every reachable leaf with `requires_grad`,
    /// then clears the tape. Intermediate gradients are freed as soon as
    /// their node has run.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        if !self.recording || self.nodes.borrow().is_empty() || loss.tape_node().is_none() {
            return Err(Error::NoTape);
        }
        assert!(!self.in_backward.get(), "re-entrant backward");
        self.in_backward.set(true);

        loss.set_grad(vec![1.0]);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        for node in nodes.iter().rev() {
            (node.backward)();
            // The output's gradient has been fully consumed; keep it only
            // for leaves the caller asked about.
            if !node.output.requires_grad() {
                node.output.zero_grad();
            }
        }
        // Drop node closures (and their tensor handles) before unlocking.
        drop(nodes);
        self.in_backward.set(false);
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
