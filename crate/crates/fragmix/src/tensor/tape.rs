//! The gradient tape: an ordered record of executed primitives.
//!
//! Ops append to the tape in execution order, which is a topological order
//! of the computation DAG; [`Tape::backward`] walks the records in reverse,
//! so every output gradient is complete before its producing op is visited.

use std::cell::{Cell, RefCell};

use super::Tensor;
use crate::error::{Error, Result};

/// Forward-pass context. `Train` enables dropout and sampling noise, keyed
/// by `(seed, step)` so runs are reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

type BackwardFn = Box<dyn Fn(&[Option<Vec<f64>>]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Record {
    pub inputs: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
    pub backward: BackwardFn,
}

/// Single-owner Wengert list. Not shareable across threads; a training step
/// owns exactly one tape.
pub struct Tape {
    records: RefCell<Vec<Record>>,
    mode: Mode,
    grad_enabled: bool,
    op_counter: Cell<u64>,
}

impl Tape {
    /// Tape for a training step: records gradients, dropout active.
    pub fn training(seed: u64, step: u64) -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            mode: Mode::Train { seed, step },
            grad_enabled: true,
            op_counter: Cell::new(0),
        }
    }

    /// Evaluation tape: no recording, dropout is the identity. Two forward
    /// passes on identical input are bit-identical.
    pub fn eval() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            mode: Mode::Eval,
            grad_enabled: false,
            op_counter: Cell::new(0),
        }
    }

    /// Recording tape without dropout noise; used by gradient checks.
    pub fn recording() -> Tape {
        Tape {
            records: RefCell::new(Vec::new()),
            mode: Mode::Eval,
            grad_enabled: true,
            op_counter: Cell::new(0),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn num_records(&self) -> usize {
        self.records.borrow().len()
    }

    /// Monotone per-tape op id; part of the dropout/noise stream key.
    pub(crate) fn next_op_id(&self) -> u64 {
        let id = self.op_counter.get();
        self.op_counter.set(id + 1);
        id
    }

    pub(crate) fn rng_key(&self) -> (u64, u64) {
        match self.mode {
            Mode::Train { seed, step } => (seed, step),
            Mode::Eval => (0, 0),
        }
    }

    pub(crate) fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn push(&self, inputs: Vec<Tensor>, outputs: Vec<Tensor>, backward: BackwardFn) {
        self.records.borrow_mut().push(Record { inputs, outputs, backward });
    }

    /// Reverse sweep from a scalar loss. Accumulates into the grad buffer of
    /// every tensor on the path that requires gradients, leaves included.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Numerical(
                "loss does not depend on any parameter (requires_grad is false)".into(),
            ));
        }
        loss.accumulate_grad(&[1.0]);
        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let out_grads: Vec<Option<Vec<f64>>> = rec.outputs.iter().map(|o| o.grad()).collect();
            if out_grads.iter().all(Option::is_none) {
                continue;
            }
            let in_grads = (rec.backward)(&out_grads);
            debug_assert_eq!(in_grads.len(), rec.inputs.len());
            for (t, g) in rec.inputs.iter().zip(in_grads) {
                if let Some(g) = g {
                    if t.requires_grad() {
                        t.accumulate_grad(&g);
                    }
                }
            }
        }
        Ok(())
    }
}
