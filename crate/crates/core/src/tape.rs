//! Reverse-mode differentiation tape and execution contexts.
//!
//! A [`Tape`] records every operation in insertion order and replays the
//! vector-Jacobian products in exact reverse insertion order, which makes
//! gradient accumulation deterministic: two identical runs produce
//! bit-identical gradients.
//!
//! [`Ctx`] abstracts over recording and immediate execution so model code is
//! written once. [`Imm`] evaluates eagerly and retains nothing, which is what
//! inference and finite-difference probing use.

use crate::error::{Result, SacError};
use crate::ops::Op;
use crate::tensor::{Scalar, Tensor};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value living on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<usize>,
    out: usize,
}

/// Ordered record of differentiable operations.
pub struct Tape<F: Scalar> {
    id: u64,
    values: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
    /// Whether a value participates in gradient flow.
    needs: Vec<bool>,
    is_leaf: Vec<bool>,
    grads: Vec<Option<Vec<F>>>,
    backward_ran: bool,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            nodes: Vec::new(),
            needs: Vec::new(),
            is_leaf: Vec::new(),
            grads: Vec::new(),
            backward_ran: false,
            check_finite: false,
        }
    }

    /// Enables the debug-mode NaN/Inf assertion after every recorded op.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    fn push_value(&mut self, t: Tensor<F>, needs: bool, leaf: bool) -> Var {
        self.values.push(t);
        self.needs.push(needs);
        self.is_leaf.push(leaf);
        self.grads.push(None);
        Var {
            tape: self.id,
            idx: self.values.len() - 1,
        }
    }

    fn check_var(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.values.len() {
            return Err(SacError::NotOnTape {
                expected: self.id,
                got: v.tape,
            });
        }
        Ok(v.idx)
    }

    /// Registers a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad;
        self.push_value(t, rg, true)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_value(t, false, true)
    }

    /// Records one operation: validates inputs, evaluates, appends the node.
    pub fn record(&mut self, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        let mut idxs = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idxs.push(self.check_var(v)?);
        }
        let refs: Vec<&Tensor<F>> = idxs.iter().map(|&i| &self.values[i]).collect();
        let out = op.eval(&refs)?;
        if self.check_finite && !out.all_finite() {
            return Err(SacError::NonFinite { op: op.name() });
        }
        let needs = idxs.iter().any(|&i| self.needs[i]);
        let out_var = self.push_value(out, needs, false);
        self.nodes.push(Node {
            op,
            inputs: idxs,
            out: out_var.idx,
        });
        Ok(out_var)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<F>> {
        let i = self.check_var(v)?;
        Ok(&self.values[i])
    }

    /// Reverse sweep. Populates gradients for every `requires_grad` leaf;
    /// leaves the loss never touched get exact zeros. A second call without
    /// `clear` is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_idx = self.check_var(loss)?;
        if self.backward_ran {
            return Err(SacError::BackwardAlreadyRan);
        }
        let lt = &self.values[loss_idx];
        if !lt.is_scalar() {
            return Err(SacError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        self.backward_ran = true;
        self.grads[loss_idx] = Some(vec![F::one()]);

        for n in (0..self.nodes.len()).rev() {
            let out_idx = self.nodes[n].out;
            let gout = match &self.grads[out_idx] {
                Some(g) => Tensor::new(self.values[out_idx].shape().to_vec(), g.clone())?,
                None => continue,
            };
            let (op, input_idxs) = {
                let node = &self.nodes[n];
                (node.op.clone(), node.inputs.clone())
            };
            let needs: Vec<bool> = input_idxs.iter().map(|&i| self.needs[i]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor<F>> = input_idxs.iter().map(|&i| &self.values[i]).collect();
            let in_grads = op.vjp(&inputs, &self.values[out_idx], &gout, &needs)?;
            for (slot, grad) in input_idxs.iter().zip(in_grads) {
                if let Some(g) = grad {
                    match &mut self.grads[*slot] {
                        Some(acc) => {
                            for (a, &v) in acc.iter_mut().zip(g.data()) {
                                *a = *a + v;
                            }
                        }
                        empty => *empty = Some(g.data().to_vec()),
                    }
                }
            }
        }

        // Zero-fill untouched requires_grad leaves.
        for i in 0..self.values.len() {
            if self.is_leaf[i] && self.needs[i] && self.grads[i].is_none() {
                self.grads[i] = Some(vec![F::zero(); self.values[i].numel()]);
            }
        }
        Ok(())
    }

    /// Gradient buffer of a value after `backward`.
    pub fn grad(&self, v: Var) -> Result<Option<&[F]>> {
        let i = self.check_var(v)?;
        Ok(self.grads[i].as_deref())
    }

    /// Gradient as a tensor shaped like the value.
    pub fn grad_tensor(&self, v: Var) -> Result<Option<Tensor<F>>> {
        let i = self.check_var(v)?;
        Ok(match &self.grads[i] {
            Some(g) => Some(Tensor::new(self.values[i].shape().to_vec(), g.clone())?),
            None => None,
        })
    }

    /// Drops all recorded state so the tape can be reused.
    pub fn clear(&mut self) {
        self.values.clear();
        self.nodes.clear();
        self.needs.clear();
        self.is_leaf.clear();
        self.grads.clear();
        self.backward_ran = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Execution context: either a recording tape or eager evaluation.
pub trait Ctx<F: Scalar> {
    type V: Clone;

    /// A non-differentiable value.
    fn constant(&mut self, t: Tensor<F>) -> Self::V;
    /// A leaf whose `requires_grad` flag is honored.
    fn leaf(&mut self, t: Tensor<F>) -> Self::V;
    fn apply(&mut self, op: Op<F>, inputs: &[Self::V]) -> Result<Self::V>;
    fn shape_of(&self, v: &Self::V) -> Vec<usize>;
    /// Materializes the value (clones it out of the context).
    fn tensor_of(&self, v: &Self::V) -> Tensor<F>;
    fn is_recording(&self) -> bool;
}

impl<F: Scalar> Ctx<F> for Tape<F> {
    type V = Var;

    fn constant(&mut self, t: Tensor<F>) -> Var {
        Tape::constant(self, t)
    }

    fn leaf(&mut self, t: Tensor<F>) -> Var {
        Tape::leaf(self, t)
    }

    fn apply(&mut self, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        self.record(op, inputs)
    }

    fn shape_of(&self, v: &Var) -> Vec<usize> {
        self.values[v.idx].shape().to_vec()
    }

    fn tensor_of(&self, v: &Var) -> Tensor<F> {
        self.values[v.idx].clone()
    }

    fn is_recording(&self) -> bool {
        true
    }
}

/// Immediate (eager, non-recording) execution. Intermediates are freed as
/// soon as the last handle drops, so full-scale forward passes stay lean.
#[derive(Default)]
pub struct Imm;

impl Imm {
    pub fn new() -> Self {
        Imm
    }
}

impl<F: Scalar> Ctx<F> for Imm {
    type V = Rc<Tensor<F>>;

    fn constant(&mut self, t: Tensor<F>) -> Rc<Tensor<F>> {
        Rc::new(t)
    }

    fn leaf(&mut self, t: Tensor<F>) -> Rc<Tensor<F>> {
        Rc::new(t)
    }

    fn apply(&mut self, op: Op<F>, inputs: &[Rc<Tensor<F>>]) -> Result<Rc<Tensor<F>>> {
        let refs: Vec<&Tensor<F>> = inputs.iter().map(|r| r.as_ref()).collect();
        Ok(Rc::new(op.eval(&refs)?))
    }

    fn shape_of(&self, v: &Rc<Tensor<F>>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn tensor_of(&self, v: &Rc<Tensor<F>>) -> Tensor<F> {
        v.as_ref().clone()
    }

    fn is_recording(&self) -> bool {
        false
    }
}
