use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::{Result, Scalar, Tensor, TensorError};

struct VarInner<T> {
    id: usize,
    value: Tensor<T>,
    tracked: bool,
}

/// Handle to a value produced on a [`Tape`]. Cloning is cheap.
pub struct Var<T>(Rc<VarInner<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("tracked", &self.0.tracked)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.0.value.data()
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Whether gradients flow back through this value.
    pub fn is_tracked(&self) -> bool {
        self.0.tracked
    }
}

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward<T: Scalar> {
    /// Returns one entry per input; `None` where `needs[i]` is false.
    fn backward(&self, inputs: &[Var<T>], grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

struct Record<T> {
    output: usize,
    inputs: Vec<Var<T>>,
    op: Box<dyn Backward<T>>,
}

/// Records differentiable operations so [`Tape::backward`] can replay them in
/// reverse. An inference tape records nothing and lets intermediates drop as
/// soon as their handles do.
pub struct Tape<T> {
    records: RefCell<Vec<Record<T>>>,
    next_id: Cell<usize>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { records: RefCell::new(Vec::new()), next_id: Cell::new(0), grad_enabled: true }
    }

    /// A tape that never records; every value it produces is untracked.
    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn alloc(&self, value: Tensor<T>, tracked: bool) -> Var<T> {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        Var(Rc::new(VarInner { id, value, tracked }))
    }

    /// Leaf that receives a gradient (a parameter or a checked input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let tracked = self.grad_enabled;
        self.alloc(value, tracked)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.alloc(value, false)
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        inputs: Vec<Var<T>>,
        op: impl Backward<T> + 'static,
    ) -> Var<T> {
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.is_tracked());
        let out = self.alloc(value, tracked);
        if tracked {
            self.records.borrow_mut().push(Record { output: out.id(), inputs, op: Box::new(op) });
        }
        out
    }

    /// Reverse sweep from a scalar `loss`, seeding its gradient with one.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().numel() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.next_id.get()];
        grads[loss.id()] = Some(vec![T::one()]);
        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let Some(g) = grads[rec.output].take() else { continue };
            let needs: Vec<bool> = rec.inputs.iter().map(|v| v.is_tracked()).collect();
            let input_grads = rec.op.backward(&rec.inputs, &g, &needs);
            // The output gradient is kept so callers may inspect intermediates.
            grads[rec.output] = Some(g);
            for (input, ig) in rec.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.len(), input.value().numel());
                match &mut grads[input.id()] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], keyed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&[T]> {
        self.grads.get(var.id()).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled when nothing flowed into it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Vec<T> {
        self.get(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); var.value().numel()])
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id()).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        // y = x*x + x  → dy/dx = 2x + 1
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let y = tape.add(&sq, &x).unwrap();
        let loss = tape.sum(&y);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        let y = tape.relu(&x);
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[3], 1.0));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn reverse_order_is_respected_through_chain() {
        // z = relu(2x) * 3 summed; x = [-1, 2] → dz/dx = [0, 6]
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let a = tape.scale(&x, 2.0);
        let b = tape.relu(&a);
        let c = tape.scale(&b, 3.0);
        let loss = tape.sum(&c);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[0.0, 6.0]);
    }
}
