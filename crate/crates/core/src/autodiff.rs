//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to tracked [`Var`]s. Values are
//! reference counted and owned by the `Var`s and by the backward closures that
//! need them, so an inference tape (`Tape::inference`) records nothing and
//! intermediate activations are freed as soon as they go out of scope.
//!
//! A tape is confined to the thread that created it.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward rule: given the output gradient and which inputs need a gradient,
/// returns one entry per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Vec<usize>,
    name: Option<String>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    names: RefCell<HashMap<String, usize>>,
    recording: bool,
    consumed: Cell<bool>,
    flops: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            names: RefCell::new(HashMap::new()),
            recording: true,
            consumed: Cell::new(false),
            flops: Cell::new(0),
        }
    }

    /// A tape that records nothing; every `Var` behaves as a constant.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floating point operations executed by ops on this tape (forward only).
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub(crate) fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    fn check_live(&self) {
        assert!(
            !self.consumed.get(),
            "tape already consumed by backward; create a new tape"
        );
    }

    fn push_leaf(&self, shape: &[usize], name: Option<String>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
            shape: shape.to_vec(),
            name,
        });
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.check_live();
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    /// An unnamed differentiable leaf.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.check_live();
        let node = self.recording.then(|| self.push_leaf(value.shape(), None));
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// A named differentiable leaf; its gradient is reported under `name`.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.check_live();
        if !self.recording {
            return Ok(self.constant(value));
        }
        let mut names = self.names.borrow_mut();
        if names.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.push_leaf(value.shape(), Some(name.to_string()));
        names.insert(name.to_string(), id);
        Ok(Var {
            tape: self,
            value: Rc::new(value),
            node: Some(id),
        })
    }

    /// Records `out = op(inputs)` with its backward rule. The rule is dropped
    /// unread when no input is tracked.
    pub(crate) fn record<'t>(
        &'t self,
        out: Tensor<T>,
        inputs: &[&Var<'t, T>],
        flops: u64,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        self.check_live();
        self.add_flops(flops);
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = tracked.then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: inputs.iter().map(|v| v.node).collect(),
                backward: Some(Box::new(backward)),
                shape: out.shape().to_vec(),
                name: None,
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            value: Rc::new(out),
            node,
        }
    }

    /// Runs reverse accumulation from `loss` and consumes the tape.
    ///
    /// Every differentiable leaf receives a gradient; leaves that do not
    /// influence the loss receive zeros.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if self.consumed.get() || nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if loss.value.numel() != 1 {
            self.consumed.set(true);
            return Err(Error::NotScalar {
                shape: loss.value.shape().to_vec(),
            });
        }
        self.consumed.set(true);
        self.names.borrow_mut().clear();

        let n = nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if let Some(id) = loss.node {
            grads[id] = Some(Tensor::ones(&nodes[id].shape));
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let Some(rule) = &node.backward else {
                leaf_grads[i] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = rule(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(pid), Some(ig)) = (input, ig) else {
                    continue;
                };
                debug_assert_eq!(ig.shape(), nodes[*pid].shape.as_slice());
                match &mut grads[*pid] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        let mut by_node = HashMap::new();
        let mut named = IndexMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.backward.is_some() {
                continue;
            }
            let g = leaf_grads[i].take().unwrap_or_else(|| Tensor::zeros(&node.shape));
            if let Some(name) = &node.name {
                named.insert(name.clone(), g.clone());
            }
            by_node.insert(i, g);
        }
        Ok(Gradients { named, by_node })
    }
}

/// A value on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The value as a constant on the same tape.
    pub fn detach(&self) -> Var<'t, T> {
        Var {
            tape: self.tape,
            value: self.value.clone(),
            node: None,
        }
    }

    pub fn item(&self) -> Option<T> {
        self.value.item()
    }

    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward(self)
    }
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("node", &self.node)
            .finish()
    }
}

/// Gradients of every differentiable leaf of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    named: IndexMap<String, Tensor<T>>,
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    /// Gradient with respect to a leaf created by `variable` or `param`.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.by_node.get(&id))
    }

    pub fn named(&self) -> &IndexMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.named
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum_all();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::ones(&[2, 2])).unwrap();
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(&c).unwrap();
        assert_eq!(g.get("w").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(g.wrt(&w).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn unused_leaf_gets_zeros() {
        let tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor::ones(&[2])).unwrap();
        let _b = tape.param("b", Tensor::ones(&[3])).unwrap();
        let loss = a.sum_all();
        let g = loss.backward().unwrap();
        assert_eq!(g.get("a").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get("b").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::ones(&[2]));
        assert!(matches!(
            x.backward(),
            Err(Error::NotScalar { shape }) if shape == vec![2]
        ));
    }

    #[test]
    fn empty_tape_is_rejected() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(&c), Err(Error::EmptyTape)));

        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::scalar(1.0));
        let y = x.scale(2.0);
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(Error::EmptyTape)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let tape = Tape::<f64>::new();
        tape.param("w", Tensor::ones(&[1])).unwrap();
        assert!(matches!(
            tape.param("w", Tensor::ones(&[1])),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) -> grad 2x + 1
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap());
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = y.sum_all().backward().unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f64>::inference();
        let x = tape.variable(Tensor::ones(&[4]));
        let _ = x.mul(&x).unwrap().sum_all();
        assert!(tape.is_empty());
        assert!(!x.requires_grad());
    }
}
