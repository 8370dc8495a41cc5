//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation whose inputs are tracked. A [`Tensor`]
//! either carries a handle into a tape or is a plain constant; constants
//! never receive gradient. Calling [`Tensor::backward`] on a scalar sweeps the
//! tape once in reverse insertion order, which is a valid topological order
//! because a node can only refer to nodes recorded before it.
//!
//! ```
//! use sparse_routing::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&[1], vec![3.0]).unwrap();
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.wrt(&x), vec![6.0]);
//! ```
//!
//! New primitives can be added without touching this module through
//! [`Tape::record`], which takes the forward values and a backward closure.

mod ops;

#[cfg(test)]
pub(crate) use ops::sigmoid;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Maps the upstream gradient of a node's output to one gradient per input.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    len: usize,
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// An append-only record of tensor operations.
///
/// Cloning a `Tape` yields another handle to the same record.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Registers a differentiable leaf (a parameter).
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, values)?;
        Ok(self.param(&t))
    }

    /// Registers a copy of `t`'s values as a differentiable leaf on this tape.
    pub fn param(&self, t: &Tensor) -> Tensor {
        let id = self.push(Node {
            len: t.len(),
            inputs: Vec::new(),
            backward: None,
        });
        Tensor {
            shape: t.shape.clone(),
            values: t.values.clone(),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        }
    }

    /// Records a user-defined operation.
    ///
    /// `backward` receives the gradient of the output and must return one
    /// gradient vector per entry of `inputs`, each matching that input's
    /// length. When no input is tracked the result is an untracked constant.
    pub fn record(
        inputs: &[&Tensor],
        shape: Vec<usize>,
        values: Vec<f64>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(existing) if !existing.same(&n.tape) => return Err(Error::TapeMismatch),
                    Some(_) => {}
                }
            }
        }
        let values = Rc::new(values);
        let Some(tape) = tape else {
            return Ok(Tensor {
                shape,
                values,
                node: None,
            });
        };
        let id = tape.push(Node {
            len: values.len(),
            inputs: inputs.iter().map(|t| t.node.as_ref().map(|n| n.id)).collect(),
            backward: Some(backward),
        });
        Ok(Tensor {
            shape,
            values,
            node: Some(NodeRef {
                tape: tape.clone(),
                id,
            }),
        })
    }

    fn backward_from(&self, root: usize) -> Gradients {
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[root] = Some(vec![1.0; inner.nodes[root].len]);
        for id in (0..=root).rev() {
            let node = &inner.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(id);
            let Some(upstream) = upper[0].as_ref() else {
                continue;
            };
            let input_grads = backward(upstream);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(input) = *input else { continue };
                match &mut lower[input] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients {
            tape: self.clone(),
            grads,
        }
    }
}

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: usize,
}

/// Dense row-major `f64` array with an optional tape handle.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl Tensor {
    /// Builds an untracked tensor. Every extent must be positive.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != values.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Rc::new(values),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: Rc::new(vec![v]),
            node: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values: Rc::new(values),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: Rc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the values of an untracked tensor (copy-on-write).
    pub fn values_mut(&mut self) -> &mut [f64] {
        Rc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Same values, no tape handle.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            node: None,
        }
    }

    /// Differentiates this scalar with respect to every node on its tape.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.is_scalar() {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        let node = self.node.as_ref().ok_or(Error::NotOnTape)?;
        Ok(node.tape.backward_from(node.id))
    }
}

/// Result of one backward sweep.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` when `t` is
    /// untracked, on another tape, or unreachable from the loss.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node.as_ref()?;
        if !node.tape.same(&self.tape) {
            return None;
        }
        self.grads.get(node.id)?.as_deref()
    }

    /// Like [`Gradients::get`] but returns zeros instead of `None`.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detach_preserves_values_and_drops_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let d = x.detach();
        assert_eq!(d.values(), x.values());
        assert!(!d.is_tracked());
        assert_eq!(d.detach().values(), x.values());

        let loss = x.scale(0.0).add(&d).unwrap().sum();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&x), vec![0.0; 3]);
    }

    #[test]
    fn straight_through_construction() {
        // y = x + detach(2x - x): forward 2x, backward identity
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.5, -3.0]).unwrap();
        let shift = x.scale(2.0).sub(&x).unwrap().detach();
        let y = x.add(&shift).unwrap();
        assert_eq!(y.values(), &[3.0, -6.0]);
        let g = y.sum().backward().unwrap();
        assert_eq!(g.wrt(&x), vec![1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![3.0]).unwrap();
        let g = x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(g.wrt(&x), vec![6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(_))));
        assert!(matches!(
            Tensor::scalar(1.0).backward(),
            Err(Error::NotOnTape)
        ));
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let unused = tape.leaf(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = x.sum().backward().unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.wrt(&unused), vec![0.0; 3]);
    }

    #[test]
    fn shared_input_accumulates() {
        // x feeds two consumers; compare with two independent copies
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![0.3, -0.7]).unwrap();
        let a = x.exp().unwrap().sum();
        let b = x.mul(&x).unwrap().sum();
        let g = a.add(&b).unwrap().backward().unwrap().wrt(&x);

        let tape2 = Tape::new();
        let x1 = tape2.leaf(&[2], vec![0.3, -0.7]).unwrap();
        let x2 = tape2.leaf(&[2], vec![0.3, -0.7]).unwrap();
        let a2 = x1.exp().unwrap().sum();
        let b2 = x2.mul(&x2).unwrap().sum();
        let g2 = a2.add(&b2).unwrap().backward().unwrap();
        let sum: Vec<f64> = g2
            .wrt(&x1)
            .iter()
            .zip(g2.wrt(&x2))
            .map(|(p, q)| p + q)
            .collect();
        for (u, v) in g.iter().zip(&sum) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(&[1], vec![1.0]).unwrap();
        let b = t2.leaf(&[1], vec![1.0]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new(&[0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }
}
