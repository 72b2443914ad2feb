//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op in creation order, so parents always precede
//! children. [`Tape::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products into per-node gradient buffers.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded op.
///
/// `needs[i]` tells whether parent `i` wants a gradient; entries returned for
/// parents that do not need one are ignored, so rules may return `None`.
pub trait Backward<T: Real> {
    fn backward(
        &self,
        parents: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    kind: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    rule: Option<Box<dyn Backward<T>>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node("leaf", value, Vec::new(), true, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node("constant", value, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].kind
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record an op result. The rule is dropped when no parent needs a
    /// gradient, which makes inference on constant inputs cheap.
    pub fn push(
        &mut self,
        kind: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        rule: Box<dyn Backward<T>>,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let rule = if requires_grad { Some(rule) } else { None };
        self.push_node(
            kind,
            value,
            parents.iter().map(|p| p.0).collect(),
            requires_grad,
            rule,
        )
    }

    /// Whether an op about to be recorded with these parents will be
    /// differentiated; ops use this to skip saving backward state.
    pub fn any_requires_grad(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    fn push_node(
        &mut self,
        kind: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        requires_grad: bool,
        rule: Option<Box<dyn Backward<T>>>,
    ) -> Var {
        self.nodes.push(Node {
            kind,
            value,
            parents,
            requires_grad,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let live: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        self.backward_masked(root, &live)
    }

    /// Like [`Tape::backward`], but only propagates along paths that end in
    /// one of `wrt`. Other nodes report a zero gradient, and branches that
    /// cannot reach `wrt` are never visited.
    pub fn backward_wrt(&self, root: Var, wrt: &[Var]) -> Result<Gradients<T>> {
        let mut live = vec![false; self.nodes.len()];
        for v in wrt {
            live[v.0] = self.nodes[v.0].requires_grad;
        }
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if !live[i] && node.requires_grad {
                live[i] = node.parents.iter().any(|&p| p < i && live[p]);
            }
        }
        self.backward_masked(root, &live)
    }

    fn backward_masked(&self, root: Var, live: &[bool]) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            for &p in &node.parents {
                if p >= i {
                    return Err(Error::Cycle { node: i, parent: p });
                }
            }
            let Some(rule) = &node.rule else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let parents: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| live[p]).collect();
            if !needs.iter().any(|&n| n) {
                grads[i] = Some(grad);
                continue;
            }
            let contributions = rule.backward(&parents, &node.value, &grad, &needs);
            debug_assert_eq!(contributions.len(), node.parents.len(), "{}", node.kind);
            for ((&p, contribution), need) in
                node.parents.iter().zip(contributions).zip(needs)
            {
                let (Some(c), true) = (contribution, need) else { continue };
                debug_assert_eq!(c.len(), self.nodes[p].value.numel(), "{}", node.kind);
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[i] = Some(grad);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

/// Result of [`Tape::backward`]. Nodes unreachable from the root report a
/// zero gradient.
pub struct Gradients<T: Real> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_raw(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_raw(shape, g),
            None => Tensor::zeros(shape),
        }
    }
}
