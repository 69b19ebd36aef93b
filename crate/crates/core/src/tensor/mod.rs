//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation eagerly computes its output and, when any input requires a
//! gradient, records the producing [`Op`] together with its parents. Calling
//! [`Tensor::backward`] on a scalar walks that graph once in reverse
//! topological order and accumulates `dLoss/dLeaf` into every leaf created
//! with [`Tensor::param`].
//!
//! The graph lives exactly as long as the tensors referencing it. Parameters
//! are re-bound as fresh leaves on every forward pass (see
//! [`crate::params::ParamStore::bind`]), so no graph is ever reused.

mod finite_diff;
mod gemm;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use finite_diff::{finite_diff_grad, max_relative_error, RELATIVE_ERROR_FLOOR};
use ops::Op;

/// A dense row-major tensor of 64-bit floats, optionally attached to a
/// gradient graph. Cloning is cheap and shares the underlying node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Option<Op>,
    grad: Mutex<Option<Vec<f64>>>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::shape("new", format!("zero-sized dimension in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(
            "new",
            format!("shape {shape:?} holds {numel} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    /// A constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::raw(data, shape.to_vec(), false, None))
    }

    /// A differentiable leaf. Gradients accumulate into it on `backward`.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::raw(data, shape.to_vec(), true, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![value], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(data, &[n])
    }

    /// Builds a `rows × cols` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(rows.concat(), &[rows.len(), cols])
    }

    fn raw(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        Tensor(Arc::new(Node {
            shape,
            data,
            requires_grad,
            op,
            grad: Mutex::new(None),
        }))
    }

    /// Wraps an op result; the op is kept only if some parent is differentiable.
    fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let op = requires_grad.then_some(op);
        Self::raw(data, shape, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    fn id(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    /// Nodes reachable from `self` that require grad, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        // (node, parents already pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for parent in op.parents().into_iter().rev() {
                    if parent.requires_grad() && !visited.contains(&parent.id()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Back-propagates from this scalar, accumulating into every reachable
    /// differentiable leaf. Contributions along multiple paths add up.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::DetachedGraph);
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::with_capacity(order.len());
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    op.backward(node, &g, &mut |parent: &Tensor, contrib: Vec<f64>| {
                        if !parent.requires_grad() {
                            return;
                        }
                        debug_assert_eq!(contrib.len(), parent.len());
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), contrib);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).is_ok());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::param(vec![0.3, -1.0, 2.0], &[3]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_dot_self_is_twice_x() {
        let x = Tensor::param(vec![2.0, -1.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, -2.0]);
    }

    #[test]
    fn paths_accumulate() {
        // loss = sum(x) + sum(2x) + sum(x*x) reaches x along three paths
        let x = Tensor::param(vec![1.0, 3.0], &[2]).unwrap();
        let a = x.sum();
        let b = x.scale(2.0).sum();
        let c = x.mul(&x).unwrap().sum();
        let loss = a.add(&b).unwrap().add(&c).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 9.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::NonScalarLoss(_))));
        let c = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().sum();
        assert!(matches!(c.backward(), Err(Error::DetachedGraph)));
        let d = x.detach().sum();
        assert!(matches!(d.backward(), Err(Error::DetachedGraph)));
    }

    #[test]
    fn constants_record_no_graph() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.exp();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let x = Tensor::param(vec![0.1, -0.7, 1.3, 0.4, 2.2, -0.5], &[2, 3]).unwrap();
            let y = x.softmax(1).unwrap().mul(&x).unwrap().l2_normalize(0).unwrap();
            y.sum().backward().unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn diamond_graph_visits_each_node_once() {
        let x = Tensor::param(vec![0.5], &[1]).unwrap();
        let y = x.exp();
        let z = y.mul(&y).unwrap().sum();
        z.backward().unwrap();
        // d/dx e^{2x} = 2 e^{2x}
        let expect = 2.0 * (1.0f64).exp();
        assert!((x.grad().unwrap()[0] - expect).abs() < 1e-12);
    }
}
