//! Minimal dense tensor type with tape-based reverse-mode differentiation.
//!
//! Exactly the operations the model and losses need, nothing more. Data is
//! `f32` throughout (including reduction accumulators) and layout is NCHW
//! for image-like tensors. A [`Graph`] records executed operations in
//! execution order; [`Graph::backward`] replays them once, in reverse.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod adam;
pub mod loss;
pub mod ops;

pub use adam::AdamState;

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
    leaf: bool,
}

/// Shared handle to an n-dimensional `f32` buffer. Cloning is cheap and
/// aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, leaf={})",
            self.inner.shape,
            self.inner.requires_grad.get(),
            self.inner.leaf
        )
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, leaf: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                leaf,
            }),
        })
    }

    /// Leaf tensor that does not take gradients (inputs, targets, masks).
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), data, false, true)
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), data, true, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel], false, true).expect("valid shape")
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v], false, true).expect("valid shape")
    }

    /// Operation output: non-leaf, produced while a graph is recording.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor::new(shape, data, requires_grad, false).expect("op produced a valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.inner.data.borrow_mut()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Ref<'_, Option<Vec<f32>>> {
        self.inner.grad.borrow()
    }

    /// Copies the gradient out, or None if no gradient reached this tensor.
    pub fn grad_vec(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f32]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Two handles aliasing the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.inner.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a rank-4 NCHW tensor, got shape {:?}",
                self.inner.shape
            ))),
        }
    }
}

struct Node {
    output: Tensor,
    backward: Box<dyn Fn()>,
}

/// Ordered record of executed differentiable operations.
///
/// Nodes are appended in execution order, which is a topological order by
/// construction; `backward` walks them once in reverse. Graph construction
/// and backward are single-threaded.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Graph {
    /// A recording graph for training.
    pub fn new() -> Graph {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A non-recording graph: operations compute values but the tape stays
    /// empty and outputs never require gradients. Used for inference.
    pub fn no_grad() -> Graph {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn record(&self, output: &Tensor, backward: impl Fn() + 'static) {
        debug_assert!(self.recording);
        self.nodes.borrow_mut().push(Node {
            output: output.clone(),
            backward: Box::new(backward),
        });
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Gradients of interior (non-leaf) tensors are reset at the start of
    /// every call; leaf gradients accumulate across calls until explicitly
    /// zeroed. Each recorded operation is visited exactly once, in reverse
    /// topological order.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            node.output.zero_grad();
        }
        loss.accumulate_grad(&[1.0]);
        for node in nodes.iter().rev() {
            (node.backward)();
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let g = Graph::new();
        let x = Tensor::param(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let loss = ops::sum(&g, &x);
        g.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        // loss = sum(x*x) at x=3 -> grad 6
        let g = Graph::new();
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let sq = ops::mul(&g, &x, &x).unwrap();
        let loss = ops::sum(&g, &sq);
        g.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = ops::scale(&g, &x, 2.0);
        let err = g.backward(&y).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let g = Graph::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = ops::sum(&g, &x);
        g.backward(&loss).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0; 3]);
        x.zero_grad();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn fanout_accumulates_through_both_consumers() {
        // y = sum(x + x) -> dy/dx = 2
        let g = Graph::new();
        let x = Tensor::param(&[2], vec![1.0, 4.0]).unwrap();
        let s = ops::add(&g, &x, &x).unwrap();
        let loss = ops::sum(&g, &s);
        g.backward(&loss).unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let g = Graph::no_grad();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = ops::scale(&g, &x, 3.0);
        assert!(g.is_empty());
        assert!(!y.requires_grad());
    }

    #[test]
    fn chain_rule_linearity() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 1.8).collect();
        let make = || Tensor::param(&[3, 4], data.clone()).unwrap();

        let (a, b) = (0.7f32, 1.9f32);

        let g1 = Graph::new();
        let x1 = make();
        let sq1 = ops::mul(&g1, &x1, &x1).unwrap();
        let l1 = ops::sum(&g1, &sq1);
        g1.backward(&l1).unwrap();
        let grad_l1 = x1.grad_vec().unwrap();

        let g2 = Graph::new();
        let x2 = make();
        let l2 = ops::sum(&g2, &x2);
        g2.backward(&l2).unwrap();
        let grad_l2 = x2.grad_vec().unwrap();

        let g = Graph::new();
        let x = make();
        let sq = ops::mul(&g, &x, &x).unwrap();
        let lhs = ops::scale(&g, &ops::sum(&g, &sq), a);
        let rhs = ops::scale(&g, &ops::sum(&g, &x), b);
        let combined = ops::add(&g, &lhs, &rhs).unwrap();
        g.backward(&combined).unwrap();
        let grad_combined = x.grad_vec().unwrap();

        for i in 0..grad_combined.len() {
            let expect = a * grad_l1[i] + b * grad_l2[i];
            assert!(
                (grad_combined[i] - expect).abs() <= 1e-5,
                "coordinate {i}: {} vs {}",
                grad_combined[i],
                expect
            );
        }
    }
}
