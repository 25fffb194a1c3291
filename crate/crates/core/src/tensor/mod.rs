//! A small reverse-mode automatic differentiation engine over dense
//! rank-4 arrays laid out as `(batch, channels, height, width)`.
//!
//! Every operation records its parents and a backward closure on the
//! result; [`Tensor::backward`] walks the recorded graph in reverse
//! topological order. A graph is single-threaded (`Rc` based); build a
//! fresh graph per forward pass and keep parameters as leaf tensors that
//! outlive it.

mod conv;
mod gemm;
pub mod gradcheck;
pub(crate) mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

pub use conv::{conv2d, transposed_conv2d, ConvSpec};
pub use gemm::Precision;
pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};
pub use ops::{
    abs, add, concat_channels, leaky_relu, mean, mul, scale, slice_batch, slice_channels, sub,
    sum,
};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Backward rule of one recorded operation.
///
/// Receives the node being differentiated (for access to its forward output),
/// the gradient flowing into it and its parents; returns one gradient per
/// parent, `None` for parents that do not require a gradient.
pub(crate) trait GradFn {
    fn name(&self) -> &'static str;
    fn backward(&self, out: &Tensor, grad: &[f64], parents: &[Tensor]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    id: usize,
    shape: Shape,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: RefCell<bool>,
    grad_fn: Option<Box<dyn GradFn>>,
    parents: Vec<Tensor>,
}

/// Reference-counted handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name()))
            .finish()
    }
}

impl Tensor {
    fn make(
        shape: Shape,
        data: Vec<f64>,
        requires_grad: bool,
        grad_fn: Option<Box<dyn GradFn>>,
        parents: Vec<Tensor>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: RefCell::new(requires_grad),
            grad_fn,
            parents,
        }))
    }

    /// Constant leaf tensor.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != numel(&shape) {
            return Err(Error::dim(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::make(shape, data, false, None, Vec::new()))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::make(shape, vec![0.0; numel(&shape)], false, None, Vec::new())
    }

    pub fn full(shape: Shape, value: f64) -> Tensor {
        Tensor::make(shape, vec![value; numel(&shape)], false, None, Vec::new())
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make([1, 1, 1, 1], vec![value], false, None, Vec::new())
    }

    /// Builds a leaf from a function of the `(n, c, y, x)` index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Tensor {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(numel(&shape));
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor::make(shape, data, false, None, Vec::new())
    }

    /// Result of a differentiable operation. The backward rule and parents
    /// are only retained when some parent requires a gradient.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: impl GradFn + 'static,
    ) -> Tensor {
        if parents.iter().any(Tensor::requires_grad) {
            Tensor::make(shape, data, true, Some(Box::new(grad_fn)), parents)
        } else {
            Tensor::make(shape, data, false, None, Vec::new())
        }
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn batch(&self) -> usize {
        self.0.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape[3]
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, h, w] = self.0.shape;
        self.0.data.borrow()[((n * cs + c) * h + y) * w + x]
    }

    pub fn requires_grad(&self) -> bool {
        *self.0.requires_grad.borrow()
    }

    /// Toggles gradient tracking on a leaf. Graphs built afterwards honour
    /// the new flag; existing graphs are unaffected.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.is_leaf(), "requires_grad can only be changed on leaves");
        *self.0.requires_grad.borrow_mut() = on;
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient; zeros when nothing has been propagated here.
    pub fn grad(&self) -> Vec<f64> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the values cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.shape(), self.to_vec(), false, None, Vec::new())
    }

    /// Overwrites the values of a leaf in place (optimizer updates,
    /// checkpoint loading).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "only leaf tensors can be updated in place");
        f(&mut self.0.data.borrow_mut());
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a one-element root. Gradients accumulate into
    /// every reachable leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(f) => {
                    let parent_grads = f.backward(node, &grad, &node.0.parents);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", f.name());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                        None => *slot = Some(grad),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the nodes that require a gradient.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
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
            for p in &node.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
