//! Dense row-major `f64` tensors with reverse-mode differentiation.
//!
//! Every operation records its inputs and a vector-Jacobian closure when at
//! least one input requires a gradient and recording is enabled (see
//! [`no_grad`]). [`Tensor::backward`] walks the recorded graph in reverse
//! topological order and accumulates into the gradient buffers of the leaves.
//! Leaf gradients accumulate across calls until [`Tensor::zero_grad`].

mod conv;
mod gradcheck;
mod ops;

pub use conv::{Conv2dSpec, Padding};
pub use gradcheck::{grad_check, grad_check_sampled, GradReport};
pub use ops::topk_desc;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Vector-Jacobian product: given the upstream gradient and the forward
/// output, returns one optional gradient per parent.
type GradFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    op: &'static str,
}

/// Shared handle to an immutable tensor node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    /// Creates a constant tensor. Fails if `shape` has a zero extent or does
    /// not match `data.len()`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Creates a leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape, data, true)
    }

    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        let grad = requires_grad.then(|| vec![0.0; numel]);
        Ok(Tensor(Arc::new(Node {
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: Mutex::new(grad),
            parents: Vec::new(),
            grad_fn: None,
            op: "leaf",
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar shape")
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(&[n, n], data).expect("square shape")
    }

    /// Builds the output of an operation, recording the graph edge only when
    /// recording is enabled and some parent requires a gradient.
    pub(crate) fn from_op<F>(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        grad_fn: F,
    ) -> Tensor
    where
        F: Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let (parents, grad_fn): (Vec<Tensor>, Option<GradFn>) =
            if track { (parents, Some(Box::new(grad_fn))) } else { (Vec::new(), None) };
        Tensor(Arc::new(Node { shape, data, requires_grad: track, grad: Mutex::new(None), parents, grad_fn, op }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Accumulated gradient of a leaf. `None` for constants and interior nodes.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        let mut g = self.0.grad.lock().expect("grad lock");
        if let Some(buf) = g.as_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Fresh constant with the same values and no history.
    pub fn detach(&self) -> Tensor {
        Tensor::new(&self.0.shape, self.0.data.clone()).expect("existing shape is valid")
    }

    /// Fresh gradient-accumulating leaf with the same values.
    pub fn detach_param(&self) -> Tensor {
        Tensor::param(&self.0.shape, self.0.data.clone()).expect("existing shape is valid")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a single-element tensor. Every reachable leaf
    /// with `requires_grad` receives `d self / d leaf` added to its buffer.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape())));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        if self.is_leaf() {
            self.accumulate(&[1.0]);
            return Ok(());
        }

        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(Arc::as_ptr(&self.0), vec![1.0]);

        for node in order.iter().rev() {
            let Some(upstream) = pending.remove(&Arc::as_ptr(&node.0)) else {
                continue;
            };
            match &node.0.grad_fn {
                None => node.accumulate(&upstream),
                Some(f) => {
                    let parent_grads = f(&upstream, &node.0.data);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (parent, g) in node.0.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), parent.numel(), "grad of {}", node.0.op);
                        match pending.entry(Arc::as_ptr(&parent.0)) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&g) {
                                    *a += b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, g: &[f64]) {
        let mut guard = self.0.grad.lock().expect("grad lock");
        match guard.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Post-order over the nodes that participate in differentiation.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(Arc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&Arc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::new(&[0, 3], vec![]), Err(Error::Dimension(_))));
    }

    #[test]
    fn param_has_zeroed_grad_constant_has_none() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(p.grad(), Some(vec![0.0, 0.0]));
        let c = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(c.grad(), None);
    }

    #[test]
    fn sum_gives_all_ones() {
        let x = Tensor::param(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gives_x() {
        let vals = vec![0.5, -1.5, 2.0, 3.25];
        let x = Tensor::param(&[4], vals.clone()).unwrap();
        let loss = x.mul(&x).unwrap().sum().scale(0.5);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vals);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(x.scale(2.0).backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_disables_recording() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
        assert!(x.scale(3.0).requires_grad());
    }

    #[test]
    fn shared_subexpression_gradients_add() {
        // loss = sum(x * x + x) -> grad = 2x + 1
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, -3.0, 2.0]);
    }
}
