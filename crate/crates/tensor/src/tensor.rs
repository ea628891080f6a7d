use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::{Element, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording graph nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Vector-Jacobian product of one recorded operation.
///
/// Given the gradient flowing into the op's output, return one entry per
/// input: `Some(grad)` with the input's shape, or `None` when that input does
/// not require a gradient.
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Element> {
    op: Box<dyn Backward<T>>,
    inputs: Vec<Tensor<T>>,
}

struct Inner<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: bool,
    // Present only for leaves that require a gradient.
    grad: Mutex<Option<Vec<T>>>,
    node: Mutex<Option<Node<T>>>,
}

/// Shape-tagged array participating in a reverse-mode graph.
///
/// Cloning is cheap and yields a handle to the same storage.
pub struct Tensor<T: Element>(Arc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let grad = if requires_grad && node.is_none() {
            Some(vec![T::zero(); data.len()])
        } else {
            None
        };
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            requires_grad,
            grad: Mutex::new(grad),
            node: Mutex::new(node),
        }))
    }

    /// A constant (no gradient) tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// A trainable leaf whose gradient is accumulated by [`Tensor::backward`].
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![v], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::build(vec![T::one(); numel(shape)], shape.to_vec(), false, None)
    }

    /// Result of an operation. A graph node is recorded only when gradient
    /// recording is enabled and some input requires a gradient.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: impl Backward<T> + 'static,
        inputs: Vec<Tensor<T>>,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(
                data,
                shape,
                true,
                Some(Node {
                    op: Box::new(op),
                    inputs,
                }),
            )
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.lock().expect("node lock").is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.0.data.read().expect("tensor data lock")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    /// Overwrites the values in place (used by optimizers).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        let mut d = self.0.data.write().expect("tensor data lock");
        f(&mut d);
    }

    pub fn set_data(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::LengthMismatch {
                len: values.len(),
                shape: self.shape().to_vec(),
            });
        }
        self.update_data(|d| d.copy_from_slice(values));
        Ok(())
    }

    /// Accumulated gradient of a leaf, if it requires one.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.lock().expect("grad lock").as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Tensor<T> {
        Self::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    fn accumulate_leaf(&self, g: &[T]) {
        if let Some(acc) = self.0.grad.lock().expect("grad lock").as_mut() {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += *v;
            }
        }
    }

    /// Back-propagates from a scalar loss into every reachable leaf.
    ///
    /// Gradients add onto whatever the leaves already hold. The graph below
    /// `self` is released afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let node = t.0.node.lock().expect("node lock").take();
            match node {
                None => t.accumulate_leaf(&g),
                Some(node) => {
                    let out = t.data();
                    let input_grads = node.op.backward(&node.inputs, &out, &g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op.name());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let (Some(ig), true) = (ig, input.requires_grad()) else {
                            continue;
                        };
                        debug_assert_eq!(ig.len(), input.numel(), "{}", node.op.name());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, v)| *a += *v),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require gradients, inputs before
    /// consumers.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            let node = t.0.node.lock().expect("node lock");
            if let Some(node) = node.as_ref() {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
