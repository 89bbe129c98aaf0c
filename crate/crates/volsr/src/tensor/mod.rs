//! Reverse-mode automatic differentiation over dense N-d arrays.
//!
//! A [`Tensor`] is a cheap handle onto shared storage. While gradient mode is
//! enabled (the default), operations on tensors that require gradients record
//! themselves onto an implicit graph; [`Tensor::backward`] and [`grad_of`]
//! replay that graph in reverse. `grad_of` with `create_graph = true` keeps
//! the reverse pass itself on the graph, so the result can be differentiated
//! again. That second-order path is supported for the layer set a scalar
//! critic uses (convolution, matmul, layer statistics, leaky activations,
//! elementwise arithmetic); `abs` and `elu` carry first-order gradients only.
//!
//! Layout convention for 5-d data is (batch, channel, depth, height, width).

mod conv;
mod ops;

pub use conv::{conv3d, conv3d_input_grad, conv3d_weight_grad, conv3d_out_shape};

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

/// Scalar types the engine runs on. Double precision is the reference for
/// every gradient check; single precision is for training throughput.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const DTYPE: Dtype;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Shorthand for converting an f64 literal into the element type.
pub(crate) fn lit<E: Element>(v: f64) -> E {
    E::from_f64(v).expect("literal out of range")
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True while operations should record onto the autodiff graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct ModeGuard {
    prev: bool,
}

impl ModeGuard {
    fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
        ModeGuard { prev }
    }
}

impl Drop for ModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

/// Runs `f` with gradient recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = ModeGuard::set(false);
    f()
}

/// Runs `f` with an explicit gradient-recording mode.
pub fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    let _g = ModeGuard::set(enabled);
    f()
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) trait Op<E: Element>: Send + Sync {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Tensor<E>>;
    /// Cotangents for each input given the node's output and incoming
    /// cotangent. `None` marks an input that should receive no gradient.
    fn vjp(&self, out: &Tensor<E>, grad: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>>;
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<E>>,
    requires_grad: bool,
    grad: Mutex<Option<Tensor<E>>>,
    op: Option<Box<dyn Op<E>>>,
}

/// Handle onto shared tensor storage, optionally part of an autodiff graph.
pub struct Tensor<E: Element> {
    inner: Arc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.op.as_ref().map(|o| o.name()))
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn new_inner(data: Vec<E>, shape: Vec<usize>, requires_grad: bool, op: Option<Box<dyn Op<E>>>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::new_inner(vec![E::zero(); n], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n: usize = shape.iter().product();
        Self::new_inner(vec![v; n], shape.to_vec(), false, None)
    }

    pub fn scalar(v: E) -> Self {
        Self::new_inner(vec![v], vec![1], false, None)
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| lit::<E>(lo + (hi - lo) * rng.gen::<f64>()))
            .collect();
        Self::new_inner(data, shape.to_vec(), false, None)
    }

    /// Marks a freshly created leaf as a gradient target.
    pub fn requires_grad(mut self) -> Self {
        match Arc::get_mut(&mut self.inner) {
            Some(inner) => {
                inner.requires_grad = true;
                self
            }
            None => {
                let data = self.inner.data.read().unwrap().clone();
                Self::new_inner(data, self.inner.shape.clone(), true, None)
            }
        }
    }

    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        record: bool,
        op: impl FnOnce() -> Box<dyn Op<E>>,
    ) -> Self {
        let op = if record && grad_enabled() { Some(op()) } else { None };
        Self::new_inner(data, shape, false, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn dtype(&self) -> Dtype {
        E::DTYPE
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// True when this tensor participates in gradient computation, either as
    /// a leaf target or through a recorded operation.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.op.is_some()
    }

    pub(crate) fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.inner.data.read().unwrap()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.read().unwrap().clone()
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.read().unwrap()[0]
    }

    pub fn value_f64(&self) -> f64 {
        self.item().to_f64().unwrap()
    }

    /// Replaces the storage contents. The shape is fixed; intended for
    /// optimizer updates on leaves between steps.
    pub fn set_data(&self, data: Vec<E>) {
        let mut guard = self.inner.data.write().unwrap();
        assert_eq!(guard.len(), data.len(), "set_data length mismatch");
        *guard = data;
    }

    pub(crate) fn map_data(&self, f: impl FnOnce(&mut Vec<E>)) {
        let mut guard = self.inner.data.write().unwrap();
        f(&mut guard);
    }

    pub fn grad(&self) -> Option<Tensor<E>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    fn accumulate_grad(&self, g: &Tensor<E>) {
        let mut slot = self.inner.grad.lock().unwrap();
        *slot = Some(match slot.as_ref() {
            Some(prev) => no_grad(|| prev.add(g)).expect("grad accumulation shape"),
            None => g.clone(),
        });
    }

    /// Copy of the values severed from the graph.
    pub fn detach(&self) -> Tensor<E> {
        Self::new_inner(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    /// Casts elementwise into another element type, detached.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|v| T::from_f64(v.to_f64().unwrap()).unwrap())
            .collect();
        Tensor::<T>::new_inner(data, self.inner.shape.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Runs the reverse pass from a scalar loss and deposits gradients on
    /// every grad-required leaf that contributed to it.
    pub fn backward(&self) -> Result<()> {
        let (order, grads) = self.reverse_sweep(false)?;
        for node in &order {
            if node.inner.requires_grad {
                if let Some(g) = grads.get(&node.id()) {
                    node.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn reverse_sweep(&self, create_graph: bool) -> Result<(Vec<Tensor<E>>, HashMap<u64, Tensor<E>>)> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = toposort(self);
        let mut grads: HashMap<u64, Tensor<E>> = HashMap::new();
        grads.insert(self.id(), Tensor::ones(self.shape()));

        let _mode = ModeGuard::set(create_graph);
        for node in order.iter().rev() {
            let Some(op) = node.inner.op.as_ref() else {
                continue;
            };
            let Some(gout) = grads.get(&node.id()).cloned() else {
                continue;
            };
            let inputs = op.inputs();
            let cotangents = op.vjp(node, &gout)?;
            debug_assert_eq!(inputs.len(), cotangents.len(), "{} vjp arity", op.name());
            for (input, ct) in inputs.iter().zip(cotangents) {
                if !input.needs_grad() {
                    continue;
                }
                let Some(ct) = ct else { continue };
                debug_assert_eq!(
                    ct.shape(),
                    input.shape(),
                    "{} cotangent shape mismatch",
                    op.name()
                );
                match grads.remove(&input.id()) {
                    Some(prev) => {
                        grads.insert(input.id(), prev.add(&ct)?);
                    }
                    None => {
                        grads.insert(input.id(), ct);
                    }
                }
            }
        }
        Ok((order, grads))
    }
}

/// Gradients of a scalar `output` with respect to `wrt`, without touching any
/// `.grad` slot. With `create_graph` the returned tensors stay on the graph
/// and can be differentiated again.
pub fn grad_of<E: Element>(
    output: &Tensor<E>,
    wrt: &[&Tensor<E>],
    create_graph: bool,
) -> Result<Vec<Tensor<E>>> {
    let (_, grads) = output.reverse_sweep(create_graph)?;
    Ok(wrt
        .iter()
        .map(|t| match grads.get(&t.id()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        })
        .collect())
}

fn toposort<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order: Vec<Tensor<E>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.inner.op.as_ref() {
            for input in op.inputs() {
                if input.needs_grad() && !visited.contains(&input.id()) {
                    stack.push((input, false));
                }
            }
        }
    }
    order
}
