//! Dense row-major tensors and named trainable parameters.
//!
//! A [`Tensor`] is an immutable value: shape plus a shared buffer. Ops never
//! mutate an existing buffer, they allocate a new one, so a recorded tape can
//! keep cheap `Rc` references to every intermediate it needs for backward.
//!
//! A [`Param`] is the mutable counterpart: a named `f32` buffer the optimizer
//! updates in place between passes, with a gradient slot that `backward`
//! accumulates into additively.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::scalar::Scalar;

/// Index of a tracked value on a [`crate::graph::Graph`] tape.
pub type NodeId = usize;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Formats a shape as `1x3x64x64` for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".to_string();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

#[derive(Clone)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds an untracked tensor. Panics if `data.len()` disagrees with the
    /// shape; that is always a caller bug, not an input condition.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel(shape),
            "tensor data length {} does not match shape {}",
            data.len(),
            fmt_shape(shape)
        );
        Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![T::ZERO; numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::new(vec![v; numel(shape)], shape)
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new(vec![v], &[])
    }

    pub fn from_f32_slice(data: &[f32], shape: &[usize]) -> Self {
        Tensor::new(data.iter().map(|&v| T::from_f32(v)).collect(), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.data)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {}", fmt_shape(&self.shape));
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Same buffer viewed under a different shape with equal element count.
    /// Untracked; the graph has a tracked `reshape` op.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len());
        Tensor { shape: shape.to_vec(), data: Rc::clone(&self.data), node: self.node }
    }

    pub(crate) fn tracked(data: Vec<T>, shape: &[usize], node: Option<NodeId>) -> Self {
        let mut t = Tensor::new(data, shape);
        t.node = node;
        t
    }

    pub(crate) fn tracked_rc(data: Rc<Vec<T>>, shape: &[usize], node: Option<NodeId>) -> Self {
        assert_eq!(data.len(), numel(shape));
        Tensor { shape: shape.to_vec(), data, node }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor[{}]", fmt_shape(&self.shape))?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

/// How a fresh parameter buffer is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f32),
    /// U(-b, b) with b = gain * sqrt(3 / fan_in); fan_in is the product of
    /// all dims after the first (matches both conv and linear layouts).
    Kaiming { gain: f32 },
    /// U(-bound, bound) with an explicit bound.
    Uniform { bound: f32 },
}

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Vec<f32>>,
    grad: RefCell<Vec<f32>>,
    trainable: Cell<bool>,
}

/// Shared handle to a named parameter. Clones refer to the same storage.
#[derive(Clone)]
pub struct Param(Rc<ParamInner>);

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Self {
        let n = numel(shape);
        let mut value = vec![0.0f32; n];
        match init {
            Init::Zeros => {}
            Init::Const(c) => value.fill(c),
            Init::Kaiming { gain } => {
                let fan_in = shape[1..].iter().product::<usize>().max(1);
                rng::fill_uniform(rng, &mut value, rng::kaiming_bound(fan_in, gain));
            }
            Init::Uniform { bound } => rng::fill_uniform(rng, &mut value, bound),
        }
        Param(Rc::new(ParamInner {
            name: name.into(),
            shape: shape.to_vec(),
            value: RefCell::new(value),
            grad: RefCell::new(vec![0.0; n]),
            trainable: Cell::new(true),
        }))
    }

    /// Zero-filled parameter; no randomness involved.
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = numel(shape);
        Param(Rc::new(ParamInner {
            name: name.into(),
            shape: shape.to_vec(),
            value: RefCell::new(vec![0.0; n]),
            grad: RefCell::new(vec![0.0; n]),
            trainable: Cell::new(true),
        }))
    }

    /// Constant-filled parameter; no randomness involved.
    pub fn constant(name: impl Into<String>, shape: &[usize], c: f32) -> Self {
        let p = Param::zeros(name, shape);
        p.update_value(|v| v.fill(c));
        p
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().len()
    }

    pub fn value(&self) -> Ref<'_, Vec<f32>> {
        self.0.value.borrow()
    }

    pub fn set_value(&self, new: &[f32]) {
        let mut v = self.0.value.borrow_mut();
        assert_eq!(v.len(), new.len(), "set_value length mismatch on {}", self.0.name);
        v.copy_from_slice(new);
    }

    /// Mutates the stored value in place (optimizer update path).
    pub fn update_value(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn grad(&self) -> Ref<'_, Vec<f32>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        self.0.grad.borrow_mut().fill(0.0);
    }

    /// Adds `delta` into the gradient slot. Accumulation is additive; the
    /// caller zeroes gradients between steps.
    pub fn accumulate_grad(&self, delta: &[f32]) {
        let mut g = self.0.grad.borrow_mut();
        assert_eq!(g.len(), delta.len(), "gradient length mismatch on {}", self.0.name);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable.get()
    }

    pub fn set_trainable(&self, t: bool) {
        self.0.trainable.set(t);
    }

    /// Snapshot of the current value as a tensor buffer in precision `T`.
    pub fn value_as<T: Scalar>(&self) -> Vec<T> {
        self.0.value.borrow().iter().map(|&v| T::from_f32(v)).collect()
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Param({} [{}]{})",
            self.0.name,
            fmt_shape(&self.0.shape),
            if self.trainable() { "" } else { " frozen" }
        )
    }
}
