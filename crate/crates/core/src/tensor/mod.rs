//! Dense NCHW tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is an immutable node in a computation graph. Operations on
//! tensors that track gradients record their inputs; [`Tensor::backward`]
//! walks the recorded graph in reverse topological order and accumulates
//! gradients into the leaf tensors created with [`Tensor::param`].
//! Operations whose inputs do not track gradients record nothing, so
//! inference builds no graph at all.

mod backward;
mod conv;
pub mod gradcheck;
pub mod init;
mod ops;
mod real;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::sampling::BlockGeometry;

pub use ops::*;
pub use real::Real;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per batch entry.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Recorded operation that produced a tensor.
pub(crate) enum Op<T: Real> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddScalar(Tensor<T>),
    Relu(Tensor<T>),
    Sigmoid(Tensor<T>),
    Softplus(Tensor<T>),
    Sum(Tensor<T>),
    SumSquares(Tensor<T>),
    Concat(Vec<Tensor<T>>),
    GlobalAvgPool(Tensor<T>),
    Nearest2x(Tensor<T>),
    Unshuffle(Tensor<T>, usize),
    UnshuffleInv(Tensor<T>, usize),
    ScalePerSample(Tensor<T>, Tensor<T>),
    RepeatBatch(Tensor<T>),
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    BlockSample {
        image: Tensor<T>,
        phi: Tensor<T>,
        geom: BlockGeometry,
    },
    BlockAdjoint {
        meas: Tensor<T>,
        phi: Tensor<T>,
        geom: BlockGeometry,
    },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScalePerSample(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::GlobalAvgPool(a)
            | Op::Nearest2x(a)
            | Op::Unshuffle(a, _)
            | Op::UnshuffleInv(a, _)
            | Op::RepeatBatch(a) => vec![a],
            Op::Concat(parts) => parts.iter().collect(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::BlockSample { image, phi, .. } => vec![image, phi],
            Op::BlockAdjoint { meas, phi, .. } => vec![meas, phi],
        }
    }
}

pub(crate) struct Node<T: Real> {
    id: u64,
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// Shared handle to an immutable graph node.
#[derive(Clone)]
pub struct Tensor<T: Real = f32>(Arc<Node<T>>);

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::DTYPE)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn from_parts(shape: Shape, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Result of an operation; the op is kept only if some input tracks gradients.
    pub(crate) fn from_op(shape: Shape, data: Vec<T>, op: Op<T>) -> Self {
        let tracked = op.parents().iter().any(|p| p.requires_grad());
        if tracked {
            Self::from_parts(shape, data, true, Some(op))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    /// Constant tensor. Fails if `data.len()` differs from the shape's element count.
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for shape {}", data.len(), shape),
            ));
        }
        Ok(Self::from_parts(shape, data, false, None))
    }

    /// Trainable leaf; gradients accumulate into it on `backward`.
    pub fn param(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        Ok(Self::new(shape, data)?.into_param())
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Self::from_parts(shape, vec![T::zero(); shape.numel()], false, None)
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Self::from_parts(shape, vec![value; shape.numel()], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Shape::scalar(), vec![value], false, None)
    }

    pub fn from_f64(shape: impl Into<Shape>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// Copy of this tensor as a fresh trainable leaf.
    pub fn into_param(self) -> Self {
        Self::from_parts(self.0.shape, self.0.data.clone(), true, None)
    }

    /// Copy of this tensor detached from any graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape, self.0.data.clone(), false, None)
    }

    /// Same data and trainability with new values, e.g. after an optimizer step.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        let t = Self::new(self.0.shape, data)?;
        Ok(if self.is_leaf_param() { t.into_param() } else { t })
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    /// True for trainable leaves and for every result computed from one.
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// A trainable leaf, as opposed to a tracked intermediate result.
    pub fn is_leaf_param(&self) -> bool {
        self.0.requires_grad && self.0.op.is_none()
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Reverse-mode accumulation from a single-element tensor.
    ///
    /// Gradients are added to the `grad` buffer of every trainable leaf
    /// reachable from `self`. Calling it twice accumulates twice.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        let mut grads = Grads::default();
        grads.insert(self.id(), vec![T::one()]);

        for tensor in order.iter().rev() {
            let Some(g) = grads.take(tensor.id()) else {
                continue;
            };
            match &tensor.0.op {
                None => {
                    let mut slot = tensor.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => backward::propagate(op, tensor, &g, &mut grads),
            }
        }
        Ok(())
    }

    /// Parents-before-children ordering of the tracked subgraph under `self`.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children already pushed)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradient buffers of intermediate nodes during one backward pass.
#[derive(Default)]
pub(crate) struct Grads<T: Real> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Real> Grads<T> {
    fn insert(&mut self, id: u64, g: Vec<T>) {
        self.map.insert(id, g);
    }

    fn take(&mut self, id: u64) -> Option<Vec<T>> {
        self.map.remove(&id)
    }

    /// Adds `g` into the gradient of `t`; ignored when `t` is untracked.
    pub(crate) fn add(&mut self, t: &Tensor<T>, g: Vec<T>) {
        if !t.requires_grad() {
            return;
        }
        debug_assert_eq!(g.len(), t.numel());
        match self.map.get_mut(&t.id()) {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => {
                self.map.insert(t.id(), g);
            }
        }
    }
}
