//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array (row-major) plus an
//! optional gradient buffer. Differentiable operations are methods on
//! [`Tape`], which records them as a Wengert list; [`Tape::backward`]
//! replays the list in reverse to populate leaf gradients.

pub mod alloc;
pub mod eig;
pub mod ops;
pub mod rng;
pub mod tape;

pub use tape::{Mode, Tape};

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use alloc::TrackedVec;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<TrackedVec>,
    requires_grad: bool,
    grad: RefCell<Option<TrackedVec>>,
}

/// Immutable dense tensor. Cloning is cheap (reference counted); the data
/// buffer is shared, the gradient buffer is shared too so that a parameter
/// held by a model and the same parameter on a tape accumulate into one
/// place.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::build(TrackedVec::new(data), shape.to_vec(), false))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build(TrackedVec::new(vec![v]), vec![1], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::build(TrackedVec::new(vec![0.0; numel]), shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::build(TrackedVec::new(vec![1.0; numel]), shape.to_vec(), false)
    }

    /// Leaf parameter: participates in gradient computation.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn with_requires_grad(&self, requires: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                requires_grad: requires,
                grad: RefCell::new(None),
            }),
        }
    }

    /// New leaf sharing this tensor's data, detached from any gradient path.
    pub fn detach(&self) -> Tensor {
        self.with_requires_grad(false)
    }

    fn build(data: TrackedVec, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Rc::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Internal constructor for op outputs: fresh data, possibly on the
    /// gradient path.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Self::build(TrackedVec::new(data), shape, requires_grad)
    }

    /// Internal constructor sharing an existing buffer (reshape and friends).
    pub(crate) fn view_of(&self, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Rc::clone(&self.inner.data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.inner.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Current gradient buffer, if populated by a backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().as_ref().map(|g| g.to_vec())
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(TrackedVec::new(g.to_vec())),
        }
    }

    /// Rows-by-columns interpretation of a 2D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("expected 2D tensor, got shape {:?}", s))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(Error::Dimension(format!("expected 3D tensor, got shape {:?}", s))),
        }
    }
}

/// Central-difference gradient of a scalar-valued function at `x`.
///
/// Used by tests as the independent oracle against analytic gradients; lives
/// in the library so integration tests can reuse it.
pub fn finite_difference_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        let orig = pt[i];
        pt[i] = orig + h;
        let fp = f(&pt);
        pt[i] = orig - h;
        let fm = f(&pt);
        pt[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative deviation between two gradient vectors, with an absolute
/// floor so near-zero entries do not blow up the ratio.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
