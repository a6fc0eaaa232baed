//! Dense fp64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to a shape + row-major value
//! buffer. Differentiable operations live on [`Tape`]; each op records a
//! backward rule, and [`Tape::backward`] replays the rules in reverse to
//! populate gradients. Everything is single-threaded and deterministic:
//! the same seed yields bit-identical forwards and gradients.

mod io;
mod ops;
mod tape;

pub use io::{read_tensor, write_tensor};
pub use tape::Tape;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Handle to a dense fp64 tensor. Clones share the underlying buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<f64>>>,
    /// Leaf flag: the caller asked for this tensor's gradient to be kept.
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    /// Index of the producing node on the active tape, if any.
    node: Cell<Option<usize>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} requires {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::new_raw(shape.to_vec(), data))
    }

    pub(crate) fn new_raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: Rc::new(RefCell::new(data)),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    /// New tensor sharing `data` storage (used by reshape/detach).
    pub(crate) fn view_raw(shape: Vec<usize>, data: Rc<RefCell<Vec<f64>>>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                node: Cell::new(None),
            }),
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::new_raw(vec![], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Self::new_raw(shape.to_vec(), vec![value; numel])
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self::new_raw(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor. Panics otherwise.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() requires a single-element tensor, shape is {:?}",
            self.shape()
        );
        self.inner.data.borrow()[0]
    }

    /// Element at a full multi-index (row-major). Panics on rank/bounds misuse.
    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.ndim(), "index rank mismatch");
        let mut flat = 0;
        for (d, (&i, &n)) in index.iter().zip(self.shape()).enumerate() {
            assert!(i < n, "index {} out of bounds for axis {} of size {}", i, d, n);
            flat = flat * n + i;
        }
        self.inner.data.borrow()[flat]
    }

    /// In-place mutation of the value buffer (parameter updates).
    pub fn apply<F: FnOnce(&mut [f64])>(&self, f: F) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Marks this tensor as a gradient-retaining leaf.
    pub fn with_grad(self) -> Tensor {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Tape node that produced this tensor, if recorded.
    pub fn tape_node(&self) -> Option<usize> {
        self.inner.node.get()
    }

    /// True when a backward pass will deposit a gradient here.
    pub fn is_tracked(&self) -> bool {
        self.requires_grad() || self.tape_node().is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Leaf tensor sharing this tensor's storage, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor::view_raw(self.inner.shape.clone(), self.inner.data.clone())
    }

    /// Deep copy with its own storage, detached from any tape.
    pub fn deep_clone(&self) -> Tensor {
        Tensor::new_raw(self.inner.shape.clone(), self.to_vec())
    }

    pub(crate) fn set_node(&self, node: usize) {
        self.inner.node.set(Some(node));
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }

    pub(crate) fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.inner.grad.borrow_mut() = Some(g);
    }

    /// Accumulates into the gradient buffer, allocating zeros on first use.
    pub(crate) fn accum_grad<F: FnOnce(&mut [f64])>(&self, f: F) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(buf);
    }

    pub(crate) fn data_rc(&self) -> Rc<RefCell<Vec<f64>>> {
        self.inner.data.clone()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// Broadcast shape of two operands under trailing-dimension rules.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                left: a.to_vec(),
                right: b.to_vec(),
                context: "not broadcastable".into(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` right-aligned into a broadcast frame of `out_shape`,
/// with zero stride on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_for(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[pad + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

/// Visits every output index of `out_shape`, yielding the flat offsets
/// (out, a, b) for two broadcast operands. Odometer walk, no divisions.
pub(crate) fn for_each_broadcast2(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..numel {
        f(i, ia, ib);
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= a_strides[d] * out_shape[d];
            ib -= b_strides[d] * out_shape[d];
        }
    }
}
