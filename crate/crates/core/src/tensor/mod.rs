//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable N-dimensional array in row-major order.
//! Ops recorded on a [`GradTape`] build a backward pass; gradients
//! accumulate (`+=`) into every tensor created with `requires_grad`.
//! Parameter updates go through [`Tensor::update_data`], the only
//! sanctioned in-place mutation.

mod gradcheck;
mod io;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_param};
pub use io::{read_drbt, read_drbt_from, write_drbt, write_drbt_to, DRBT_MAGIC, DRBT_VERSION};
pub use tape::GradTape;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    /// True when this tensor participates in the current autodiff graph,
    /// either as a `requires_grad` leaf or as the output of a tracked op.
    tracked: bool,
}

/// Dense N-dimensional f32 array, cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, tracked: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            tracked,
        }))
    }

    /// Leaf tensor from raw data. Fails if the element count mismatches.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, false))
    }

    /// Internal: op output (tracking decided by the op).
    pub(crate) fn output(shape: Vec<usize>, data: Vec<f32>, tracked: bool) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "op produced non-finite values"
        );
        Tensor::new(shape, data, false, tracked)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel], false, false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel], false, false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::new(vec![1], vec![value], false, false)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data, false, false)
    }

    /// Mark this leaf as a differentiation target. Returns a new handle
    /// sharing nothing with `self` (fresh storage) so callers can hold
    /// both views without aliasing surprises.
    pub fn requires_grad(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.to_vec(), true, true)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn is_requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn is_tracked(&self) -> bool {
        self.0.tracked
    }

    /// Read guard over the raw data.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.0.data.read()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.read().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data.read()[0]
    }

    /// Current accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().clone()
    }

    /// Drop any accumulated gradient.
    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// Accumulate `delta` into the gradient buffer (allocating on first use).
    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut guard = self.0.grad.lock();
        match guard.as_mut() {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    pub(crate) fn set_grad(&self, grad: Vec<f32>) {
        *self.0.grad.lock() = Some(grad);
    }

    /// Direct gradient injection for optimizer tests.
    #[cfg(test)]
    pub(crate) fn set_grad_for_test(&self, grad: Vec<f32>) {
        debug_assert_eq!(grad.len(), self.numel());
        *self.0.grad.lock() = Some(grad);
    }

    /// In-place parameter update; the sole mutation path for leaf tensors.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        let mut guard = self.0.data.write();
        f(&mut guard);
    }

    /// Copies `src` over this tensor's storage (checkpoint restore).
    pub fn load_data(&self, src: &[f32]) -> Result<()> {
        if src.len() != self.numel() {
            return Err(Error::dimension(format!(
                "load: expected {} elements, got {}",
                self.numel(),
                src.len()
            )));
        }
        self.0.data.write().copy_from_slice(src);
        Ok(())
    }

    /// Detached copy: same data, not part of any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.to_vec(), false, false)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Kaiming-uniform fan-in initialization for a conv weight `[F, C, k, k]`
/// with leaky-relu gain.
pub fn kaiming_uniform(shape: &[usize], slope: f32, rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let bound = gain * (3.0 / fan_in as f32).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::zeros(&[3]).requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
