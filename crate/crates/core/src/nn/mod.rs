//! A small reverse-mode differentiation core: tensors with gradient slots,
//! layers with cached forward state and explicit backward passes, and the two
//! optimizers the training procedure needs.
//!
//! Every layer follows the same protocol: `forward` caches whatever the
//! backward pass needs, `backward` consumes the upstream gradient, accumulates
//! into the parameter gradient slots and returns the input gradient. Calling
//! `backward` without a preceding `forward` is a [`NnError::ModeError`].

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use layers::{
    add, add_backward, mul, mul_backward, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2,
    Need, Relu,
};
pub use loss::{log_softmax, softmax_cross_entropy};
pub use optim::{Adam, AdamConfig, SgdConfig, SgdNesterov};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called before forward: {0}")]
    ModeError(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense row-major f64 tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(v);
        t
    }

    /// A trainable parameter: gradient slot allocated and zeroed.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient slot, allocating it when absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), NnError> {
        if delta.len() != self.data.len() {
            return Err(shape_err("gradient length differs from tensor"));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, NnError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-dependent checksum of the raw bits, for phase-separation checks.
    pub fn checksum(&self) -> u64 {
        self.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// Visitor over named parameters and buffers.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }
}

/// A differentiable map with cached forward state.
pub trait Layer: Module {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor, NnError>;

    /// Accumulates all parameter gradients and returns the input gradient.
    fn backward(&mut self, dy: &Tensor) -> Result<Tensor, NnError>;
}

/// Output-stationary `C = alpha * A B + beta * C` over row-major strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the strided extents; checked below
    // in debug builds.
    debug_assert!(k == 0 || a.len() >= extent(m, k, rsa, csa));
    debug_assert!(k == 0 || b.len() >= extent(k, n, rsb, csb));
    debug_assert!(c.len() >= extent(m, n, rsc, csc));
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize + 1
}
