//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer plus an optional
//! link to the operation that produced it. Operations executed while
//! gradient recording is enabled (see [`no_grad`]) attach a backward rule
//! written in terms of other tensor operations, so gradients computed with
//! `create_graph = true` are themselves differentiable.
//!
//! Broadcasting is deliberately narrow: per-sample vectors reach feature maps
//! through [`Tensor::replicate_spatial`], per-channel parameters through
//! [`Tensor::channel_broadcast`], and scalars through [`Tensor::scale_by`].
//! Everything else requires equal shapes.

mod conv;
mod gradcheck;
mod ops;
mod tape;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

pub use conv::conv_output_size;
pub use gradcheck::{finite_diff_gradient, finite_diff_gradient_recorded, max_rel_error};
pub use tape::{backward, grad_enabled, no_grad, GradMap};

use crate::error::{Error, Result};
use crate::rng::SatRng;

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Float:
    num_traits::Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a * b (+ c if accumulate)` on row-major buffers, where `a` is
    /// `m x k` (or its transpose is stored when `trans_a`) and `b` is `k x n`
    /// (transpose stored when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! gemm_strides {
    ($m:expr, $k:expr, $n:expr, $trans_a:expr, $trans_b:expr) => {{
        let (rsa, csa) = if $trans_a { (1, $m) } else { ($k, 1) };
        let (rsb, csb) = if $trans_b { (1, $k) } else { ($n, 1) };
        (rsa as isize, csa as isize, rsb as isize, csb as isize)
    }};
}

impl Float for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa, rsb, csb) = gemm_strides!(m, k, n, trans_a, trans_b);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: buffer extents checked above; strides describe row-major
        // layouts of exactly those extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Float for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa, rsb, csb) = gemm_strides!(m, k, n, trans_a, trans_b);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static FINITE_CHECKS: AtomicBool = AtomicBool::new(cfg!(debug_assertions));

/// Toggle the NaN/Inf check applied to every recorded operation's output.
/// On by default in debug builds.
pub fn set_finite_checks(enabled: bool) {
    FINITE_CHECKS.store(enabled, Ordering::Relaxed);
}

pub fn finite_checks() -> bool {
    FINITE_CHECKS.load(Ordering::Relaxed)
}

thread_local! {
    static OP_COUNT: Cell<u64> = const { Cell::new(0) };
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync>;

pub(crate) struct GradFn<T: Float> {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) backward: BackwardFn<T>,
}

pub(crate) struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// N-dimensional dense tensor, row-major. Cheap to clone.
pub struct Tensor<T: Float = f32>(Arc<Node<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            d.field("op", &g.op);
        }
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.finish()
    }
}

/// Fill pattern for [`Tensor::create`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FillKind {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape(vec![], "shape must have at least one extent"));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec(), "extents must be positive"));
    }
    Ok(shape.iter().product())
}

impl<T: Float> Tensor<T> {
    fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    /// Constant (non-differentiable) tensor from a buffer.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(
                shape.to_vec(),
                "element count does not match buffer length",
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    /// Trainable leaf tensor.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.into_leaf(true))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![v]), false, None)
    }

    pub fn create(shape: &[usize], fill: FillKind) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match fill {
            FillKind::Zeros => vec![T::zero(); n],
            FillKind::Ones => vec![T::one(); n],
            FillKind::Constant(v) => {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("constant fill {v}")));
                }
                vec![T::of(v); n]
            }
            FillKind::Uniform { lo, hi, seed } => {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(Error::InvalidArgument(format!(
                        "uniform bounds [{lo}, {hi}]"
                    )));
                }
                let mut rng = SatRng::new(seed);
                (0..n).map(|_| T::of(rng.uniform(lo, hi))).collect()
            }
        };
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, FillKind::Zeros)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::create(shape, FillKind::Ones)
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        Self::create(shape, FillKind::Constant(v))
    }

    /// Glorot/Xavier uniform initialisation, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(fan_in: usize, fan_out: usize, shape: &[usize], seed: u64) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::InvalidArgument("xavier fans must be positive".into()));
        }
        let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::create(shape, FillKind::Uniform { lo: -b, hi: b, seed })
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
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<T>> {
        self.0.grad_fn.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    /// Same storage, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// Same storage as a fresh leaf.
    pub fn into_leaf(self, requires_grad: bool) -> Self {
        Self::from_parts(self.0.shape.clone(), Arc::clone(&self.0.data), requires_grad, None)
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.0.shape.clone(),
            Arc::new(self.0.data.iter().map(|v| U::of(v.as_f64())).collect()),
            false,
            None,
        )
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::InvalidShape(s.to_vec(), "expected (N, C, H, W)")),
        }
    }

    /// Build an operation output. The backward rule is attached only when
    /// recording is enabled and some input requires a gradient.
    pub(crate) fn record(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        if finite_checks() && !data.iter().all(|v| v.is_finite()) {
            panic!("non-finite output from `{op}` (shape {shape:?})");
        }
        OP_COUNT.with(|c| c.set(c.get() + 1));
        let requires_grad = tape::grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            op,
            inputs,
            backward: Box::new(backward),
        });
        Self::from_parts(shape, Arc::new(data), requires_grad, grad_fn)
    }
}

/// Number of operations executed on this thread so far.
pub fn op_count() -> u64 {
    OP_COUNT.with(|c| c.get())
}
