//! A small dense tensor engine with the layers a DCGAN needs.
//!
//! Every layer implements its backward pass analytically. Parameter gradients
//! are produced per sample and folded into `f64` accumulators through a
//! [`Reduction`], which lets DP-SGD observe and reweight per-sample gradients
//! without materialising them.
//!
//! Tensors are generic over [`Scalar`]: `f64` for gradient checks, `f32` for
//! training.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

mod checkpoint;
mod gradcheck;
mod layers;
mod ops;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{adjointness_gap, grad_check, grad_check_with, run_suite, standard_suite, GradCheckReport};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, GroupNorm, Layer, LayerSpec, Linear, Sequential};
pub use ops::{conv2d_forward, conv_transpose2d_forward, Conv2dGeometry};
pub use optim::{Adam, AdamConfig, MultiStepLr};

/// Floating point element type of a tensor.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static {
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` on row-major matrices with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the strides describe dense matrices inside the
                // slices checked above; `c` is uniquely borrowed.
                unsafe {
                    $gemm(
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
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// `c (m x n) = op(a) * op(b) + beta * c` for dense row-major storage.
///
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is stored `k x n`
/// (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Size of one sample (all dimensions after the first).
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Shape {
                op,
                expected: vec![rank],
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<f64>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.numel();
        Param {
            name: name.into(),
            value,
            grad: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// How per-sample parameter gradients are folded into accumulators.
///
/// Layers call [`Reduction::push`] once per parameter and sample, in
/// increasing sample order.
pub enum Reduction<'a> {
    /// Add every per-sample gradient to the parameter's accumulator.
    Sum,
    /// Leave parameter gradients untouched.
    Discard,
    /// Only accumulate per-sample squared L2 norms.
    SampleNorms(&'a mut [f64]),
    /// Add `weights[b]` times the sample gradient and record the squared norm
    /// of the weighted contribution.
    Weighted { weights: &'a [f64], post_sq: &'a mut [f64] },
}

impl Reduction<'_> {
    pub fn push<T: Scalar>(&mut self, grad: &mut [f64], sample: usize, partial: &[T]) {
        debug_assert_eq!(grad.len(), partial.len());
        match self {
            Reduction::Sum => {
                for (g, p) in grad.iter_mut().zip(partial) {
                    *g += p.as_f64();
                }
            }
            Reduction::Discard => {}
            Reduction::SampleNorms(norms) => {
                norms[sample] += partial.iter().map(|p| p.as_f64() * p.as_f64()).sum::<f64>();
            }
            Reduction::Weighted { weights, post_sq } => {
                let w = weights[sample];
                let mut sq = 0.0;
                for (g, p) in grad.iter_mut().zip(partial) {
                    let v = w * p.as_f64();
                    *g += v;
                    sq += v * v;
                }
                post_sq[sample] += sq;
            }
        }
    }

    pub fn wants_params(&self) -> bool {
        !matches!(self, Reduction::Discard)
    }
}
