//! A small differentiable-compute core.
//!
//! Only seven operation kinds exist ([`OpKind`]); the network is expressed
//! exclusively in them. Every op exposes a stateless `forward_cached` /
//! `backward` pair used by the model, and also implements
//! [`DifferentiableOp`], which keeps the cache internally for callers that
//! want the forward-then-backward calling convention.
//!
//! Values are generic over [`Scalar`] so the same code runs in `f32` for
//! training and inference and in `f64` for finite-difference checks.

pub mod checkpoint;
mod concat;
mod conv3d;
mod gemm;
pub mod gradcheck;
mod linear;
mod norm;
mod pool;
mod relu;
mod tensor;
mod trilinear;

pub use concat::{concat_broadcast_channels, Concat};
pub use conv3d::{Conv3d, Conv3dCache};
pub use gemm::gemm;
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm3d, BatchNormCache, BN_EPS, BN_MOMENTUM};
pub use pool::MaxPoolOverPoints;
pub use relu::{relu, relu_backward, relu_backward_in_place, Relu};
pub use tensor::Tensor;
pub use trilinear::{sample_trilinear, sample_trilinear_backward, TrilinearSample};

use crate::Result;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + 'static
{
    const DTYPE: DType;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn lit(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn lit(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// The supported operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Linear,
    Conv3d,
    BatchNorm3d,
    Relu,
    MaxPoolOverPoints,
    TrilinearSample,
    Concat,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Linear,
        OpKind::Conv3d,
        OpKind::BatchNorm3d,
        OpKind::Relu,
        OpKind::MaxPoolOverPoints,
        OpKind::TrilinearSample,
        OpKind::Concat,
    ];
}

/// Gradients of a scalar objective with respect to an op's inputs (in input
/// order) and parameters (in [`DifferentiableOp::params`] order).
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub inputs: Vec<Tensor<T>>,
    pub params: Vec<Tensor<T>>,
}

pub trait DifferentiableOp<T: Scalar> {
    fn kind(&self) -> OpKind;

    /// Evaluates the op and caches whatever `backward` needs.
    fn forward(&mut self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    /// Gradients given the upstream gradient of the last `forward` output.
    fn backward(&self, upstream: &Tensor<T>) -> Result<Gradients<T>>;

    fn params(&self) -> Vec<&Tensor<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        Vec::new()
    }
}

pub(crate) fn not_run() -> crate::Error {
    crate::Error::InvalidState("backward called before forward".into())
}
