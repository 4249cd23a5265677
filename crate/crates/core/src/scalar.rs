//! Scalar abstraction shared by geometry, losses and the network.
//!
//! Everything numeric in the crate is generic over [`Scalar`], which is
//! implemented for `f32` (training and inference) and `f64` (oracles,
//! gradient checks, coordinate bookkeeping).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point element type usable by every module of the crate.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Short tag written into checkpoints.
    const DTYPE: &'static str;

    /// Lossy conversion from `f64`; never fails for finite inputs.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` on dense row-major buffers.
    ///
    /// `op(a)` is `m x k` and `op(b)` is `k x n`; a transposed operand is
    /// stored in its untransposed shape (`k x m`, `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // stored row-major with shape (rows, cols) unless transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:literal, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs buffer too small");
                assert!(b.len() >= k * n, "gemm: rhs buffer too small");
                assert!(c.len() >= m * n, "gemm: output buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                // SAFETY: bounds asserted above; strides describe dense buffers.
                unsafe {
                    $kernel(
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
