//! Strided general matrix multiply used by every hot path.
//!
//! The kernel is `matrixmultiply` in its single-threaded configuration: for a
//! given CPU each output element is accumulated over `k` in a fixed blocked
//! order that depends only on the operand values, never on neighbouring rows
//! or on scheduling. Two consequences are relied on elsewhere:
//!
//! * repeated calls are bit-identical;
//! * row `i` of `A·B` does not depend on any other row of `A`, so batching
//!   sequences together cannot change any single sequence's result.

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating point element type of the compute engines (`f32` for training,
/// `f64` for finite-difference checks).
pub trait Scalar:
    Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping views
    /// (`c` may not alias `a` or `b`).
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
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
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
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
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
}

/// Operand orientation of a row-major buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Use the buffer as stored (`rows × cols`).
    N,
    /// Use the transpose of the stored buffer.
    T,
}

/// `c = alpha · op(a) · op(b) + beta · c`.
///
/// `a` is stored row-major as `a_rows × a_cols`, likewise `b`; `c` is
/// `m × n` row-major. With `beta == 0` the previous contents of `c` are
/// ignored (NaN-safe).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    op_a: Op,
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    op_b: Op,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    alpha: T,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), a_rows * a_cols, "gemm: a buffer size");
    assert_eq!(b.len(), b_rows * b_cols, "gemm: b buffer size");
    let (m, k, rsa, csa) = match op_a {
        Op::N => (a_rows, a_cols, a_cols as isize, 1),
        Op::T => (a_cols, a_rows, 1, a_cols as isize),
    };
    let (kb, n, rsb, csb) = match op_b {
        Op::N => (b_rows, b_cols, b_cols as isize, 1),
        Op::T => (b_cols, b_rows, 1, b_cols as isize),
    };
    assert_eq!(k, kb, "gemm: inner dimensions disagree");
    assert_eq!(c.len(), m * n, "gemm: c buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    // SAFETY: sizes were checked above and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
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

/// `x · wᵀ` for activations `x: rows × k` and a weight `w: out × k`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, k: usize, w: &[T], out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    gemm(Op::N, x, rows, k, Op::T, w, out, k, T::one(), T::zero(), &mut y);
    y
}

/// Backward of [`linear`]: accumulates `dw += dyᵀ · x` (when `dw` is given)
/// and returns `dx = dy · w`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    k: usize,
    w: &[T],
    out: usize,
    dw: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Vec<T>> {
    if let Some(dw) = dw {
        gemm(Op::T, dy, rows, out, Op::N, x, rows, k, T::one(), T::one(), dw);
    }
    if need_dx {
        let mut dx = vec![T::zero(); rows * k];
        gemm(Op::N, dy, rows, out, Op::N, w, out, k, T::one(), T::zero(), &mut dx);
        Some(dx)
    } else {
        None
    }
}
