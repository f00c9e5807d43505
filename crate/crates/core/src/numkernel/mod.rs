//! Dense linear algebra, random numbers, SVD and the AdamW step.

mod adamw;
pub mod gemm;
mod rng;
mod svd;
mod tensor;

pub use adamw::{adamw_step, adamw_update, AdamWParams, AdamWState};
pub use gemm::Scalar;
pub use rng::{rng_normal, Rng};
pub use svd::{svd_thin, Svd, MAX_SWEEPS};
#[allow(unused_imports)]
pub(crate) use svd::svd_thin_f64;
pub use tensor::{relative_frobenius_error, Tensor};

use crate::error::{Error, Result};

/// Matrix product `a · b`.
///
/// Operands are widened to `f64` and multiplied with the strided kernel in
/// [`gemm`]; each output element is summed over the inner index in the
/// kernel's fixed blocked order, then rounded to `f32`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul: {m}x{k} · {k2}x{n} inner dimensions differ"
        )));
    }
    let a64: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let mut c = vec![0.0f64; m * n];
    gemm::gemm(
        gemm::Op::N,
        &a64,
        m,
        k,
        gemm::Op::N,
        &b64,
        k,
        n,
        1.0,
        0.0,
        &mut c,
    );
    let out = Tensor::from_f64([m, n], &c);
    match out {
        Err(Error::Numeric(msg)) => Err(Error::numeric(format!("matmul overflow: {msg}"))),
        other => other,
    }
}
