//! Thin SVD by one-sided (Hestenes) Jacobi rotations in `f64`.
//!
//! The shorter dimension is orthogonalised: for `w: p × q` with `p ≤ q` the
//! rows of `w` are rotated pairwise until mutually orthogonal, the rotations
//! accumulating into `J` with `J·w = diag(σ)·vt`, hence `u = Jᵀ`. Wide and
//! tall inputs are handled by transposition. Pairs are visited in cyclic
//! `(i, j)` order, so the output is a pure function of the input bits.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Upper bound on cyclic sweeps before reporting non-convergence.
pub const MAX_SWEEPS: usize = 80;

/// Singular values below `NULL_REL · σ_max` have their right singular vector
/// rebuilt by Gram-Schmidt completion instead of normalisation.
const NULL_REL: f64 = 1e-10;

/// `w = u · diag(sigma) · vt` with `r = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    pub u: Tensor,
    pub sigma: Vec<f32>,
    pub vt: Tensor,
}

/// `f64` factorisation in row-major buffers, for internal consumers that
/// need full precision.
#[derive(Clone, Debug)]
pub(crate) struct SvdF64 {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    /// `rows × rank`
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `rank × cols`
    pub vt: Vec<f64>,
}

pub fn svd_thin(w: &Tensor) -> Result<Svd> {
    let (rows, cols) = w.dims2()?;
    w.ensure_finite("svd_thin input")?;
    let data: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let f = svd_thin_f64(&data, rows, cols)?;
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    Ok(Svd {
        u: Tensor::new([rows, f.rank], to32(&f.u))?,
        sigma: to32(&f.sigma),
        vt: Tensor::new([f.rank, cols], to32(&f.vt))?,
    })
}

pub(crate) fn svd_thin_f64(w: &[f64], rows: usize, cols: usize) -> Result<SvdF64> {
    if rows == 0 || cols == 0 || w.len() != rows * cols {
        return Err(Error::dim(format!("svd of {rows}x{cols} with {} values", w.len())));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("svd input has non-finite value at {i}")));
    }
    let mut out = if rows <= cols {
        let (j, s, v) = jacobi_rows(w.to_vec(), rows, cols)?;
        // u = Jᵀ
        let mut u = vec![0.0; rows * rows];
        for i in 0..rows {
            for k in 0..rows {
                u[k * rows + i] = j[i * rows + k];
            }
        }
        SvdF64 {
            rows,
            cols,
            rank: rows,
            u,
            sigma: s,
            vt: v,
        }
    } else {
        let mut wt = vec![0.0; rows * cols];
        for i in 0..rows {
            for k in 0..cols {
                wt[k * rows + i] = w[i * cols + k];
            }
        }
        // wᵀ = Jᵀ Σ V'  ⇒  w = V'ᵀ Σ J
        let (j, s, v) = jacobi_rows(wt, cols, rows)?;
        let mut u = vec![0.0; rows * cols];
        for k in 0..cols {
            for i in 0..rows {
                u[i * cols + k] = v[k * rows + i];
            }
        }
        SvdF64 {
            rows,
            cols,
            rank: cols,
            u,
            sigma: s,
            vt: j,
        }
    };
    apply_sign_convention(&mut out);
    Ok(out)
}

/// Orthogonalises the `p` rows of `a` (`p × q`, `p ≤ q`). Returns
/// `(J, σ, V)` sorted by descending σ where `J·a_original = diag(σ)·V`,
/// `J` is `p × p` orthogonal and `V` has orthonormal rows.
fn jacobi_rows(mut a: Vec<f64>, p: usize, q: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut j = vec![0.0; p * p];
    for i in 0..p {
        j[i * p + i] = 1.0;
    }
    let tol = (q as f64 * f64::EPSILON).max(1e-14);
    let mut converged = p < 2;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..p - 1 {
            for k in i + 1..p {
                let (ri, rk) = two_rows(&mut a, q, i, k);
                let (alpha, beta, gamma) = dots3(ri, rk);
                if alpha <= f64::MIN_POSITIVE || beta <= f64::MIN_POSITIVE {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ri, rk, c, s);
                let (ji, jk) = two_rows(&mut j, p, i, k);
                rotate(ji, jk, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Convergence(format!(
            "one-sided Jacobi did not converge within {MAX_SWEEPS} sweeps ({p}x{q})"
        )));
    }

    let norms: Vec<f64> = (0..p)
        .map(|i| a[i * q..(i + 1) * q].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    // Stable: equal σ keep their row order.
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let mut sigma = Vec::with_capacity(p);
    let mut v = vec![0.0; p * q];
    let mut js = vec![0.0; p * p];
    let mut null_rows = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        js[dst * p..(dst + 1) * p].copy_from_slice(&j[src * p..(src + 1) * p]);
        if s > NULL_REL * smax && s > 0.0 {
            for (o, &x) in v[dst * q..(dst + 1) * q].iter_mut().zip(&a[src * q..(src + 1) * q]) {
                *o = x / s;
            }
        } else {
            null_rows.push(dst);
        }
    }
    complete_orthonormal_rows(&mut v, p, q, &null_rows);
    Ok((js, sigma, v))
}

/// Fills `targets` rows of `v` with unit vectors orthogonal to every other
/// row, drawn from the standard basis by Gram-Schmidt in index order.
fn complete_orthonormal_rows(v: &mut [f64], p: usize, q: usize, targets: &[usize]) {
    if targets.is_empty() {
        return;
    }
    let mut filled: Vec<usize> = (0..p).filter(|r| !targets.contains(r)).collect();
    let mut candidate = 0usize;
    for &t in targets {
        loop {
            assert!(candidate < q, "basis completion ran out of candidates");
            let mut e = vec![0.0; q];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of classical Gram-Schmidt.
            for _ in 0..2 {
                for &r in &filled {
                    let row = &v[r * q..(r + 1) * q];
                    let d: f64 = row.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (x, &y) in e.iter_mut().zip(row) {
                        *x -= d * y;
                    }
                }
            }
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.5 {
                for (o, x) in v[t * q..(t + 1) * q].iter_mut().zip(&e) {
                    *o = x / n;
                }
                filled.push(t);
                break;
            }
        }
    }
}

/// Flips each `vt` row (and the matching `u` column) so that its
/// largest-magnitude entry is positive; ties go to the lowest index.
fn apply_sign_convention(f: &mut SvdF64) {
    for k in 0..f.rank {
        let row = &f.vt[k * f.cols..(k + 1) * f.cols];
        let mut best = 0usize;
        for (idx, x) in row.iter().enumerate() {
            if x.abs() > row[best].abs() {
                best = idx;
            }
        }
        if row[best] < 0.0 {
            for x in &mut f.vt[k * f.cols..(k + 1) * f.cols] {
                *x = -*x;
            }
            for i in 0..f.rows {
                f.u[i * f.rank + k] = -f.u[i * f.rank + k];
            }
        }
    }
}

fn two_rows(a: &mut [f64], q: usize, i: usize, k: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < k);
    let (lo, hi) = a.split_at_mut(k * q);
    (&mut lo[i * q..(i + 1) * q], &mut hi[..q])
}

/// `(‖x‖², ‖y‖², x·y)` with four interleaved accumulators per quantity.
fn dots3(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut xx = [0.0f64; 4];
    let mut yy = [0.0f64; 4];
    let mut xy = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            let a = x[c * 4 + l];
            let b = y[c * 4 + l];
            xx[l] += a * a;
            yy[l] += b * b;
            xy[l] += a * b;
        }
    }
    for idx in chunks * 4..x.len() {
        let (a, b) = (x[idx], y[idx]);
        xx[0] += a * a;
        yy[0] += b * b;
        xy[0] += a * b;
    }
    let s = |v: [f64; 4]| (v[0] + v[1]) + (v[2] + v[3]);
    (s(xx), s(yy), s(xy))
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}
