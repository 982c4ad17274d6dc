//! Small dense kernels: one-sided Jacobi SVD and Cholesky factorizations.
//!
//! Everything here runs in f64; callers convert to f32 at the boundary.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{QuantError, Result};

const JACOBI_MAX_SWEEPS: usize = 80;
const JACOBI_TOL: f64 = 1e-13;

/// Left singular basis of a `c × n` matrix.
#[derive(Clone, Debug)]
pub struct LeftSvd {
    /// `c × c` orthogonal matrix; column `i` pairs with `singular_values[i]`.
    pub u: Array2<f64>,
    /// Descending, non-negative; length `c` (zero-padded when rank < c).
    pub singular_values: Vec<f64>,
}

/// Upper-triangular R of a Householder QR of `m` (rows ≥ cols), `cols × cols`.
fn householder_r(mut m: Array2<f64>) -> Array2<f64> {
    let (rows, cols) = m.dim();
    for k in 0..cols {
        let norm = m.slice(s![k.., k]).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if m[[k, k]] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = m.slice(s![k.., k]).to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..cols {
            let dot: f64 = (k..rows).map(|i| v[i - k] * m[[i, j]]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..rows {
                m[[i, j]] -= f * v[i - k];
            }
        }
    }
    let mut r = Array2::zeros((cols, cols));
    for i in 0..cols {
        for j in i..cols {
            r[[i, j]] = m[[i, j]];
        }
    }
    r
}

/// One-sided (Hestenes) Jacobi on the rows of `b`, accumulating the left basis.
///
/// On return the rows of `b` are mutually orthogonal and `b = uᵀ · b_in`.
fn jacobi_rows(b: &mut Array2<f64>) -> Result<Array2<f64>> {
    let c = b.nrows();
    let mut u = Array2::<f64>::eye(c);
    let scale: f64 = b.iter().map(|v| v * v).sum();
    let negligible = scale * f64::EPSILON * f64::EPSILON;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..c {
            for j in (i + 1)..c {
                let (alpha, beta, gamma) = {
                    let ri = b.row(i);
                    let rj = b.row(j);
                    (ri.dot(&ri), rj.dot(&rj), ri.dot(&rj))
                };
                if gamma == 0.0 || alpha <= negligible || beta <= negligible || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for k in 0..b.ncols() {
                    let bi = b[[i, k]];
                    let bj = b[[j, k]];
                    b[[i, k]] = cs * bi - sn * bj;
                    b[[j, k]] = sn * bi + cs * bj;
                }
                for k in 0..c {
                    let ui = u[[k, i]];
                    let uj = u[[k, j]];
                    u[[k, i]] = cs * ui - sn * uj;
                    u[[k, j]] = sn * ui + cs * uj;
                }
            }
        }
        if !rotated {
            return Ok(u);
        }
    }
    Err(QuantError::Numeric(format!("Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps")))
}

/// Left singular vectors and singular values of `a` (`c × n`).
///
/// Wide inputs are first reduced to a `c × c` lower-triangular factor
/// (`a = L·Q`), which has the same left basis and spectrum. Columns of `u`
/// are sorted by descending singular value and each column's largest-magnitude
/// entry is made non-negative.
pub fn left_svd(a: ArrayView2<f32>) -> Result<LeftSvd> {
    let (c, n) = a.dim();
    if c == 0 {
        return Err(QuantError::Shape("SVD of an empty block".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::Numeric("SVD input contains non-finite values".into()));
    }
    let a64 = a.mapv(|v| v as f64);
    let mut b = if n > c { householder_r(a64.t().to_owned()).t().to_owned() } else { a64 };
    let u = jacobi_rows(&mut b)?;

    let norms: Vec<f64> = b.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let mut sorted = Array2::<f64>::zeros((c, c));
    for (dst, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        sorted.column_mut(dst).assign(&col.mapv(|v| v * sign));
    }
    Ok(LeftSvd { u: sorted, singular_values: order.iter().map(|&i| norms[i]).collect() })
}

/// In-place lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(QuantError::Numeric(format!("matrix is not positive definite (pivot {j} = {d:e})")));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix.
fn lower_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        inv[[i, i]] = 1.0 / l[[i, i]];
        for j in (0..i).rev() {
            let mut sum = 0.0;
            for k in j..i {
                sum += l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = -sum / l[[i, i]];
        }
    }
    inv
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let l = cholesky_lower(a)?;
    let li = lower_inverse(&l);
    Ok(li.t().dot(&li))
}

/// Upper factor `U` with `a = Uᵀ·U`.
pub fn cholesky_upper(a: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(cholesky_lower(a)?.reversed_axes())
}
