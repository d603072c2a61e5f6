//! Dense kernels shared by the tape's forward and backward rules.

use crate::error::{Error, Result};
use crate::par::{self, Exec};

use super::Tensor;

/// Diagonal jitter levels tried in order when a Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_with(Exec::default(), a, b)
}

/// `a @ b`, parallel over output rows.
pub fn matmul_with(exec: Exec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(Error::shape(format!("matmul: {m}x{k} @ {k2}x{n}")));
    }
    let mut out = Tensor::zeros(m, n);
    let ad = a.data();
    let bd = b.data();
    par::fill_rows(exec.for_work(m * n * k), out.data_mut(), n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
    Ok(out)
}

/// `aᵀ @ b` without materializing the transpose of `a`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(&a.transpose(), b)
}

/// `a @ bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims();
    let (n, k2) = b.dims();
    if k != k2 {
        return Err(Error::shape(format!("matmul_nt: {m}x{k} @ ({n}x{k2})ᵀ")));
    }
    let mut out = Tensor::zeros(m, n);
    let ad = a.data();
    let bd = b.data();
    par::fill_rows(Exec::default().for_work(m * n * k), out.data_mut(), n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    Ok(out)
}

pub fn sqdist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    sqdist_with(Exec::default(), a, b)
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub fn sqdist_with(exec: Exec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, s) = a.dims();
    let (nb, s2) = b.dims();
    if s != s2 {
        return Err(Error::shape(format!("sqdist: feature widths {s} and {s2} differ")));
    }
    let mut out = Tensor::zeros(na, nb);
    let ad = a.data();
    let bd = b.data();
    par::fill_rows(exec.for_work(na * nb * s), out.data_mut(), nb, |i, row| {
        let arow = &ad[i * s..(i + 1) * s];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * s..(j + 1) * s];
            *o = arow.iter().zip(brow).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    });
    Ok(out)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, n2) = a.dims();
    if n != n2 {
        return Err(Error::shape(format!("cholesky of {n}x{n2} matrix")));
    }
    let mut l = Tensor::zeros(n, n);
    let ad = a.data();
    let ld = l.data_mut();
    for j in 0..n {
        let mut d = ad[j * n + j];
        for k in 0..j {
            d -= ld[j * n + k] * ld[j * n + k];
        }
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::numeric(format!(
                "matrix not positive definite (pivot {d:e} at {j})"
            )));
        }
        let djj = d.sqrt();
        ld[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = ad[i * n + j];
            for k in 0..j {
                s -= ld[i * n + k] * ld[j * n + k];
            }
            ld[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky with the diagonal jitter ladder. Levels below `min_jitter` are
/// skipped; returns the factor and the jitter that succeeded.
pub fn cholesky_jittered(a: &Tensor, min_jitter: f64) -> Result<(Tensor, f64)> {
    let n = a.rows();
    let mut levels: Vec<f64> = vec![min_jitter];
    levels.extend(JITTER_LADDER.iter().copied().filter(|&j| j > min_jitter));
    let mut last = None;
    for jitter in levels {
        let attempt = if jitter == 0.0 {
            cholesky(a)
        } else {
            let mut shifted = a.clone();
            for i in 0..n {
                let v = shifted.get(i, i);
                shifted.set(i, i, v + jitter);
            }
            cholesky(&shifted)
        };
        match attempt {
            Ok(l) => {
                if jitter > min_jitter {
                    log::debug!("cholesky needed jitter {jitter:e}");
                }
                return Ok((l, jitter));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last
        .unwrap_or_else(|| Error::numeric("cholesky failed"))
        .with_context("cholesky failed after maximum jitter"))
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = l.dims();
    let (nb, m) = b.dims();
    if n != n2 || n != nb {
        return Err(Error::shape(format!("solve_lower: L {n}x{n2}, B {nb}x{m}")));
    }
    let mut x = b.clone();
    let ld = l.data();
    let xd = x.data_mut();
    for i in 0..n {
        for k in 0..i {
            let lik = ld[i * n + k];
            if lik != 0.0 {
                for c in 0..m {
                    xd[i * m + c] -= lik * xd[k * m + c];
                }
            }
        }
        let d = ld[i * n + i];
        for c in 0..m {
            xd[i * m + c] /= d;
        }
    }
    Ok(x)
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_t(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, n2) = l.dims();
    let (nb, m) = b.dims();
    if n != n2 || n != nb {
        return Err(Error::shape(format!("solve_lower_t: L {n}x{n2}, B {nb}x{m}")));
    }
    let mut x = b.clone();
    let ld = l.data();
    let xd = x.data_mut();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = ld[k * n + i];
            if lki != 0.0 {
                for c in 0..m {
                    xd[i * m + c] -= lki * xd[k * m + c];
                }
            }
        }
        let d = ld[i * n + i];
        for c in 0..m {
            xd[i * m + c] /= d;
        }
    }
    Ok(x)
}

/// `A⁻¹ B` given the Cholesky factor of `A`.
pub fn cho_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    solve_lower_t(l, &solve_lower(l, b)?)
}

/// Zero the strict upper triangle.
pub fn tril(a: &Tensor) -> Tensor {
    let (n, m) = a.dims();
    let mut out = a.clone();
    for i in 0..n {
        for j in (i + 1)..m {
            out.set(i, j, 0.0);
        }
    }
    out
}

pub fn log_det_from_cholesky(l: &Tensor) -> f64 {
    (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0
}
