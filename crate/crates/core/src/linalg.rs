//! Dense symmetric-matrix routines for covariance descriptors. Matrices are
//! square, row-major `Vec<f64>` of side `d`.

use sarnn::matmul::{gemm, View};
use thiserror::Error;

/// Eigenvalues below this are clamped before taking logarithms.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Relative asymmetry tolerated by [`matrix_log`].
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("covariance needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("expected {want} values for a {d}x{d} matrix, got {got}")]
    Size { d: usize, want: usize, got: usize },
    #[error("eigen-solver did not converge")]
    NoConvergence,
}

fn check_square(a: &[f64], d: usize) -> Result<(), LinalgError> {
    if a.len() != d * d {
        return Err(LinalgError::Size { d, want: d * d, got: a.len() });
    }
    Ok(())
}

/// Sample covariance `(1/(n-1)) sum_l (z_l - mu)(z_l - mu)^T` of `n`
/// observations of `d` variables stored variable-major (`data[j * n + l]`).
pub fn covariance(data: &[f64], n: usize, d: usize) -> Result<Vec<f64>, LinalgError> {
    if n < 2 {
        return Err(LinalgError::TooFewObservations(n));
    }
    if data.len() != n * d {
        return Err(LinalgError::Size { d, want: n * d, got: data.len() });
    }
    let mut centered = data.to_vec();
    for col in centered.chunks_mut(n) {
        // shifting by the first value first makes constant columns exactly zero
        let first = col[0];
        col.iter_mut().for_each(|v| *v -= first);
        let mu = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|v| *v -= mu);
    }
    let mut c = vec![0.0; d * d];
    gemm(
        1.0 / (n - 1) as f64,
        View::new(&centered, d, n),
        View::transposed(&centered, d, n),
        0.0,
        &mut c,
        d,
    );
    symmetrize_from_upper(&mut c, d);
    Ok(c)
}

fn symmetrize_from_upper(a: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..i {
            a[i * d + j] = a[j * d + i];
        }
    }
}

pub fn trace(a: &[f64], d: usize) -> f64 {
    (0..d).map(|i| a[i * d + i]).sum()
}

/// Shift by `lambda = max(1e-6 * trace / d, 1e-12)` on the diagonal.
/// Returns the shifted matrix and `lambda`.
pub fn regularize(c: &[f64], d: usize) -> (Vec<f64>, f64) {
    let lambda = (1e-6 * trace(c, d) / d as f64).max(1e-12);
    let mut out = c.to_vec();
    for i in 0..d {
        out[i * d + i] += lambda;
    }
    (out, lambda)
}

pub fn check_symmetric(a: &[f64], d: usize) -> Result<(), LinalgError> {
    check_square(a, d)?;
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..d {
        for j in 0..i {
            let gap = (a[i * d + j] - a[j * d + i]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(LinalgError::NotSymmetric { i, j, gap });
            }
        }
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix by Householder reduction to
/// tridiagonal form followed by the implicit QL algorithm. Returns ascending
/// eigenvalues and the eigenvectors as the columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    check_square(a, d)?;
    let mut v = a.to_vec();
    let mut e = vec![0.0; d];
    let mut w = vec![0.0; d];
    if d == 0 {
        return Ok((w, v));
    }
    tridiagonalize(&mut v, &mut w, &mut e, d);
    ql_implicit(&mut v, &mut w, &mut e, d)?;
    Ok((w, v))
}

fn tridiagonalize(v: &mut [f64], dg: &mut [f64], e: &mut [f64], n: usize) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        dg[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += dg[k].abs();
        }
        if scale == 0.0 {
            e[i] = dg[i - 1];
            for j in 0..i {
                dg[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                dg[k] /= scale;
                h += dg[k] * dg[k];
            }
            let mut f = dg[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            dg[i - 1] = f - g;
            for j in 0..i {
                e[j] = 0.0;
            }
            for j in 0..i {
                f = dg[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * dg[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * dg[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * dg[j];
            }
            for j in 0..i {
                f = dg[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * dg[k];
                }
                dg[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        dg[i] = h;
    }
    // accumulate the transformations
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = dg[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                dg[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * dg[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        dg[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

fn ql_implicit(v: &mut [f64], dg: &mut [f64], e: &mut [f64], n: usize) -> Result<(), LinalgError> {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(dg[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(LinalgError::NoConvergence);
                }
                let mut g = dg[l];
                let mut p = (dg[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                dg[l] = e[l] / (p + r);
                dg[l + 1] = e[l] * (p + r);
                let dl1 = dg[l + 1];
                let mut h = g - dg[l];
                for i in l + 2..n {
                    dg[i] -= h;
                }
                f += h;
                p = dg[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * dg[i] - s * g;
                    dg[i + 1] = h + s * (c * g + s * dg[i]);
                    for k in 0..n {
                        h = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * h;
                        v[at(k, i)] = c * v[at(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                dg[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        dg[l] += f;
        e[l] = 0.0;
    }
    // ascending order, permuting eigenvector columns along
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = dg[i];
        for j in i + 1..n {
            if dg[j] < p {
                k = j;
                p = dg[j];
            }
        }
        if k != i {
            dg[k] = dg[i];
            dg[i] = p;
            for j in 0..n {
                v.swap(at(j, i), at(j, k));
            }
        }
    }
    Ok(())
}

/// `Q f(L) Q^T` for a symmetric matrix with eigen-decomposition `Q L Q^T`.
pub fn spectral_map(a: &[f64], d: usize, f: impl Fn(f64) -> f64) -> Result<Vec<f64>, LinalgError> {
    let (vals, q) = symmetric_eigen(a, d)?;
    let fv: Vec<f64> = vals.iter().map(|&l| f(l)).collect();
    // scaled = Q diag(f), out = scaled Q^T
    let mut scaled = q.clone();
    for row in scaled.chunks_mut(d) {
        for (x, s) in row.iter_mut().zip(&fv) {
            *x *= s;
        }
    }
    let mut out = vec![0.0; d * d];
    gemm(1.0, View::new(&scaled, d, d), View::transposed(&q, d, d), 0.0, &mut out, d);
    symmetrize_from_upper(&mut out, d);
    Ok(out)
}

/// Logarithm of a symmetric positive-definite matrix; eigenvalues are
/// clamped at [`EIGEN_FLOOR`].
pub fn matrix_log(c: &[f64], d: usize) -> Result<Vec<f64>, LinalgError> {
    check_symmetric(c, d)?;
    spectral_map(c, d, |l| l.max(EIGEN_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_of_identity_and_diagonal() {
        let id = vec![1.0, 0.0, 0.0, 1.0];
        assert!(matrix_log(&id, 2).unwrap().iter().all(|v| v.abs() < 1e-15));
        let diag = vec![std::f64::consts::E.powi(2), 0.0, 0.0, 1.0];
        let l = matrix_log(&diag, 2).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-14 && l[1].abs() < 1e-15 && l[3].abs() < 1e-15);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        assert!(matches!(matrix_log(&[1.0, 0.5, 0.0, 1.0], 2), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn antithetic_columns_have_negative_covariance() {
        let x = [0.1, 0.4, 0.7, 0.2];
        let mut data = x.to_vec();
        data.extend(x.iter().map(|v| 1.0 - v));
        let c = covariance(&data, 4, 2).unwrap();
        assert!((c[1] + c[0]).abs() < 1e-15 && (c[2] + c[3]).abs() < 1e-15);
        assert!((c[0] - 0.07).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_regularizes_to_floor() {
        let (r, lambda) = regularize(&[0.0; 4], 2);
        assert_eq!(lambda, 1e-12);
        assert_eq!(r, vec![1e-12, 0.0, 0.0, 1e-12]);
    }

    #[test]
    fn eigenpairs_of_a_small_matrix() {
        let a = vec![2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let (vals, q) = symmetric_eigen(&a, 3).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14 && (vals[2] - 5.0).abs() < 1e-14);
        for k in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i * 3 + j] * q[j * 3 + k]).sum();
                assert!((av - vals[k] * q[i * 3 + k]).abs() < 1e-14);
            }
        }
    }
}
