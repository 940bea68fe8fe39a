//! Dense symmetric linear algebra for the back-end: cyclic Jacobi
//! eigendecomposition and small matrix helpers. Row-major throughout.

use crate::error::{Error, Result};

/// Eigenvalues (descending) and eigenvectors (column j of `vectors` pairs
/// with `values[j]`).
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub dim: usize,
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
/// Input must be symmetric.
pub fn jacobi_eigen(a: &[f64], n: usize) -> Result<SymEigen> {
    if a.len() != n * n {
        return Err(Error::BadShape {
            op: "jacobi_eigen",
            shape: vec![n, n],
            reason: format!("data length {}", a.len()),
        });
    }
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-8 * (1.0 + a[i * n + j].abs()) {
                return Err(Error::BadShape {
                    op: "jacobi_eigen",
                    shape: vec![n, n],
                    reason: format!("not symmetric at ({i},{j})"),
                });
            }
        }
    }

    let mut m = a.to_vec();
    // Symmetrize exactly so rotations stay consistent.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = (1e-14 * frob).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort descending by eigenvalue, permuting eigenvector columns.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let mut values = Vec::with_capacity(n);
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        values.push(m[src * n + src]);
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        dim: n,
    })
}

/// `a (r x k) * b (k x c)`.
pub fn mat_mul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..c {
                out[i * c + j] += aip * b[p * c + j];
            }
        }
    }
    out
}

pub fn mat_transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// `y = At x` for a (r x c) matrix: projects x (len r) onto the c columns.
pub fn mat_t_vec(a: &[f64], r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..r {
        let xi = x[i];
        for j in 0..c {
            out[j] += a[i * c + j] * xi;
        }
    }
    out
}

/// Accumulate the outer product `acc += w * (x - mu)(x - mu)t`.
pub fn scatter_acc(acc: &mut [f64], x: &[f64], mu: &[f64], w: f64) {
    let n = x.len();
    for i in 0..n {
        let di = x[i] - mu[i];
        for j in 0..n {
            acc[i * n + j] += w * di * (x[j] - mu[j]);
        }
    }
}
