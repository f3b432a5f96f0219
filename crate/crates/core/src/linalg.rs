//! Small dense linear algebra: Gaussian elimination and a Jacobi
//! eigensolver for symmetric matrices. Sizes here are tiny (TPS systems
//! of ~K+3, feature covariances of 64), so simplicity wins.

use crate::error::{Error, Result};

/// Solve A X = B in place for X, where `a` is n×n and `b` is n×m,
/// both row-major. Partial pivoting; fails on (near-)singular systems.
pub fn solve(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n * m);
    for col in 0..n {
        // Pivot
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-10 {
            return Err(Error::param(format!(
                "singular linear system (pivot {best:.3e} at column {col})"
            )));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, piv * m + j);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            for j in 0..m {
                b[r * m + j] -= f * b[col * m + j];
            }
        }
    }
    // Back substitution
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..m {
            let mut s = b[col * m + j];
            for kk in col + 1..n {
                s -= a[col * n + kk] * b[kk * m + j];
            }
            b[col * m + j] = s / d;
        }
    }
    Ok(())
}

/// Eigendecomposition of a symmetric n×n matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns of V): A = V diag(w) V^T.
pub fn sym_eig(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m, n)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/cols p,q of m
                for kk in 0..n {
                    let mkp = m[kk * n + p];
                    let mkq = m[kk * n + q];
                    m[kk * n + p] = c * mkp - s * mkq;
                    m[kk * n + q] = s * mkp + c * mkq;
                }
                for kk in 0..n {
                    let mpk = m[p * n + kk];
                    let mqk = m[q * n + kk];
                    m[p * n + kk] = c * mpk - s * mqk;
                    m[q * n + kk] = s * mpk + c * mqk;
                }
                for kk in 0..n {
                    let vkp = v[kk * n + p];
                    let vkq = v[kk * n + q];
                    v[kk * n + p] = c * vkp - s * vkq;
                    v[kk * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let w: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (w, v)
}

fn frobenius(m: &[f64], n: usize) -> f64 {
    m.iter().take(n * n).map(|x| x * x).sum::<f64>().sqrt()
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// (numerical noise) are clamped at zero.
pub fn sym_sqrt(a: &[f64], n: usize) -> Vec<f64> {
    let (w, v) = sym_eig(a, n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..n {
                s += v[i * n + kk] * w[kk].max(0.0).sqrt() * v[j * n + kk];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for kk in 0..n {
            let av = a[i * n + kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += av * b[kk * n + j];
            }
        }
    }
    c
}
