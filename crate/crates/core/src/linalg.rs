//! Dense symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! The evaluation measurements need right singular vectors and singular value
//! spectra of feature matrices. Those reduce to eigendecompositions of the
//! (column-dimension sized) Gram matrix, which at desk scale is tiny, so a
//! self-contained Jacobi sweep beats pulling in a LAPACK binding. Convergence
//! is quadratic; a few dozen sweeps reach machine precision.

use crate::error::{Error, Result};
use crate::scalar::{real, Scalar};
use ndarray::{Array1, Array2};

/// Eigenvalues (descending) and matching eigenvectors (as columns) of a
/// symmetric matrix.
pub struct SymEigen<F> {
    pub values: Array1<F>,
    pub vectors: Array2<F>,
}

/// Decomposes a symmetric matrix. Symmetry is the caller's contract; only the
/// upper triangle participates in the rotations, but inputs that are far from
/// symmetric are rejected.
pub fn sym_eigen<F: Scalar>(a: &Array2<F>) -> Result<SymEigen<F>> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("sym_eigen matrix"));
    }
    if a.ncols() != n {
        return Err(Error::dims("sym_eigen", format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    let scale = a.iter().fold(F::zero(), |m, v| m.max(v.abs()));
    let sym_tol = real::<F>(1e-6) * scale.max(F::one());
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > sym_tol {
                return Err(Error::InvalidParameter(format!(
                    "sym_eigen input not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let mut m = a.clone();
    let mut v = Array2::<F>::eye(n);
    let tol = F::epsilon() * scale.max(F::one()) * real::<F>(n as f64);
    for _sweep in 0..64 {
        let mut off = F::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * real::<F>(1e-3) {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (real::<F>(2.0) * apq);
                let t = {
                    let s = if theta >= F::zero() { F::one() } else { -F::one() };
                    s / (theta.abs() + (theta * theta + F::one()).sqrt())
                };
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;

                let app = m[[p, p]];
                let aqq = m[[q, q]];
                m[[p, p]] = app - t * apq;
                m[[q, q]] = aqq + t * apq;
                m[[p, q]] = F::zero();
                m[[q, p]] = F::zero();
                for k in 0..n {
                    if k != p && k != q {
                        let akp = m[[k, p]];
                        let akq = m[[k, q]];
                        m[[k, p]] = c * akp - s * akq;
                        m[[p, k]] = m[[k, p]];
                        m[[k, q]] = s * akp + c * akq;
                        m[[q, k]] = m[[k, q]];
                    }
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]].partial_cmp(&m[[i, i]]).expect("finite eigenvalues")
    });
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<F>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[[k, new_col]] = v[[k, old_col]];
        }
    }
    Ok(SymEigen { values, vectors })
}
