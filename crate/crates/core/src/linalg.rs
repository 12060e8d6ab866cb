//! Small dense linear-algebra helpers shared by the fitting code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a direction counts as null.
const NULL_TOL: f64 = 1e-12;

/// Rank-k factorization `X ≈ coeffs · basis` of a row matrix.
#[derive(Debug, Clone)]
pub(crate) struct LowRank {
    /// `rows × k` projections onto the basis.
    pub coeffs: Vec<Vec<f64>>,
    /// `k × dim`; orthonormal rows, zero rows for null directions.
    pub basis: Vec<Vec<f64>>,
    /// Number of non-null directions among the first k.
    pub rank: usize,
    /// `‖X − coeffs · basis‖²`, measured directly.
    pub residual_sq: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Truncated SVD of the rows of `x` (no centring).
///
/// Uses the smaller of the row Gram matrix and the column covariance; ties
/// between equal singular values keep input order.
pub(crate) fn truncated_svd<R: AsRef<[f64]> + Sync>(x: &[R], k: usize) -> LowRank {
    let n = x.len();
    let dim = x.first().map_or(0, |r| r.as_ref().len());
    let mut basis = if n <= dim {
        let gram = DMatrix::from_fn(n, n, |i, j| dot(x[i].as_ref(), x[j].as_ref()));
        let (vals, vecs) = sorted_eigen(gram);
        let mut basis = Vec::with_capacity(k);
        for i in 0..k.min(n) {
            if vals[i] <= NULL_TOL * vals[0].max(0.0) || vals[i] <= 0.0 {
                basis.push(vec![0.0; dim]);
                continue;
            }
            let s = vals[i].sqrt();
            let mut b = vec![0.0; dim];
            for (f, row) in x.iter().enumerate() {
                let w = vecs[(f, i)] / s;
                for (bj, xj) in b.iter_mut().zip(row.as_ref()) {
                    *bj += w * xj;
                }
            }
            basis.push(b);
        }
        basis
    } else {
        let cov = DMatrix::from_fn(dim, dim, |i, j| x.iter().map(|r| r.as_ref()[i] * r.as_ref()[j]).sum());
        let (vals, vecs) = sorted_eigen(cov);
        let mut basis = Vec::with_capacity(k);
        for i in 0..k.min(dim) {
            if vals[i] <= NULL_TOL * vals[0].max(0.0) || vals[i] <= 0.0 {
                basis.push(vec![0.0; dim]);
            } else {
                basis.push(vecs.column(i).iter().copied().collect());
            }
        }
        basis
    };
    while basis.len() < k {
        basis.push(vec![0.0; dim]);
    }
    orthonormalize(&mut basis);
    let rank = basis.iter().filter(|b| b.iter().any(|v| *v != 0.0)).count();
    let coeffs: Vec<Vec<f64>> = x.iter().map(|r| basis.iter().map(|b| dot(r.as_ref(), b)).collect()).collect();
    let residual_sq = residual(x, &coeffs, &basis);
    LowRank { coeffs, basis, rank, residual_sq }
}

fn residual<R: AsRef<[f64]>>(x: &[R], coeffs: &[Vec<f64>], basis: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut approx = vec![0.0; x.first().map_or(0, |r| r.as_ref().len())];
    for (row, c) in x.iter().zip(coeffs) {
        approx.iter_mut().for_each(|v| *v = 0.0);
        for (ci, b) in c.iter().zip(basis) {
            for (a, bj) in approx.iter_mut().zip(b) {
                *a += ci * bj;
            }
        }
        total += row.as_ref().iter().zip(&approx).map(|(v, a)| (v - a) * (v - a)).sum::<f64>();
    }
    total
}

/// Eigen-decomposition with eigenvalues sorted descending (stable).
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Modified Gram–Schmidt in place; vectors that collapse become zero.
pub(crate) fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        let norm0 = dot(&vs[i], &vs[i]).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for j in 0..i {
            let (head, tail) = vs.split_at_mut(i);
            let p = dot(&tail[0], &head[j]);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= p * b;
            }
        }
        let norm = dot(&vs[i], &vs[i]).sqrt();
        if norm <= 1e-10 * norm0 {
            vs[i].iter_mut().for_each(|v| *v = 0.0);
        } else {
            vs[i].iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Replaces zero rows with unit vectors orthogonal to everything else.
pub(crate) fn complete_orthonormal(vs: &mut [Vec<f64>]) {
    let dim = vs.first().map_or(0, |v| v.len());
    let mut axis = 0;
    for i in 0..vs.len() {
        if vs[i].iter().any(|v| *v != 0.0) {
            continue;
        }
        while axis < dim {
            let mut cand = vec![0.0; dim];
            cand[axis] = 1.0;
            axis += 1;
            for (j, other) in vs.iter().enumerate() {
                if j == i {
                    continue;
                }
                let p = dot(&cand, other);
                for (a, b) in cand.iter_mut().zip(other) {
                    *a -= p * b;
                }
            }
            let n = dot(&cand, &cand).sqrt();
            if n > 1e-6 {
                cand.iter_mut().for_each(|v| *v /= n);
                vs[i] = cand;
                break;
            }
        }
    }
}

/// Solves `X · G = B` for symmetric positive (semi)definite `G` (`r × r`).
///
/// `b` is row-major `m × r`. Falls back to Tikhonov damping of 1e-8 times the
/// mean diagonal when `G` is numerically rank deficient.
pub(crate) fn solve_gram_right(g: &DMatrix<f64>, b: &[f64], m: usize) -> Result<Vec<f64>> {
    let r = g.nrows();
    if r == 0 {
        return Ok(Vec::new());
    }
    let rhs = DMatrix::from_fn(r, m, |i, j| b[j * r + i]);
    let chol = nalgebra::Cholesky::new(g.clone()).filter(|c| {
        let l = c.l_dirty();
        let diag: Vec<f64> = (0..r).map(|i| l[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        // squared pivots relate to eigenvalues; demand a sane condition number
        max > 0.0 && (min / max).powi(2) > 1e-13
    });
    let chol = match chol {
        Some(c) => c,
        None => {
            let mean_diag = (g.trace() / r as f64).abs();
            let damping = 1e-8 * if mean_diag > 0.0 { mean_diag } else { 1.0 };
            let damped = g + DMatrix::identity(r, r) * damping;
            nalgebra::Cholesky::new(damped)
                .ok_or_else(|| Error::Numerical("damped normal equations are not positive definite".into()))?
        }
    };
    let sol = chol.solve(&rhs);
    let mut out = vec![0.0; m * r];
    for j in 0..m {
        for i in 0..r {
            out[j * r + i] = sol[(i, j)];
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("least-squares solve produced non-finite values".into()));
    }
    Ok(out)
}
