//! Small dense linear algebra over [`Scalar`]: Cholesky, pivoted LU,
//! Jacobi symmetric eigendecomposition and minimum-norm solves.
//!
//! Matrices here are at most a few dozen rows wide, so plain loops are
//! both fast enough and easy to audit.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::scalar::Scalar;

/// Condition number above which a normal matrix is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky<S: Scalar>(a: ArrayView2<S>) -> Option<Array2<S>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<S>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > S::zero()) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve<S: Scalar>(l: &Array2<S>, b: ArrayView1<S>) -> Array1<S> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Column-wise [`cholesky_solve`] for a matrix right-hand side.
pub fn cholesky_solve_matrix<S: Scalar>(l: &Array2<S>, b: ArrayView2<S>) -> Array2<S> {
    let mut out = Array2::<S>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&cholesky_solve(l, col));
    }
    out
}

/// Gaussian elimination with partial pivoting. `None` if a pivot vanishes.
pub fn lu_solve<S: Scalar>(a: ArrayView2<S>, b: ArrayView1<S>) -> Option<Array1<S>> {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut x = b.to_owned();
    let scale = m.iter().fold(S::zero(), |acc, v| acc.max(v.abs()));
    let tiny = scale * S::epsilon();
    for col in 0..n {
        let (piv, pval) =
            (col..n)
                .map(|r| (r, m[[r, col]].abs()))
                .fold((col, S::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pval > tiny) {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap([piv, k], [col, k]);
            }
            x.swap(piv, col);
        }
        for r in (col + 1)..n {
            let f = m[[r, col]] / m[[col, col]];
            if f == S::zero() {
                continue;
            }
            for k in col..n {
                let v = m[[col, k]];
                m[[r, k]] -= f * v;
            }
            let v = x[col];
            x[r] -= f * v;
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= m[[i, k]] * x[k];
        }
        x[i] = s / m[[i, i]];
    }
    Some(x)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Eigenvalues are returned in ascending order; column `j` of the second
/// element is the eigenvector of eigenvalue `j`.
pub fn sym_eigen<S: Scalar>(a: ArrayView2<S>) -> (Array1<S>, Array2<S>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    // symmetrize to absorb rounding in callers
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[[i, j]] + m[[j, i]]) * S::lit(0.5);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    let mut v = Array2::<S>::eye(n);
    let two = S::lit(2.0);
    for _sweep in 0..100 {
        let mut off = S::zero();
        let mut total = S::zero();
        for i in 0..n {
            for j in 0..n {
                let sq = m[[i, j]] * m[[i, j]];
                total += sq;
                if i != j {
                    off += sq;
                }
            }
        }
        if off <= total * S::epsilon() * S::epsilon() || off == S::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == S::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
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
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::<S>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vecs.column_mut(dst).assign(&v.column(src));
    }
    (vals, vecs)
}

/// Spectral condition number of a symmetric positive semidefinite matrix;
/// infinite when the smallest eigenvalue is not positive.
pub fn spd_condition<S: Scalar>(a: ArrayView2<S>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let (vals, _) = sym_eigen(a);
    let lo = vals[0].as_f64();
    let hi = vals[vals.len() - 1].as_f64();
    if lo <= 0.0 || !hi.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves a symmetric positive definite system after checking its condition
/// number against [`CONDITION_LIMIT`].
pub fn solve_spd_checked<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView1<S>,
    what: &'static str,
) -> crate::Result<Array1<S>> {
    let cond = spd_condition(a);
    if cond > CONDITION_LIMIT {
        return Err(crate::SpscError::RankDeficient { what, cond });
    }
    let l = cholesky(a).ok_or(crate::SpscError::RankDeficient { what, cond })?;
    Ok(cholesky_solve(&l, b))
}

/// Minimum-norm solution of `A x = b` through the eigendecomposition of
/// `A Aᵀ`; singular values below `rel_cutoff · σ_max` are discarded.
pub fn min_norm_solve<S: Scalar>(a: ArrayView2<S>, b: ArrayView1<S>, rel_cutoff: S) -> Array1<S> {
    let aat = a.dot(&a.t());
    let (vals, vecs) = sym_eigen(aat.view());
    let smax = vals.iter().fold(S::zero(), |acc, &v| acc.max(v.max(S::zero()).sqrt()));
    let mut y = Array1::<S>::zeros(a.nrows());
    for (j, &lam) in vals.iter().enumerate() {
        let sv = lam.max(S::zero()).sqrt();
        if smax > S::zero() && sv > rel_cutoff * smax {
            let u = vecs.column(j);
            let coef = u.dot(&b) / lam;
            y.scaled_add(coef, &u);
        }
    }
    a.t().dot(&y)
}

/// Replaces negative eigenvalues by zero. Returns the repaired matrix and the
/// most negative eigenvalue that was clipped (zero when nothing changed).
pub fn clip_psd<S: Scalar>(a: ArrayView2<S>) -> (Array2<S>, S) {
    let (vals, vecs) = sym_eigen(a);
    let most_negative = vals.iter().fold(S::zero(), |acc, &v| acc.min(v));
    if most_negative >= S::zero() {
        return (a.to_owned(), S::zero());
    }
    let n = a.nrows();
    let mut out = Array2::<S>::zeros((n, n));
    for (j, &lam) in vals.iter().enumerate() {
        if lam > S::zero() {
            let u = vecs.column(j);
            for r in 0..n {
                for c in 0..n {
                    out[[r, c]] += lam * u[r] * u[c];
                }
            }
        }
    }
    (out, most_negative)
}

/// Maximum absolute asymmetry `|a_ij - a_ji|`.
pub fn asymmetry<S: Scalar>(a: ArrayView2<S>) -> S {
    let n = a.nrows();
    let mut worst = S::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}
