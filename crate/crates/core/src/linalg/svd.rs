//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Tall inputs are first reduced with a Householder QR so the rotations run on
//! a small square triangle; wide inputs are handled through the transpose.

use ndarray::Array2;

use super::FeatureMatrix;
use crate::error::{PruneError, Result};

const MAX_SWEEPS: usize = 80;
const ORTHO_TOL: f64 = 1e-15;
/// Singular values at or below this fraction of the largest get completed
/// left vectors instead of normalised columns.
const NULL_FRACTION: f64 = 1e-13;

/// Thin SVD `A = U diag(s) V^T` with `p = min(rows, cols)` triplets.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `rows x p`, orthonormal columns.
    pub left_vectors: Array2<f64>,
    /// `cols x p`, orthonormal columns.
    pub right_vectors: Array2<f64>,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut us = self.left_vectors.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            us.column_mut(j).mapv_inplace(|v| v * s);
        }
        us.dot(&self.right_vectors.t())
    }
}

pub fn svd(a: &FeatureMatrix) -> Result<SvdResult> {
    check(a)?;
    let (m, n) = (a.rows(), a.cols());
    if m >= n {
        Ok(tall_svd(a.as_array().clone(), true))
    } else {
        let t = tall_svd(a.as_array().t().to_owned(), true);
        Ok(SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        })
    }
}

/// Singular values only; skips accumulating the vectors.
pub fn singular_values(a: &FeatureMatrix) -> Result<Vec<f64>> {
    check(a)?;
    let arr = if a.rows() >= a.cols() {
        a.as_array().clone()
    } else {
        a.as_array().t().to_owned()
    };
    Ok(tall_svd(arr, false).singular_values)
}

fn check(a: &FeatureMatrix) -> Result<()> {
    if a.rows() == 0 {
        return Err(PruneError::InvalidInput("svd needs at least one row".into()));
    }
    // FeatureMatrix guarantees finiteness; this guards the crate-internal
    // constructors.
    if a.as_array().iter().any(|v| !v.is_finite()) {
        return Err(PruneError::InvalidInput("svd input is not finite".into()));
    }
    Ok(())
}

/// `a` is `m x n` with `m >= n`.
fn tall_svd(a: Array2<f64>, want_vectors: bool) -> SvdResult {
    let (m, n) = a.dim();
    let (q, mut cols) = if m > n {
        let (q, r) = householder_qr(a, want_vectors);
        (q, columns_of(&r))
    } else {
        (None, columns_of(&a))
    };
    let mut v: Vec<Vec<f64>> = if want_vectors {
        (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            })
            .collect()
    } else {
        Vec::new()
    };

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for qi in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[qi], &cols[qi]);
                let gamma = dot(&cols[p], &cols[qi]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, qi, c, s);
                if want_vectors {
                    rotate(&mut v, p, qi, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    if !want_vectors {
        return SvdResult {
            singular_values,
            left_vectors: Array2::zeros((m, 0)),
            right_vectors: Array2::zeros((n, 0)),
        };
    }

    let inner = cols[0].len();
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = norms[j];
            (s > 0.0 && s > smax * NULL_FRACTION).then(|| cols[j].iter().map(|x| x / s).collect())
        })
        .collect();
    complete_orthonormal(&mut u_cols, inner);
    let mut u_small = Array2::zeros((inner, n));
    for (j, col) in u_cols.into_iter().enumerate() {
        for (i, x) in col.expect("completed").into_iter().enumerate() {
            u_small[[i, j]] = x;
        }
    }
    let left_vectors = match q {
        Some(q) => q.dot(&u_small),
        None => u_small,
    };
    let mut right_vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            right_vectors[[i, dst]] = v[src][i];
        }
    }
    SvdResult {
        singular_values,
        left_vectors,
        right_vectors,
    }
}

fn columns_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.columns().into_iter().map(|c| c.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Thin Householder QR of a tall matrix. Returns `(Q, R)` with `Q` only when
/// requested; `R` is `n x n` upper triangular.
fn householder_qr(mut a: Array2<f64>, want_q: bool) -> (Option<Array2<f64>>, Array2<f64>) {
    let (m, n) = a.dim();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (j..m).map(|i| a[[i, j]]).collect();
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        for k in j..n {
            let proj: f64 = (j..m).map(|i| v[i - j] * a[[i, k]]).sum();
            for i in j..m {
                a[[i, k]] -= 2.0 * v[i - j] * proj;
            }
        }
        reflectors.push(v);
    }
    let mut r = Array2::zeros((n, n));
    for i in 0..n {
        for k in i..n {
            r[[i, k]] = a[[i, k]];
        }
    }
    if !want_q {
        return (None, r);
    }
    let mut q = Array2::zeros((m, n));
    for j in 0..n {
        q[[j, j]] = 1.0;
    }
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for k in 0..n {
            let proj: f64 = (j..m).map(|i| v[i - j] * q[[i, k]]).sum();
            for i in j..m {
                q[[i, k]] -= 2.0 * v[i - j] * proj;
            }
        }
    }
    (Some(q), r)
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], len: usize) {
    for j in 0..cols.len() {
        if cols[j].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..len {
            let mut cand = vec![0.0; len];
            cand[e] = 1.0;
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&cand, other);
                    cand.iter_mut().zip(other).for_each(|(c, o)| *c -= proj * o);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, mut cand) = best.expect("at least one basis vector");
        cand.iter_mut().for_each(|c| *c /= norm);
        cols[j] = Some(cand);
    }
}

/// Count of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(a: &FeatureMatrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(PruneError::InvalidConfig(format!(
            "rel_tol must lie in (0, 1), got {rel_tol}"
        )));
    }
    let s = singular_values(a)?;
    Ok(rank_from_singular_values(&s, rel_tol))
}

pub(crate) fn rank_from_singular_values(s: &[f64], rel_tol: f64) -> usize {
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * smax).count()
}

/// Sum of singular values.
pub fn nuclear_norm(a: &FeatureMatrix) -> Result<f64> {
    if a.rows() == 0 {
        return Ok(0.0);
    }
    Ok(singular_values(a)?.iter().sum())
}
