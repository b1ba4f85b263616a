//! Dense linear algebra helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{numeric, Result, TpError};

/// Relative singular-value cutoff shared by every pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse with cutoff `PINV_RTOL * sigma_max`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_with(m, PINV_RTOL)
}

pub fn pinv_with(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    if r < c {
        return pinv_with(&m.transpose(), rtol).transpose();
    }
    let (u, s, v) = jacobi_svd(m);
    let cut = rtol * s.max();
    let mut out = DMatrix::zeros(c, r);
    for (k, x) in s.iter().enumerate() {
        if *x > cut && *x > 0.0 {
            out += (v.column(k) * u.column(k).transpose()) / *x;
        }
    }
    out
}

/// Thin SVD `m = U diag(s) V^T` of a matrix with at least as many rows as
/// columns, by one-sided Jacobi rotations.
pub fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = m.ncols();
    let mut u = m.clone();
    let mut v = DMatrix::identity(n, n);
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).norm_squared();
                let beta = u.column(q).norm_squared();
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for w in [&mut u, &mut v] {
                    for i in 0..w.nrows() {
                        let (x, y) = (w[(i, p)], w[(i, q)]);
                        w[(i, p)] = cs * x - sn * y;
                        w[(i, q)] = sn * x + cs * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s = DVector::from_fn(n, |k, _| u.column(k).norm());
    for k in 0..n {
        if s[k] > 0.0 {
            let col = u.column(k) / s[k];
            u.set_column(k, &col);
        }
    }
    (u, s, v)
}

pub fn rank_with(m: &DMatrix<f64>, rtol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let s = if m.nrows() < m.ncols() { jacobi_svd(&m.transpose()).1 } else { jacobi_svd(m).1 };
    let smax = s.max();
    s.iter().filter(|x| **x > rtol * smax && **x > 0.0).count()
}

pub fn rank(m: &DMatrix<f64>) -> usize {
    rank_with(m, PINV_RTOL)
}

/// Symmetric eigendecomposition that checks positive semi-definiteness up to
/// `1e-8 * max diagonal`, clipping small negative eigenvalues to zero.
pub fn psd_eigen(k: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = k.nrows();
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let sym = (k + k.transpose()) * 0.5;
    let maxdiag = (0..n).map(|i| sym[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-8 * maxdiag.max(f64::MIN_POSITIVE);
    let e = SymmetricEigen::new(sym);
    let mut vals = e.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return numeric(format!("covariance is not positive semi-definite (eigenvalue {v:.3e})"));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((vals, e.eigenvectors))
}

/// Factor `B` with `B B^T = K`, keeping eigen-directions above a relative cutoff.
pub fn psd_factor(k: &DMatrix<f64>, rtol: f64) -> Result<DMatrix<f64>> {
    let (vals, vecs) = psd_eigen(k)?;
    let vmax = vals.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > rtol * vmax && vals[i] > 0.0).collect();
    let mut b = DMatrix::zeros(k.nrows(), keep.len());
    for (j, &i) in keep.iter().enumerate() {
        let s = vals[i].sqrt();
        for r in 0..k.nrows() {
            b[(r, j)] = vecs[(r, i)] * s;
        }
    }
    Ok(b)
}

/// Conditional law of `x1 | x2 = value` for a joint Gaussian with blocks
/// indexed by `i1` and `i2`.
pub fn condition_gaussian(
    mu: &DVector<f64>,
    k: &DMatrix<f64>,
    i1: &[usize],
    i2: &[usize],
    value: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let sub = |a: &[usize], b: &[usize]| DMatrix::from_fn(a.len(), b.len(), |r, c| k[(a[r], b[c])]);
    let k11 = sub(i1, i1);
    let k12 = sub(i1, i2);
    let k22 = sub(i2, i2);
    let mu1 = DVector::from_fn(i1.len(), |r, _| mu[i1[r]]);
    let mu2 = DVector::from_fn(i2.len(), |r, _| mu[i2[r]]);
    let g = &k12 * pinv(&k22);
    let m = mu1 + &g * (value - mu2);
    let c = k11 - &g * k12.transpose();
    (m, c)
}

/// Law of a Gaussian matrix `A` given `A Q = Y` and `A^T P = X`:
/// `A = E + proj_left * A~ * proj_right` with `A~` an independent copy of `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedMatrix {
    pub mean: DMatrix<f64>,
    /// `I - P P^+`.
    pub proj_left: DMatrix<f64>,
    /// `I - Q Q^+`.
    pub proj_right: DMatrix<f64>,
}

pub fn conditioning_trick(
    y: &DMatrix<f64>,
    q: &DMatrix<f64>,
    x: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<ConditionedMatrix> {
    let (n, m) = (p.nrows(), q.nrows());
    if y.shape() != (n, q.ncols()) || x.shape() != (m, p.ncols()) {
        return Err(TpError::InvalidSpec(format!(
            "constraint shapes Y {:?}, Q {:?}, X {:?}, P {:?} do not fit one matrix",
            y.shape(),
            q.shape(),
            x.shape(),
            p.shape()
        )));
    }
    let qp = pinv(q);
    let pp = pinv(p);
    let mean = y * &qp + pp.transpose() * x.transpose() - pp.transpose() * p.transpose() * y * &qp;
    let r1 = (&mean * q - y).amax();
    let r2 = (mean.transpose() * p - x).amax();
    let scale = 1.0 + y.amax().max(x.amax());
    if r1.max(r2) > 1e-8 * scale {
        return numeric(format!("inconsistent matrix constraints (residual {:.3e})", r1.max(r2)));
    }
    Ok(ConditionedMatrix { mean, proj_left: complement_projector(p), proj_right: complement_projector(q) })
}

/// Projector `I - M M^+` onto the orthogonal complement of the column space of `M`.
pub fn complement_projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::identity(n, n) - m * pinv(m)
}

/// Greedy pivoted Cholesky: indices of a maximal well-conditioned subset,
/// with `first` tried before the others.
pub fn independent_subset(k: &DMatrix<f64>, first: &[usize], rtol: f64) -> Vec<usize> {
    let n = k.nrows();
    let scale = (0..n).map(|i| k[(i, i)].abs()).fold(0.0, f64::max);
    let mut chosen: Vec<usize> = vec![];
    let order: Vec<usize> = first.iter().cloned().chain((0..n).filter(|i| !first.contains(i))).collect();
    for i in order {
        let mut trial = chosen.clone();
        trial.push(i);
        let sub = DMatrix::from_fn(trial.len(), trial.len(), |r, c| k[(trial[r], trial[c])]);
        let e = SymmetricEigen::new(sub);
        let min = e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min > rtol * scale.max(f64::MIN_POSITIVE) {
            chosen = trial;
        }
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_deficient_matrix() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let p = pinv(&m);
        assert!((&m * &p * &m - &m).norm() < 1e-12);
        assert!((&p * &m * &p - &p).norm() < 1e-12);
        assert_eq!(rank(&m), 1);
    }

    #[test]
    fn conditioning_matches_bivariate_formula() {
        let mu = DVector::from_vec(vec![1.0, -1.0]);
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let (m, c) = condition_gaussian(&mu, &k, &[0], &[1], &DVector::from_vec(vec![0.5]));
        assert!((m[0] - (1.0 + 0.6 * 1.5)).abs() < 1e-14);
        assert!((c[(0, 0)] - (2.0 - 0.36)).abs() < 1e-14);
    }

    #[test]
    fn unconstrained_matrix_is_unchanged() {
        let c = conditioning_trick(&DMatrix::zeros(3, 0), &DMatrix::zeros(2, 0), &DMatrix::zeros(2, 0), &DMatrix::zeros(3, 0))
            .unwrap();
        assert_eq!(c.mean, DMatrix::zeros(3, 2));
        assert_eq!(c.proj_left, DMatrix::identity(3, 3));
        assert_eq!(c.proj_right, DMatrix::identity(2, 2));
    }

    #[test]
    fn non_psd_is_a_numeric_error() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_eigen(&k).is_err());
    }
}
