//! Factorizations backing the solver stack: partial-pivot LU for dense
//! solves and a one-sided Jacobi SVD for pseudo-inverse / least squares.
//!
//! The Jacobi SVD works directly on tall regressor matrices (snapshot sets
//! run to ~10^5 rows x 5 columns) without ever forming the Gram matrix, so
//! rank-deficient dictionaries resolve to the minimum-norm solution without
//! squaring the condition number.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// LU factorization with partial pivoting.
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Lu> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut max = lu[(k, k)].abs();
            for i in k + 1..n {
                if lu[(i, k)].abs() > max {
                    max = lu[(i, k)].abs();
                    p = i;
                }
            }
            if max == 0.0 {
                return Err(Error::InvalidArgument("singular matrix in LU".into()));
            }
            if p != k {
                for j in 0..n {
                    let (a, b) = (lu[(k, j)], lu[(p, j)]);
                    lu[(k, j)] = b;
                    lu[(p, j)] = a;
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let piv = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                for j in k + 1..n {
                    lu[(i, j)] -= f * lu[(k, j)];
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let col = self.solve_vec(&b.col_vec(j));
            for i in 0..b.rows() {
                out[(i, j)] = col[i];
            }
        }
        out
    }

    pub fn determinant(&self) -> f64 {
        let n = self.lu.rows();
        (0..n).fold(self.sign, |d, i| d * self.lu[(i, i)])
    }
}

pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Ok(Lu::factor(a)?.solve(b))
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    solve(a, &Matrix::identity(a.rows()))
}

/// Thin SVD of a matrix with rows >= cols: A = U S V^T with U implicit.
///
/// `w` holds U*S (columns are mutually orthogonal, norms are the singular
/// values), `v` is the right singular basis, `sigma` sorted descending.
pub struct ThinSvd {
    pub w: Matrix,
    pub v: Matrix,
    pub sigma: Vec<f64>,
}

/// One-sided Jacobi SVD. Deterministic cyclic sweeps; adequate for the
/// narrow matrices this crate produces (<= ~30 columns).
pub fn thin_svd(a: &Matrix) -> ThinSvd {
    assert!(a.rows() >= a.cols(), "thin_svd expects rows >= cols");
    let n = a.cols();
    let mut w = a.clone();
    let mut v = Matrix::identity(n);
    let eps = f64::EPSILON;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut app, mut aqq, mut apq) = (0.0f64, 0.0f64, 0.0f64);
                for i in 0..w.rows() {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= eps * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                // Jacobi rotation zeroing the (p,q) Gram entry
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..w.rows() {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..w.rows()).map(|i| w[(i, j)] * w[(i, j)]).sum::<f64>().sqrt())
        .collect();
    // sort columns by descending singular value (stable order for ties)
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let wp = Matrix::from_fn(w.rows(), n, |i, j| w[(i, order[j])]);
    let vp = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    sigma = order.iter().map(|&k| sigma[k]).collect();
    ThinSvd {
        w: wp,
        v: vp,
        sigma,
    }
}

/// Moore-Penrose pseudo-inverse with relative singular-value cutoff.
///
/// Singular values below `tolerance * sigma_max` are treated as zero.
pub fn pseudo_inverse(m: &Matrix, tolerance: f64) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::EmptyMatrix("pseudo_inverse".into()));
    }
    m.ensure_finite("pseudo_inverse input")?;
    if tolerance < 0.0 {
        return Err(Error::InvalidArgument("tolerance must be >= 0".into()));
    }
    let transposed = m.rows() < m.cols();
    let a = if transposed { m.transpose() } else { m.clone() };
    let svd = thin_svd(&a);
    let smax = svd.sigma[0];
    // pinv(A) = V diag(1/sigma^2) W^T restricted to sigma above cutoff
    let n = a.cols();
    let mut pinv = Matrix::zeros(n, a.rows());
    for k in 0..n {
        let s = svd.sigma[k];
        if smax == 0.0 || s <= tolerance * smax || s == 0.0 {
            continue;
        }
        let inv_s2 = 1.0 / (s * s);
        for i in 0..n {
            let vik = svd.v[(i, k)];
            if vik == 0.0 {
                continue;
            }
            for j in 0..a.rows() {
                pinv[(i, j)] += vik * inv_s2 * svd.w[(j, k)];
            }
        }
    }
    Ok(if transposed { pinv.transpose() } else { pinv })
}

/// Default relative cutoff for rank decisions in the pseudo-inverse.
pub const DEFAULT_PINV_TOLERANCE: f64 = 1e-10;

/// Minimum-norm least-squares solution of min ||a X - b||_F.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch(format!(
            "least_squares: a has {} rows, b has {}",
            a.rows(),
            b.rows()
        )));
    }
    a.ensure_finite("least_squares a")?;
    b.ensure_finite("least_squares b")?;
    if a.rows() >= a.cols() {
        // X = V diag(1/sigma^2) (U S)^T b, skipping the numerical null space
        let svd = thin_svd(a);
        let smax = svd.sigma[0];
        let wtb = &svd.w.transpose() * b;
        let mut scaled = wtb;
        for k in 0..a.cols() {
            let s = svd.sigma[k];
            let f = if smax > 0.0 && s > DEFAULT_PINV_TOLERANCE * smax {
                1.0 / (s * s)
            } else {
                0.0
            };
            for j in 0..scaled.cols() {
                scaled[(k, j)] *= f;
            }
        }
        Ok(&svd.v * &scaled)
    } else {
        Ok(&pseudo_inverse(a, DEFAULT_PINV_TOLERANCE)? * b)
    }
}

/// Orthonormal basis of the numerical range of `a` (columns).
pub fn range_basis(a: &Matrix, rel_tol: f64) -> Matrix {
    let tall = if a.rows() >= a.cols() {
        a.clone()
    } else {
        // pad with zero rows; range of the column space is unchanged
        let mut p = Matrix::zeros(a.cols(), a.cols());
        p.set_block(0, 0, a);
        p
    };
    let svd = thin_svd(&tall);
    let smax = svd.sigma[0];
    let rank = svd
        .sigma
        .iter()
        .take_while(|&&s| smax > 0.0 && s > rel_tol * smax)
        .count();
    Matrix::from_fn(a.rows(), rank, |i, j| svd.w[(i, j)] / svd.sigma[j])
}

/// Residual of the four Penrose identities, for verification.
pub fn penrose_residual(m: &Matrix, p: &Matrix) -> f64 {
    let mpm = &(m * p) * m;
    let pmp = &(p * m) * p;
    let mp = m * p;
    let pm = p * m;
    let e1 = (&mpm - m).max_abs();
    let e2 = (&pmp - p).max_abs();
    let e3 = (&mp - &mp.transpose()).max_abs();
    let e4 = (&pm - &pm.transpose()).max_abs();
    e1.max(e2).max(e3).max(e4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::norm2;

    fn rng_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        // xorshift64 for reproducible test matrices without pulling rand in here
        let mut s = seed.max(1);
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        Matrix::from_fn(rows, cols, |_, _| next())
    }

    #[test]
    fn lu_solves_known_system() {
        let a = Matrix::from_rows(&[vec![4.0, 3.0], vec![6.0, 3.0]]).unwrap();
        let b = Matrix::column(&[10.0, 12.0]);
        let x = solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lu_determinant() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert!((Lu::factor(&a).unwrap().determinant() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_identity_is_identity() {
        let p = pseudo_inverse(&Matrix::identity(3), DEFAULT_PINV_TOLERANCE).unwrap();
        assert!((&p - &Matrix::identity(3)).max_abs() < 1e-12);
    }

    #[test]
    fn pinv_diagonal_reciprocal() {
        let p = pseudo_inverse(&Matrix::diag(&[2.0, 0.0]), DEFAULT_PINV_TOLERANCE).unwrap();
        assert!((p[(0, 0)] - 0.5).abs() < 1e-14);
        assert_eq!(p[(1, 1)], 0.0);
    }

    #[test]
    fn pinv_left_inverse_of_full_rank_tall() {
        let m = rng_matrix(6, 4, 7);
        let p = pseudo_inverse(&m, DEFAULT_PINV_TOLERANCE).unwrap();
        let residual = (&(&p * &m) - &Matrix::identity(4)).max_abs();
        assert!(residual < 1e-9, "residual {residual}");
    }

    #[test]
    fn pinv_rejects_nan_and_empty() {
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(pseudo_inverse(&m, 1e-10).is_err());
        assert!(pseudo_inverse(&Matrix::zeros(0, 0), 1e-10).is_err());
    }

    #[test]
    fn penrose_identities_on_random_matrices() {
        for seed in 1..6u64 {
            let m = rng_matrix(5, 3, seed);
            let p = pseudo_inverse(&m, DEFAULT_PINV_TOLERANCE).unwrap();
            assert!(penrose_residual(&m, &p) < 1e-8);
            let wide = rng_matrix(3, 5, seed + 100);
            let pw = pseudo_inverse(&wide, DEFAULT_PINV_TOLERANCE).unwrap();
            assert!(penrose_residual(&wide, &pw) < 1e-8);
        }
    }

    #[test]
    fn least_squares_identity_case() {
        let a = Matrix::identity(2);
        let b = Matrix::column(&[3.0, 4.0]);
        let x = least_squares(&a, &b).unwrap();
        assert!((x[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_overdetermined_mean() {
        let a = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let b = Matrix::column(&[1.0, 3.0]);
        let x = least_squares(&a, &b).unwrap();
        assert!((x[(0, 0)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_recovers_consistent_solution() {
        let a = rng_matrix(8, 4, 11);
        let x0 = rng_matrix(4, 2, 12);
        let b = &a * &x0;
        let x = least_squares(&a, &b).unwrap();
        assert!((&x - &x0).max_abs() < 1e-9);
    }

    #[test]
    fn least_squares_residual_orthogonal_to_columns() {
        let a = rng_matrix(10, 3, 21);
        let b = rng_matrix(10, 2, 22);
        let x = least_squares(&a, &b).unwrap();
        let r = &(&a * &x) - &b;
        let at_r = &a.transpose() * &r;
        assert!(at_r.max_abs() < 1e-8);
    }

    #[test]
    fn least_squares_min_norm_on_dependent_columns() {
        // third column = first - second; projecting e1 must give [2/3,1/3,1/3]
        let mut rows = Vec::new();
        let mut s = 5u64;
        for _ in 0..50 {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            let x = (s >> 11) as f64 / (1u64 << 53) as f64;
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            let y = (s >> 11) as f64 / (1u64 << 53) as f64;
            rows.push(vec![x, y, x - y]);
        }
        let a = Matrix::from_rows(&rows).unwrap();
        let b = Matrix::column(&a.col_vec(0));
        let x = least_squares(&a, &b).unwrap();
        let expect = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        for i in 0..3 {
            assert!((x[(i, 0)] - expect[i]).abs() < 1e-9, "component {i}");
        }
    }

    #[test]
    fn least_squares_dimension_mismatch() {
        let a = Matrix::identity(2);
        let b = Matrix::column(&[1.0, 2.0, 3.0]);
        assert!(least_squares(&a, &b).is_err());
    }

    #[test]
    fn range_basis_is_orthonormal_and_spans() {
        let a = rng_matrix(4, 4, 3);
        let w = range_basis(&a, 1e-10);
        assert_eq!(w.cols(), 4);
        let wt_w = &w.transpose() * &w;
        assert!((&wt_w - &Matrix::identity(4)).max_abs() < 1e-10);
        // rank-1 case
        let one = Matrix::from_fn(3, 3, |_, _| 1.0);
        let w1 = range_basis(&one, 1e-10);
        assert_eq!(w1.cols(), 1);
        assert!((norm2(&w1.col_vec(0)) - 1.0).abs() < 1e-12);
    }
}
