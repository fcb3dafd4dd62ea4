//! Eigenvalue routines for the small matrices this crate works with.
//!
//! General spectra come from Hessenberg reduction followed by Francis
//! double-shift QR iteration; symmetric matrices (Laplacians, Riccati
//! solutions) use cyclic Jacobi, which is simpler and gives tight accuracy.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// Eigenvalues (and optionally vectors) of a square matrix.
///
/// Values are sorted by descending magnitude, ties broken by descending
/// real part, so test output is deterministic.
#[derive(Debug, Clone)]
pub struct EigenSet {
    pub values: Vec<Complex64>,
    pub vectors: Option<Vec<Vec<Complex64>>>,
}

impl EigenSet {
    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.norm()))
    }

    pub fn spectral_abscissa(&self) -> f64 {
        self.values
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.re))
    }

    pub fn min_magnitude(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, v| m.min(v.norm()))
    }
}

fn sort_eigenvalues(mut values: Vec<Complex64>) -> Vec<Complex64> {
    values.sort_by(|a, b| {
        b.norm()
            .partial_cmp(&a.norm())
            .unwrap()
            .then(b.re.partial_cmp(&a.re).unwrap())
    });
    values
}

/// Maximum dimension accepted by `eigenvalues`; the artifact never needs more.
pub const MAX_EIGEN_DIM: usize = 16;

/// Complex eigenvalues of a real square matrix of dimension <= 16.
pub fn eigenvalues(m: &Matrix) -> Result<EigenSet> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if m.is_empty() {
        return Err(Error::EmptyMatrix("eigenvalues".into()));
    }
    if m.rows() > MAX_EIGEN_DIM {
        return Err(Error::InvalidArgument(format!(
            "eigenvalues limited to dimension {MAX_EIGEN_DIM}, got {}",
            m.rows()
        )));
    }
    m.ensure_finite("eigenvalues input")?;
    let n = m.rows();
    if n == 1 {
        return Ok(EigenSet {
            values: vec![Complex64::new(m[(0, 0)], 0.0)],
            vectors: None,
        });
    }
    let mut h = hessenberg(m);
    let values = francis_qr(&mut h)?;
    Ok(EigenSet {
        values: sort_eigenvalues(values),
        vectors: None,
    })
}

/// Householder reduction to upper Hessenberg form.
fn hessenberg(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut h = a.clone();
    for k in 0..n.saturating_sub(2) {
        let mut x: Vec<f64> = (k + 1..n).map(|i| h[(i, k)]).collect();
        let alpha = -x[0].signum() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if alpha == 0.0 || (x.len() == 1 && x[0] == alpha) {
            continue;
        }
        x[0] -= alpha;
        let vnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        let v: Vec<f64> = x.iter().map(|e| e / vnorm).collect();
        // H := (I - 2vv^T) H (I - 2vv^T) applied to the trailing block
        for j in 0..n {
            let s: f64 = (0..v.len()).map(|i| v[i] * h[(k + 1 + i, j)]).sum();
            for i in 0..v.len() {
                h[(k + 1 + i, j)] -= 2.0 * v[i] * s;
            }
        }
        for i in 0..n {
            let s: f64 = (0..v.len()).map(|j| v[j] * h[(i, k + 1 + j)]).sum();
            for j in 0..v.len() {
                h[(i, k + 1 + j)] -= 2.0 * v[j] * s;
            }
        }
        for i in k + 2..n {
            h[(i, k)] = 0.0;
        }
        h[(k + 1, k)] = alpha;
    }
    h
}

/// Francis implicit double-shift QR on an upper Hessenberg matrix.
/// Consumes the matrix, returns the (unsorted) eigenvalues.
fn francis_qr(h: &mut Matrix) -> Result<Vec<Complex64>> {
    let n = h.rows();
    let eps = f64::EPSILON;
    let mut values = Vec::with_capacity(n);
    let mut hi = n; // active block is rows/cols [lo, hi)
    let mut iter_since_deflation = 0usize;
    let max_total = 60 * n * n + 200;
    let mut total = 0usize;

    while hi > 0 {
        // negligible-subdiagonal cleanup
        for i in 1..hi {
            let scale = h[(i - 1, i - 1)].abs() + h[(i, i)].abs();
            if h[(i, i - 1)].abs() <= eps * scale.max(f64::MIN_POSITIVE) {
                h[(i, i - 1)] = 0.0;
            }
        }
        // deflate converged trailing 1x1 or 2x2 blocks
        if hi == 1 || h[(hi - 1, hi - 2)] == 0.0 {
            values.push(Complex64::new(h[(hi - 1, hi - 1)], 0.0));
            hi -= 1;
            iter_since_deflation = 0;
            continue;
        }
        if hi == 2 || h[(hi - 2, hi - 3)] == 0.0 {
            let (l1, l2) = eig2(
                h[(hi - 2, hi - 2)],
                h[(hi - 2, hi - 1)],
                h[(hi - 1, hi - 2)],
                h[(hi - 1, hi - 1)],
            );
            values.push(l1);
            values.push(l2);
            hi -= 2;
            iter_since_deflation = 0;
            continue;
        }
        total += 1;
        if total > max_total {
            return Err(Error::NoConvergence("Francis QR iteration".into()));
        }
        // find the start of the active block
        let mut lo = hi - 1;
        while lo > 0 && h[(lo, lo - 1)] != 0.0 {
            lo -= 1;
        }
        iter_since_deflation += 1;

        // double shift from the trailing 2x2, with an exceptional shift
        // every 12 stalled iterations
        let (s, p) = if iter_since_deflation % 12 == 0 {
            let d = h[(hi - 1, hi - 2)].abs() + h[(hi - 2, hi - 3.min(hi - 2))].abs();
            (1.5 * d, d * d)
        } else {
            let a = h[(hi - 2, hi - 2)];
            let b = h[(hi - 2, hi - 1)];
            let c = h[(hi - 1, hi - 2)];
            let d = h[(hi - 1, hi - 1)];
            (a + d, a * d - b * c)
        };

        // first column of (H - l1)(H - l2) restricted to the active block
        let h00 = h[(lo, lo)];
        let h10 = h[(lo + 1, lo)];
        let mut x = h00 * h00 + h[(lo, lo + 1)] * h10 - s * h00 + p;
        let mut y = h10 * (h00 + h[(lo + 1, lo + 1)] - s);
        let mut z = h10 * h[(lo + 2, lo + 1)];

        // chase the bulge
        for k in lo..hi - 2 {
            let col = [x, y, z];
            let alpha = -col[0].signum()
                * (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
            if alpha != 0.0 {
                let mut v = [col[0] - alpha, col[1], col[2]];
                let vn = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if vn > 0.0 {
                    v = [v[0] / vn, v[1] / vn, v[2] / vn];
                    let jmin = k.saturating_sub(1).max(lo);
                    for j in jmin..n {
                        let s2: f64 = (0..3).map(|i| v[i] * h[(k + i, j)]).sum();
                        for i in 0..3 {
                            h[(k + i, j)] -= 2.0 * v[i] * s2;
                        }
                    }
                    let imax = (k + 4).min(hi);
                    for i in 0..imax {
                        let s2: f64 = (0..3).map(|j| v[j] * h[(i, k + j)]).sum();
                        for j in 0..3 {
                            h[(i, k + j)] -= 2.0 * v[j] * s2;
                        }
                    }
                }
            }
            x = h[(k + 1, k)];
            y = h[(k + 2, k)];
            z = if k + 3 < hi { h[(k + 3, k)] } else { 0.0 };
        }
        // final 2-element reflection
        let k = hi - 2;
        let alpha = -x.signum() * (x * x + y * y).sqrt();
        if alpha != 0.0 {
            let mut v = [x - alpha, y];
            let vn = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if vn > 0.0 {
                v = [v[0] / vn, v[1] / vn];
                let jmin = k.saturating_sub(1).max(lo);
                for j in jmin..n {
                    let s2: f64 = v[0] * h[(k, j)] + v[1] * h[(k + 1, j)];
                    h[(k, j)] -= 2.0 * v[0] * s2;
                    h[(k + 1, j)] -= 2.0 * v[1] * s2;
                }
                for i in 0..hi {
                    let s2: f64 = v[0] * h[(i, k)] + v[1] * h[(i, k + 1)];
                    h[(i, k)] -= 2.0 * v[0] * s2;
                    h[(i, k + 1)] -= 2.0 * v[1] * s2;
                }
            }
        }
        // restore Hessenberg zeros below the first subdiagonal of the block
        for i in lo + 2..hi {
            for j in lo..i.saturating_sub(1) {
                h[(i, j)] = 0.0;
            }
        }
    }
    Ok(values)
}

/// Eigenvalues of [[a, b], [c, d]].
fn eig2(a: f64, b: f64, c: f64, d: f64) -> (Complex64, Complex64) {
    let tr = 0.5 * (a + d);
    let det = a * d - b * c;
    let disc = tr * tr - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        // larger-magnitude root first, companion via product for accuracy
        let l1 = if tr >= 0.0 { tr + r } else { tr - r };
        let l2 = if l1 != 0.0 { det / l1 } else { tr - r.copysign(tr) };
        (Complex64::new(l1, 0.0), Complex64::new(l2, 0.0))
    } else {
        let im = (-disc).sqrt();
        (Complex64::new(tr, im), Complex64::new(tr, -im))
    }
}

/// Real eigenvalues of a symmetric matrix via cyclic Jacobi, ascending.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    m.ensure_finite("symmetric_eigenvalues input")?;
    let n = m.rows();
    let mut a = m.symmetrized();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                off = off.max(a[(i, j)].abs());
            }
        }
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        if off <= f64::EPSILON * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::EPSILON * scale * 1e-2 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(vals)
}

pub fn min_symmetric_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?[0])
}

/// Largest real part over the spectrum of a general matrix.
pub fn spectral_abscissa(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues_unbounded(m)?.spectral_abscissa())
}

/// Like `eigenvalues` but without the dimension cap, for internal solver use
/// on aggregate systems.
pub(crate) fn eigenvalues_unbounded(m: &Matrix) -> Result<EigenSet> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    m.ensure_finite("eigenvalues input")?;
    let n = m.rows();
    if n == 1 {
        return Ok(EigenSet {
            values: vec![Complex64::new(m[(0, 0)], 0.0)],
            vectors: None,
        });
    }
    let mut h = hessenberg(m);
    let values = francis_qr(&mut h)?;
    Ok(EigenSet {
        values: sort_eigenvalues(values),
        vectors: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn diagonal_eigenvalues() {
        let e = eigenvalues(&Matrix::diag(&[0.9, 0.5])).unwrap();
        assert!(close(e.values[0].re, 0.9, 1e-12));
        assert!(close(e.values[1].re, 0.5, 1e-12));
        assert!(e.values.iter().all(|v| v.im == 0.0));
    }

    #[test]
    fn rotation_gives_pure_imaginary_pair() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let e = eigenvalues(&m).unwrap();
        assert!(close(e.values[0].norm(), 1.0, 1e-12));
        // descending real-part tie break puts +i first
        assert!(close(e.values[0].im, 1.0, 1e-12));
        assert!(close(e.values[1].im, -1.0, 1e-12));
        assert!(e.values.iter().all(|v| v.re.abs() < 1e-12));
    }

    #[test]
    fn trace_and_determinant_identities() {
        let mut s = 9u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..20 {
            let m = Matrix::from_fn(4, 4, |_, _| next());
            let e = eigenvalues(&m).unwrap();
            let sum: Complex64 = e.values.iter().sum();
            let prod: Complex64 = e.values.iter().product();
            let det = crate::numerics::decomp::Lu::factor(&m)
                .map(|lu| lu.determinant())
                .unwrap_or(0.0);
            assert!(close(sum.re, m.trace(), 1e-8), "trace mismatch");
            assert!(sum.im.abs() < 1e-8);
            assert!(close(prod.re, det, 1e-8), "det mismatch: {} vs {det}", prod.re);
        }
    }

    #[test]
    fn repeated_eigenvalue_handled() {
        let e = eigenvalues(&Matrix::identity(4)).unwrap();
        for v in &e.values {
            assert!(close(v.re, 1.0, 1e-10));
            assert!(v.im.abs() < 1e-10);
        }
    }

    #[test]
    fn defective_jordan_block() {
        // [[1,1],[0,1]] has a double eigenvalue at 1
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let e = eigenvalues(&m).unwrap();
        for v in &e.values {
            assert!(close(v.re, 1.0, 1e-7));
        }
    }

    #[test]
    fn rejects_non_square_and_oversized() {
        assert!(eigenvalues(&Matrix::zeros(2, 3)).is_err());
        assert!(eigenvalues(&Matrix::identity(17)).is_err());
    }

    #[test]
    fn symmetric_jacobi_matches_known_spectrum() {
        // Laplacian of path graph on 3 nodes: eigenvalues 0, 1, 3
        let l = Matrix::from_rows(&[
            vec![1.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 1.0],
        ])
        .unwrap();
        let e = symmetric_eigenvalues(&l).unwrap();
        assert!(close(e[0], 0.0, 1e-12));
        assert!(close(e[1], 1.0, 1e-12));
        assert!(close(e[2], 3.0, 1e-12));
    }

    #[test]
    fn ordering_is_descending_magnitude() {
        let m = Matrix::diag(&[0.5, -0.9, 0.1, 0.9]);
        let e = eigenvalues(&m).unwrap();
        let mags: Vec<f64> = e.values.iter().map(|v| v.norm()).collect();
        for w in mags.windows(2) {
            assert!(w[0] >= w[1] - 1e-15);
        }
        // |0.9| tie: descending real part puts +0.9 before -0.9
        assert!(close(e.values[0].re, 0.9, 1e-12));
        assert!(close(e.values[1].re, -0.9, 1e-12));
    }
}
