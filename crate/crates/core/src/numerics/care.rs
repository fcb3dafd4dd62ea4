//! Continuous algebraic Riccati solver and its supporting pieces.
//!
//! The consensus-coupled equation
//!
//!   A'P + PA + Q - P B R^-1 B' P + LP + PL = 0
//!
//! with symmetric L collapses to a standard CARE in the effective drift
//! A + L. It is solved by Newton-Kleinman iteration (repeated Lyapunov
//! solves), seeded with a stabilizing gain from Bass' pole-shifting
//! construction. An unstable effective drift with weak input coupling can
//! make the first Newton step badly conditioned, so the Laplacian term is
//! ramped in over a short homotopy ladder, warm-starting each stage with
//! the previous gain.

use crate::error::{Error, Result};
use crate::numerics::decomp::{inverse, pseudo_inverse, Lu};
use crate::numerics::eigen::eigenvalues_unbounded;
use crate::numerics::matrix::Matrix;

/// Residual of the consensus CARE at P.
pub fn care_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, l: &Matrix, p: &Matrix) -> Matrix {
    let r_inv = inverse(r).expect("R must be invertible");
    let at_p = &a.transpose() * p;
    let p_a = p * a;
    let pbrbp = &(&(p * b) * &r_inv) * &(&b.transpose() * p);
    let lp = l * p;
    let pl = p * l;
    &(&(&(&(&at_p + &p_a) + q) - &pbrbp) + &lp) + &pl
}

/// Solve A'P + PA + C = 0 for symmetric P given Hurwitz A.
///
/// Dense Kronecker formulation with one step of iterative refinement;
/// fine for the n <= ~16 systems this crate certifies.
pub fn solve_lyapunov(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() || c.rows() != n || c.cols() != n {
        return Err(Error::DimensionMismatch("lyapunov".into()));
    }
    // vec(A'P + PA) = (I (x) A' + A' (x) I) vec(P)
    let at = a.transpose();
    let eye = Matrix::identity(n);
    let k = &eye.kron(&at) + &at.kron(&eye);
    let lu = Lu::factor(&k)?;
    let rhs: Vec<f64> = c.data().iter().map(|v| -v).collect();
    let p0 = lu.solve_vec(&rhs);
    let mut p = Matrix::from_vec(n, n, p0)?.symmetrized();
    for _ in 0..2 {
        let res = &(&(&at * &p) + &(&p * a)) + c;
        let d = lu.solve_vec(&res.data().iter().map(|v| -v).collect::<Vec<_>>());
        let d = Matrix::from_vec(n, n, d)?.symmetrized();
        p = &p + &d;
    }
    Ok(p)
}

fn spectral_abscissa_of(m: &Matrix) -> Result<f64> {
    Ok(eigenvalues_unbounded(m)?.spectral_abscissa())
}

/// Stabilizing gain via Bass' construction: with beta above the spectral
/// abscissa, solve (A + beta I) Z + Z (A + beta I)' = 2 B B' and take
/// K = B' Z^+. Fails only for unstabilizable pairs.
fn bass_gain(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let alpha = spectral_abscissa_of(a)?;
    let beta = alpha + 1.0;
    let m = &a.clone() + &Matrix::identity(n).scale(beta);
    // M Z + Z M' = 2BB' is solve_lyapunov(M', -2BB'); the Kronecker operator
    // is invertible because every eigenvalue of M has positive real part.
    let bbt = (b * &b.transpose()).scale(-2.0);
    let z = solve_lyapunov(&m.transpose(), &bbt)?.symmetrized();
    let z_pinv = pseudo_inverse(&z, 1e-12)?;
    Ok(&b.transpose() * &z_pinv)
}

const NK_RESIDUAL_TOL: f64 = 1e-9;
const NK_MAX_ITER: usize = 120;

/// Newton-Kleinman iteration from a stabilizing gain `k0`.
fn newton_kleinman(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    k0: Matrix,
) -> Result<(Matrix, Matrix)> {
    let r_inv = inverse(r)?;
    let mut k = k0;
    let mut best: Option<(f64, Matrix, Matrix)> = None;
    let zero_l = Matrix::zeros(a.rows(), a.cols());
    for it in 0..NK_MAX_ITER {
        let a_cl = a - &(b * &k);
        if spectral_abscissa_of(&a_cl)? >= 0.0 {
            return Err(Error::Unstabilizable(format!(
                "closed loop not Hurwitz at Newton iteration {it}"
            )));
        }
        let cost = &(q + &(&(&k.transpose() * r) * &k)).symmetrized();
        let p = solve_lyapunov(&a_cl, cost)?;
        let res = care_residual(a, b, q, r, &zero_l, &p).frobenius_norm();
        if best.as_ref().map_or(true, |(r0, _, _)| res < *r0) {
            best = Some((res, p.clone(), k.clone()));
        }
        if res < NK_RESIDUAL_TOL {
            return Ok((p, k));
        }
        let k_next = &(&r_inv * &b.transpose()) * &p;
        if (&k_next - &k).max_abs() <= 1e-14 * k.max_abs().max(1.0) {
            break;
        }
        k = k_next;
    }
    let (res, p, k) = best.ok_or_else(|| Error::NoConvergence("Newton-Kleinman".into()))?;
    if res < 1e-6 {
        Ok((p, k))
    } else {
        Err(Error::NoConvergence(format!(
            "Newton-Kleinman stalled at residual {res:.3e}"
        )))
    }
}

/// Solve the consensus CARE A'P + PA + Q - PBR^-1B'P + LP + PL = 0.
///
/// Preconditions: q, l symmetric PSD; r symmetric positive definite.
/// Returns the symmetric stabilizing solution.
pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, l: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() {
        return Err(Error::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if b.rows() != n || q.rows() != n || q.cols() != n || l.rows() != n || l.cols() != n {
        return Err(Error::DimensionMismatch("solve_care operand shapes".into()));
    }
    if r.rows() != b.cols() || r.cols() != b.cols() {
        return Err(Error::DimensionMismatch("solve_care R shape".into()));
    }
    for (m, name) in [(a, "a"), (b, "b"), (q, "q"), (r, "r"), (l, "l")] {
        m.ensure_finite(name)?;
    }
    if q.symmetry_error() > 1e-9 * q.max_abs().max(1.0) {
        return Err(Error::InvalidArgument("q must be symmetric".into()));
    }
    if l.symmetry_error() > 1e-9 * l.max_abs().max(1.0) {
        return Err(Error::InvalidArgument("l must be symmetric".into()));
    }

    // Ramp the Laplacian coupling in; each stage warm-starts the next.
    let stages: &[f64] = if l.max_abs() == 0.0 {
        &[0.0]
    } else {
        &[0.0, 0.5, 1.0]
    };
    let mut k: Option<Matrix> = None;
    let mut p = Matrix::zeros(n, n);
    for &gamma in stages {
        let a_eff = a + &l.scale(gamma);
        let k0 = match &k {
            Some(prev) => {
                let a_cl = &a_eff - &(b * prev);
                if spectral_abscissa_of(&a_cl)? < 0.0 {
                    prev.clone()
                } else {
                    initial_gain(&a_eff, b)?
                }
            }
            None => initial_gain(&a_eff, b)?,
        };
        let (p_new, k_new) = newton_kleinman(&a_eff, b, q, r, k0)?;
        p = p_new;
        k = Some(k_new);
    }
    Ok(p.symmetrized())
}

fn initial_gain(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if spectral_abscissa_of(a)? < -1e-12 {
        Ok(Matrix::zeros(b.cols(), a.rows()))
    } else {
        bass_gain(a, b)
    }
}

/// Principal square root by the Denman-Beavers iteration.
/// Requires no eigenvalues on the closed negative real axis.
pub fn sqrtm(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let mut y = m.clone();
    let mut z = Matrix::identity(n);
    for _ in 0..80 {
        let y_inv = inverse(&y).map_err(|_| Error::LogUndefined("singular sqrt iterate".into()))?;
        let z_inv = inverse(&z).map_err(|_| Error::LogUndefined("singular sqrt iterate".into()))?;
        let y_next = (&y + &z_inv).scale(0.5);
        let z_next = (&z + &y_inv).scale(0.5);
        let delta = (&y_next - &y).frobenius_norm();
        y = y_next;
        z = z_next;
        if delta <= 1e-15 * y.frobenius_norm().max(1.0) {
            return Ok(y);
        }
    }
    Err(Error::NoConvergence("Denman-Beavers square root".into()))
}

/// Principal matrix logarithm by inverse scaling-and-squaring with a
/// Mercator series on the final small-norm factor.
pub fn logm(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let eig = eigenvalues_unbounded(m)?;
    for v in &eig.values {
        if v.re <= 0.0 && v.im.abs() <= 1e-12 * v.re.abs().max(1.0) {
            return Err(Error::LogUndefined(format!(
                "eigenvalue {v} on the closed negative real axis"
            )));
        }
    }
    let n = m.rows();
    let eye = Matrix::identity(n);
    let mut x = m.clone();
    let mut squarings = 0u32;
    while (&x - &eye).frobenius_norm() > 0.3 {
        x = sqrtm(&x)?;
        squarings += 1;
        if squarings > 40 {
            return Err(Error::NoConvergence("logm scaling".into()));
        }
    }
    let e = &x - &eye;
    let mut term = e.clone();
    let mut out = Matrix::zeros(n, n);
    for k in 1..=96 {
        let coeff = if k % 2 == 1 { 1.0 } else { -1.0 } / k as f64;
        out = &out + &term.scale(coeff);
        term = &term * &e;
        if term.frobenius_norm() / (k as f64 + 1.0) < 1e-18 * out.frobenius_norm().max(1.0) {
            break;
        }
    }
    Ok(out.scale(2.0f64.powi(squarings as i32)))
}
