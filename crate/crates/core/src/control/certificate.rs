//! Closed-loop stability certificate: the consensus-coupled Riccati
//! equation solved on the continuous-time bridge of the fitted predictors.
//!
//! The discrete lifted A is carried to continuous time by a matrix
//! logarithm at the identification sampling period. The rank-deficiency
//! zero mode of the pair dictionary blocks the logarithm, so each agent is
//! first restricted to the invariant subspace spanning its nonzero modes.
//! The discrete input column is bridged by the exact zero-order-hold
//! relation b_c = (A - I)^{-1} a_c B_d, which degenerates to B_d / dt as
//! the spectrum approaches unity.

use crate::error::{Error, Result};
use crate::koopman::LiftedPredictor;
use crate::numerics::{
    care_residual, inverse, least_squares, logm, min_symmetric_eigenvalue, range_basis, solve,
    solve_care, spectral_abscissa, Matrix,
};

/// Outcome of the Riccati-based certificate.
#[derive(Debug, Clone)]
pub struct StabilityCertificate {
    pub p: Matrix,
    /// State feedback gain K = R^-1 B' P; the certified loop is
    /// xdot = (A + L - B K) x.
    pub k_gain: Matrix,
    pub riccati_residual: f64,
    pub min_eig_p: f64,
    /// Smallest eigenvalue of Q + P B R^-1 B' P, the decrease rate of the
    /// quadratic Lyapunov function along the closed loop.
    pub lyapunov_decrease_margin: f64,
}

impl StabilityCertificate {
    pub fn is_valid(&self) -> bool {
        self.min_eig_p > 0.0 && self.riccati_residual < 1e-6 && self.lyapunov_decrease_margin > 0.0
    }
}

/// Solve the consensus CARE and assemble the certificate quantities.
pub fn stability_certificate(
    a_cont: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    laplacian: &Matrix,
) -> Result<StabilityCertificate> {
    let p = solve_care(a_cont, b, q, r, laplacian)?;
    let residual = care_residual(a_cont, b, q, r, laplacian, &p).frobenius_norm();
    let min_eig_p = min_symmetric_eigenvalue(&p)?;
    let r_inv = inverse(r)?;
    let k_gain = &(&r_inv * &b.transpose()) * &p;
    let pbrbp = &(&(&p * b) * &r_inv) * &(&b.transpose() * &p);
    let margin_matrix = (q + &pbrbp).symmetrized();
    let lyapunov_decrease_margin = min_symmetric_eigenvalue(&margin_matrix)?;
    Ok(StabilityCertificate {
        p,
        k_gain,
        riccati_residual: residual,
        min_eig_p,
        lyapunov_decrease_margin,
    })
}

/// Continuous-time bridge of one fitted predictor: deflated drift and the
/// zero-order-hold-consistent input column.
#[derive(Debug, Clone)]
pub struct ContinuousAgent {
    pub a_cont: Matrix,
    pub b_cont: Matrix,
    /// Orthonormal basis of the retained lifted subspace (lift dim x k).
    pub basis: Matrix,
}

/// Relative singular-value cutoff that separates the dictionary's
/// rank-deficiency zero mode from the dynamic modes.
const DEFLATION_TOL: f64 = 1e-6;

pub fn continuous_bridge(predictor: &LiftedPredictor) -> Result<ContinuousAgent> {
    let a = &predictor.a;
    let w = range_basis(a, DEFLATION_TOL);
    // range(A) is A-invariant, so W' A W is the exact restriction
    let a_red = &(&w.transpose() * a) * &w;
    let b_red = &w.transpose() * &predictor.b;
    let a_cont = logm(&a_red)?.scale(1.0 / predictor.sample_dt);
    // B_d = a^-1 (A - I) b_c  =>  b_c = (A - I)^-1 a B_d
    let k = a_red.rows();
    let shifted = &a_red - &Matrix::identity(k);
    let ab = &a_cont * &b_red;
    let b_cont = match solve(&shifted, &ab) {
        Ok(x) => x,
        Err(_) => b_red.scale(1.0 / predictor.sample_dt),
    };
    Ok(ContinuousAgent {
        a_cont,
        b_cont,
        basis: w,
    })
}

/// The stacked continuous-time system of all agents: block-diagonal drift
/// and input matrices plus the Laplacian coupling expanded to the lifted
/// block dimension.
#[derive(Debug, Clone)]
pub struct AggregateSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub l_block: Matrix,
    /// Per-agent retained subspace dimension.
    pub block_dim: usize,
}

pub fn aggregate_system(
    predictors: &[LiftedPredictor],
    laplacian: &Matrix,
) -> Result<AggregateSystem> {
    let n_agents = predictors.len();
    if laplacian.rows() != n_agents || laplacian.cols() != n_agents {
        return Err(Error::DimensionMismatch("laplacian vs predictor count".into()));
    }
    if n_agents == 0 {
        return Err(Error::InvalidArgument("no predictors".into()));
    }
    let bridges: Vec<ContinuousAgent> = predictors
        .iter()
        .map(continuous_bridge)
        .collect::<Result<_>>()?;
    let k = bridges[0].a_cont.rows();
    for br in &bridges {
        if br.a_cont.rows() != k {
            return Err(Error::InvalidArgument(
                "agents deflate to different subspace dimensions".into(),
            ));
        }
    }
    let n = n_agents * k;
    let mut a = Matrix::zeros(n, n);
    let mut b = Matrix::zeros(n, n_agents);
    for (i, br) in bridges.iter().enumerate() {
        a.set_block(i * k, i * k, &br.a_cont);
        for row in 0..k {
            b[(i * k + row, i)] = br.b_cont[(row, 0)];
        }
    }
    let l_block = laplacian.kron(&Matrix::identity(k));
    Ok(AggregateSystem {
        a,
        b,
        l_block,
        block_dim: k,
    })
}

/// Build the aggregate certificate for a set of agents coupled by the
/// communication Laplacian, with scalar state/input weights applied
/// identically to every agent (the shipped scenarios use one tuning).
pub fn certificate_from_predictors(
    predictors: &[LiftedPredictor],
    laplacian: &Matrix,
    q_weight: f64,
    r_weight: f64,
) -> Result<StabilityCertificate> {
    let sys = aggregate_system(predictors, laplacian)?;
    let n = sys.a.rows();
    let q = Matrix::identity(n).scale(q_weight);
    let r = Matrix::identity(predictors.len()).scale(r_weight);
    stability_certificate(&sys.a, &sys.b, &q, &r, &sys.l_block)
}

/// Verify the Lyapunov decrease of a certificate by explicit closed-loop
/// rollouts: x' P x must be strictly decreasing along
/// xdot = (A + L) x + B u, u = -K x, from every sampled initial state.
pub fn verify_decrease_by_rollout(
    cert: &StabilityCertificate,
    a_cont: &Matrix,
    b: &Matrix,
    laplacian: &Matrix,
    initial_states: &[Vec<f64>],
    dt: f64,
    steps: usize,
) -> Result<bool> {
    let a_cl = &(a_cont + laplacian) - &(b * &cert.k_gain);
    // integrate with a step well inside the stability region
    let abscissa = spectral_abscissa(&a_cl)?;
    if abscissa >= 0.0 {
        return Ok(false);
    }
    for x0 in initial_states {
        let mut x = x0.clone();
        let mut lyap = quadratic_form(&cert.p, &x);
        for _ in 0..steps {
            let dx = a_cl.matvec(&x);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += dt * di;
            }
            let next = quadratic_form(&cert.p, &x);
            if next >= lyap {
                return Ok(false);
            }
            lyap = next;
        }
    }
    Ok(true)
}

fn quadratic_form(p: &Matrix, x: &[f64]) -> f64 {
    crate::numerics::dot(x, &p.matvec(x))
}

/// Steady-state input from the relation x* = (I - A)^-1 B u, solved in the
/// least-squares sense. The fitted lifted matrices typically carry an
/// eigenvalue at (numerically) one, so the near-singularity of (I - A) is
/// measured and reported instead of resolved.
#[derive(Debug, Clone)]
pub struct SteadyStateInput {
    pub u: Matrix,
    /// || B u - (I - A) x* ||_F.
    pub residual: f64,
    /// min |1 - lambda(A)|: the distance of the spectrum from unity.
    pub unit_eigenvalue_gap: f64,
    pub near_singular: bool,
}

pub fn steady_state_input(a: &Matrix, b: &Matrix, x_star: &[f64]) -> Result<SteadyStateInput> {
    if !a.is_square() || a.rows() != b.rows() || a.rows() != x_star.len() {
        return Err(Error::DimensionMismatch("steady_state_input".into()));
    }
    let eig = crate::numerics::eigenvalues(a)?;
    let unit_eigenvalue_gap = eig
        .values
        .iter()
        .map(|v| (v - 1.0).norm())
        .fold(f64::INFINITY, f64::min);
    let n = a.rows();
    let i_minus_a = &Matrix::identity(n) - a;
    let rhs = Matrix::column(&i_minus_a.matvec(x_star));
    let u = least_squares(b, &rhs)?;
    let residual = (&(b * &u) - &rhs).frobenius_norm();
    Ok(SteadyStateInput {
        u,
        residual,
        unit_eigenvalue_gap,
        near_singular: unit_eigenvalue_gap < 1e-3,
    })
}
