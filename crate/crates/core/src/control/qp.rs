//! Dense primal active-set solver for the small strictly convex QPs the
//! per-agent controllers produce (<= ~25 variables, <= ~50 inequality
//! rows). Warm starts come from the previous receding-horizon solution.

use crate::error::{Error, Result};
use crate::numerics::{Lu, Matrix};

/// min 1/2 u'Hu + g'u  s.t.  G u <= h, with H symmetric positive definite.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: Matrix,
    pub gradient: Vec<f64>,
    pub constraint_matrix: Matrix,
    pub constraint_rhs: Vec<f64>,
}

impl QpProblem {
    pub fn n_vars(&self) -> usize {
        self.hessian.rows()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraint_rhs.len()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        let hu = self.hessian.matvec(u);
        0.5 * crate::numerics::dot(u, &hu) + crate::numerics::dot(&self.gradient, u)
    }

    fn violation(&self, u: &[f64]) -> f64 {
        let gu = self.constraint_matrix.matvec(u);
        gu.iter()
            .zip(&self.constraint_rhs)
            .fold(0.0f64, |m, (lhs, rhs)| m.max(lhs - rhs))
    }
}

/// First-order optimality diagnostics of an accepted solution.
#[derive(Debug, Clone)]
pub struct KktReport {
    pub iterations: usize,
    pub stationarity: f64,
    pub primal_violation: f64,
    pub complementarity: f64,
    pub active_set: Vec<usize>,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_violation)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: Vec<f64>,
    pub kkt: KktReport,
    pub multipliers: Vec<f64>,
}

const FEAS_TOL: f64 = 1e-9;

/// Solve the QP. The warm start is used when it is feasible; otherwise a
/// feasible point is constructed (phase-1 when necessary). Infeasible
/// constraint systems are reported as `QpInfeasible`, distinct from
/// numerical breakdown.
pub fn solve_qp(qp: &QpProblem, warm_start: Option<&[f64]>) -> Result<QpSolution> {
    let n = qp.n_vars();
    if qp.hessian.cols() != n || qp.gradient.len() != n {
        return Err(Error::DimensionMismatch("qp hessian/gradient".into()));
    }
    if qp.constraint_matrix.rows() != qp.n_constraints()
        || (qp.n_constraints() > 0 && qp.constraint_matrix.cols() != n)
    {
        return Err(Error::DimensionMismatch("qp constraints".into()));
    }
    let start = find_feasible_start(qp, warm_start)?;
    active_set_solve(qp, start)
}

fn find_feasible_start(qp: &QpProblem, warm_start: Option<&[f64]>) -> Result<Vec<f64>> {
    if let Some(w) = warm_start {
        if w.len() == qp.n_vars() && qp.violation(w) <= FEAS_TOL {
            return Ok(w.to_vec());
        }
    }
    let zero = vec![0.0; qp.n_vars()];
    if qp.violation(&zero) <= FEAS_TOL {
        return Ok(zero);
    }
    phase_one(qp)
}

/// Phase-1: minimize a heavily weighted shared slack that relaxes every
/// constraint; a strictly positive optimum certifies infeasibility.
fn phase_one(qp: &QpProblem) -> Result<Vec<f64>> {
    let n = qp.n_vars();
    let m = qp.n_constraints();
    let mut hessian = Matrix::identity(n + 1).scale(1e-6);
    hessian[(n, n)] = 1.0;
    let mut gradient = vec![0.0; n + 1];
    gradient[n] = 1e8;
    let mut cons = Matrix::zeros(m + 1, n + 1);
    let mut rhs = vec![0.0; m + 1];
    for i in 0..m {
        for j in 0..n {
            cons[(i, j)] = qp.constraint_matrix[(i, j)];
        }
        cons[(i, n)] = -1.0;
        rhs[i] = qp.constraint_rhs[i];
    }
    cons[(m, n)] = -1.0; // s >= 0
    rhs[m] = 0.0;
    let aug = QpProblem {
        hessian,
        gradient,
        constraint_matrix: cons,
        constraint_rhs: rhs,
    };
    // s = max violation at u = 0 is always feasible for the augmented QP
    let mut start = vec![0.0; n + 1];
    start[n] = qp.violation(&vec![0.0; n]).max(0.0) + 1.0;
    let sol = active_set_solve(&aug, start)?;
    let s_opt = sol.u[n];
    if s_opt > 1e-6 {
        return Err(Error::QpInfeasible(format!(
            "constraints cannot be satisfied (phase-1 slack {s_opt:.3e})"
        )));
    }
    let u = sol.u[..n].to_vec();
    Ok(u)
}

fn active_set_solve(qp: &QpProblem, mut u: Vec<f64>) -> Result<QpSolution> {
    let n = qp.n_vars();
    let m = qp.n_constraints();
    let gmat = &qp.constraint_matrix;
    let mut active: Vec<usize> = (0..m)
        .filter(|&i| {
            let gu = crate::numerics::dot(gmat.row(i), &u);
            (gu - qp.constraint_rhs[i]).abs() <= FEAS_TOL
        })
        .collect();
    // keep the working set no larger than n to preserve KKT solvability
    active.truncate(n);
    // row added by the last degenerate (alpha = 0) step; banned from an
    // immediate drop so add/drop pairs cannot cycle
    let mut just_added: Option<usize> = None;

    let max_iter = 50 * (n + m + 1);
    for iteration in 0..max_iter {
        // equality-constrained step: [[H, Ga'], [Ga, 0]] [p; lam] = [-(Hu+g); 0]
        let na = active.len();
        let mut kkt = Matrix::zeros(n + na, n + na);
        kkt.set_block(0, 0, &qp.hessian);
        for (row, &ci) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + row, j)] = gmat[(ci, j)];
                kkt[(j, n + row)] = gmat[(ci, j)];
            }
        }
        let hu = qp.hessian.matvec(&u);
        let mut rhs = vec![0.0; n + na];
        for j in 0..n {
            rhs[j] = -(hu[j] + qp.gradient[j]);
        }
        let lu = match Lu::factor(&kkt) {
            Ok(f) => f,
            Err(_) => {
                // dependent working set: drop the most recent row
                if active.pop().is_none() {
                    return Err(Error::QpNumerical("singular KKT with empty working set".into()));
                }
                just_added = None;
                continue;
            }
        };
        let mut sol = lu.solve_vec(&rhs);
        // one refinement pass keeps optimality residuals near rounding even
        // when the penalty column skews the KKT conditioning
        {
            let kr = kkt.matvec(&sol);
            let resid: Vec<f64> = rhs.iter().zip(&kr).map(|(b, a)| b - a).collect();
            let corr = lu.solve_vec(&resid);
            for (s, c) in sol.iter_mut().zip(&corr) {
                *s += c;
            }
        }
        let p = &sol[..n];
        let lambda = &sol[n..];
        let p_norm = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let u_scale = 1.0 + u.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        if p_norm <= 1e-10 * u_scale {
            // stationary on the working set: check multiplier signs,
            // dropping the lowest-index most-negative row (Bland-style)
            let mut worst: Option<usize> = None;
            let mut worst_val = -1e-9 * u_scale;
            for (row, &lam) in lambda.iter().enumerate() {
                if lam < worst_val && just_added != Some(active[row]) {
                    worst_val = lam;
                    worst = Some(row);
                }
            }
            match worst {
                None => {
                    let mut multipliers = vec![0.0; m];
                    for (row, &ci) in active.iter().enumerate() {
                        multipliers[ci] = lambda[row].max(0.0);
                    }
                    let report = build_report(qp, &u, &multipliers, &active, iteration + 1);
                    return Ok(QpSolution {
                        u,
                        kkt: report,
                        multipliers,
                    });
                }
                Some(row) => {
                    active.remove(row);
                    just_added = None;
                }
            }
            continue;
        }

        // ratio test against inactive constraints; ties resolve to the
        // lowest row index for determinism
        let mut alpha = 1.0f64;
        let mut blocking: Option<usize> = None;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let gp = crate::numerics::dot(gmat.row(i), p);
            if gp > 1e-12 * (1.0 + p_norm) {
                let slack = (qp.constraint_rhs[i] - crate::numerics::dot(gmat.row(i), &u)).max(0.0);
                let ratio = slack / gp;
                if ratio < alpha - 1e-14 {
                    alpha = ratio;
                    blocking = Some(i);
                }
            }
        }
        if alpha > 0.0 {
            for (j, uj) in u.iter_mut().enumerate() {
                *uj += alpha * p[j];
            }
            just_added = None;
        }
        match blocking {
            Some(bi) => {
                if active.len() == n {
                    // overdetermined vertex: make room by dropping the
                    // most negative multiplier first
                    let mut worst: Option<usize> = None;
                    let mut worst_val = f64::INFINITY;
                    for (row, &lam) in lambda.iter().enumerate() {
                        if lam < worst_val && just_added != Some(active[row]) {
                            worst_val = lam;
                            worst = Some(row);
                        }
                    }
                    match worst {
                        Some(row) => {
                            active.remove(row);
                        }
                        None => {
                            return Err(Error::QpNumerical(
                                "degenerate vertex with saturated working set".into(),
                            ))
                        }
                    }
                }
                active.push(bi);
                if alpha == 0.0 {
                    just_added = Some(bi);
                }
            }
            None => {
                just_added = None;
            }
        }
    }
    Err(Error::QpNumerical("active-set iteration budget exhausted".into()))
}

fn build_report(
    qp: &QpProblem,
    u: &[f64],
    multipliers: &[f64],
    active: &[usize],
    iterations: usize,
) -> KktReport {
    let n = qp.n_vars();
    let hu = qp.hessian.matvec(u);
    let mut stat = vec![0.0f64; n];
    for j in 0..n {
        stat[j] = hu[j] + qp.gradient[j];
    }
    for (i, &lam) in multipliers.iter().enumerate() {
        if lam != 0.0 {
            for j in 0..n {
                stat[j] += lam * qp.constraint_matrix[(i, j)];
            }
        }
    }
    let stationarity = stat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gu = if qp.n_constraints() > 0 {
        qp.constraint_matrix.matvec(u)
    } else {
        Vec::new()
    };
    let mut primal = 0.0f64;
    let mut compl = 0.0f64;
    for i in 0..qp.n_constraints() {
        let slack = gu[i] - qp.constraint_rhs[i];
        primal = primal.max(slack);
        compl = compl.max((multipliers[i] * slack).abs());
    }
    KktReport {
        iterations,
        stationarity,
        primal_violation: primal.max(0.0),
        complementarity: compl,
        active_set: active.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::inverse;

    fn unconstrained(h: Matrix, g: Vec<f64>) -> QpProblem {
        let n = h.rows();
        QpProblem {
            hessian: h,
            gradient: g,
            constraint_matrix: Matrix::zeros(0, n),
            constraint_rhs: vec![],
        }
    }

    #[test]
    fn unconstrained_matches_closed_form() {
        let h = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let g = vec![-1.0, -2.0];
        let qp = unconstrained(h.clone(), g.clone());
        let sol = solve_qp(&qp, None).unwrap();
        let expect = inverse(&h).unwrap().matvec(&[1.0, 2.0]);
        for j in 0..2 {
            assert!((sol.u[j] - expect[j]).abs() < 1e-9);
        }
        assert!(sol.kkt.max_residual() < 1e-8);
    }

    #[test]
    fn active_upper_bound_lands_on_boundary() {
        // min (u-5)^2 s.t. u <= 2
        let qp = QpProblem {
            hessian: Matrix::diag(&[2.0]),
            gradient: vec![-10.0],
            constraint_matrix: Matrix::from_rows(&[vec![1.0]]).unwrap(),
            constraint_rhs: vec![2.0],
        };
        let sol = solve_qp(&qp, None).unwrap();
        assert!((sol.u[0] - 2.0).abs() < 1e-10);
        assert!(sol.multipliers[0] >= 0.0);
        assert!(sol.kkt.max_residual() < 1e-8);
    }

    #[test]
    fn matches_active_set_enumeration_oracle() {
        // random strictly convex 3-var QPs with box rows, checked against
        // brute-force enumeration of all active subsets
        let mut s = 31u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for trial in 0..30 {
            let n = 3;
            let m_rand = Matrix::from_fn(n, n, |_, _| next());
            let h = &(&m_rand.transpose() * &m_rand) + &Matrix::identity(n).scale(0.5);
            let g: Vec<f64> = (0..n).map(|_| 2.0 * next()).collect();
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for j in 0..n {
                let mut up = vec![0.0; n];
                up[j] = 1.0;
                rows.push(up);
                rhs.push(0.4 + 0.3 * next().abs());
                let mut lo = vec![0.0; n];
                lo[j] = -1.0;
                rows.push(lo);
                rhs.push(0.4 + 0.3 * next().abs());
            }
            let qp = QpProblem {
                hessian: h.clone(),
                gradient: g.clone(),
                constraint_matrix: Matrix::from_rows(&rows).unwrap(),
                constraint_rhs: rhs.clone(),
            };
            let sol = solve_qp(&qp, None).unwrap();
            assert!(sol.kkt.max_residual() < 1e-8, "kkt residual too large");

            // oracle: enumerate subsets of constraints as equalities
            let m = rhs.len();
            let mut best: Option<(f64, Vec<f64>)> = None;
            for mask in 0u32..(1 << m) {
                let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
                if act.len() > n {
                    continue;
                }
                let na = act.len();
                let mut kkt = Matrix::zeros(n + na, n + na);
                kkt.set_block(0, 0, &h);
                for (r_i, &ci) in act.iter().enumerate() {
                    for j in 0..n {
                        kkt[(n + r_i, j)] = qp.constraint_matrix[(ci, j)];
                        kkt[(j, n + r_i)] = qp.constraint_matrix[(ci, j)];
                    }
                }
                let mut rv = vec![0.0; n + na];
                for j in 0..n {
                    rv[j] = -g[j];
                }
                for (r_i, &ci) in act.iter().enumerate() {
                    rv[n + r_i] = rhs[ci];
                }
                let Ok(lu) = Lu::factor(&kkt) else { continue };
                let xs = lu.solve_vec(&rv);
                let u = &xs[..n];
                let lam = &xs[n..];
                if lam.iter().any(|&l| l < -1e-9) {
                    continue;
                }
                let feas = (0..m).all(|i| {
                    crate::numerics::dot(qp.constraint_matrix.row(i), u) <= rhs[i] + 1e-9
                });
                if !feas {
                    continue;
                }
                let obj = qp.objective(u);
                if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                    best = Some((obj, u.to_vec()));
                }
            }
            let (obj_oracle, u_oracle) = best.expect("oracle found no KKT point");
            assert!(
                (qp.objective(&sol.u) - obj_oracle).abs() < 1e-7,
                "trial {trial}: objective {} vs oracle {obj_oracle}, u {:?} vs {:?}",
                qp.objective(&sol.u),
                sol.u,
                u_oracle
            );
        }
    }

    #[test]
    fn matches_projected_gradient_oracle_on_boxes() {
        let mut s = 77u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..10 {
            let n = 5;
            let m_rand = Matrix::from_fn(n, n, |_, _| next());
            let h = &(&m_rand.transpose() * &m_rand) + &Matrix::identity(n);
            let g: Vec<f64> = (0..n).map(|_| 3.0 * next()).collect();
            let lo: Vec<f64> = (0..n).map(|_| -0.5 - 0.2 * next().abs()).collect();
            let hi: Vec<f64> = (0..n).map(|_| 0.5 + 0.2 * next().abs()).collect();
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            for j in 0..n {
                let mut up = vec![0.0; n];
                up[j] = 1.0;
                rows.push(up);
                rhs.push(hi[j]);
                let mut dn = vec![0.0; n];
                dn[j] = -1.0;
                rows.push(dn);
                rhs.push(-lo[j]);
            }
            let qp = QpProblem {
                hessian: h.clone(),
                gradient: g.clone(),
                constraint_matrix: Matrix::from_rows(&rows).unwrap(),
                constraint_rhs: rhs,
            };
            let sol = solve_qp(&qp, None).unwrap();

            // projected gradient descent to convergence
            let lip: f64 = (0..n).map(|i| h.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
            let step = 1.0 / lip;
            let mut u = vec![0.0; n];
            for _ in 0..200_000 {
                let grad = {
                    let mut gr = h.matvec(&u);
                    for j in 0..n {
                        gr[j] += g[j];
                    }
                    gr
                };
                let mut moved = 0.0f64;
                for j in 0..n {
                    let nu = (u[j] - step * grad[j]).clamp(lo[j], hi[j]);
                    moved = moved.max((nu - u[j]).abs());
                    u[j] = nu;
                }
                if moved < 1e-13 {
                    break;
                }
            }
            assert!(
                (qp.objective(&sol.u) - qp.objective(&u)).abs() < 1e-6,
                "objective {} vs pg {}",
                qp.objective(&sol.u),
                qp.objective(&u)
            );
        }
    }

    #[test]
    fn infeasible_is_reported_distinctly() {
        // u <= -1 and -u <= -2 (u >= 2): empty
        let qp = QpProblem {
            hessian: Matrix::diag(&[2.0]),
            gradient: vec![0.0],
            constraint_matrix: Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            constraint_rhs: vec![-1.0, -2.0],
        };
        match solve_qp(&qp, None) {
            Err(Error::QpInfeasible(_)) => {}
            other => panic!("expected QpInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn warm_start_feasible_is_used() {
        let qp = QpProblem {
            hessian: Matrix::diag(&[2.0, 2.0]),
            gradient: vec![-2.0, -2.0],
            constraint_matrix: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            constraint_rhs: vec![10.0, 10.0],
        };
        let sol = solve_qp(&qp, Some(&[0.5, 0.5])).unwrap();
        assert!((sol.u[0] - 1.0).abs() < 1e-9);
        assert!((sol.u[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn phase_one_recovers_from_infeasible_origin() {
        // feasible set is u in [3, 5]; origin infeasible
        let qp = QpProblem {
            hessian: Matrix::diag(&[2.0]),
            gradient: vec![0.0],
            constraint_matrix: Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
            constraint_rhs: vec![5.0, -3.0],
        };
        let sol = solve_qp(&qp, None).unwrap();
        assert!((sol.u[0] - 3.0).abs() < 1e-6, "u = {}", sol.u[0]);
    }
}
