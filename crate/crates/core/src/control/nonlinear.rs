//! Nonlinear MPC baseline: per-agent receding-horizon problem constrained
//! by the discrete droop dynamics, solved by sequential quadratic
//! approximation (Gauss-Newton re-linearization of the rollout, each pass
//! reusing the same active-set QP machinery as the Koopman controller).
//! Neighbor voltages are frozen at their measured values over the horizon.

use crate::control::mpc::MpcWeights;
use crate::control::qp::{solve_qp, QpProblem};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Parallelism};
use crate::grid::{timed, ControlOutput, Controller, GridState, MicrogridModel};
use crate::numerics::Matrix;

/// Scalar discrete dynamics of one inverter with neighbors frozen:
/// V+ = V + T f(V, u).
#[derive(Debug, Clone)]
struct FrozenPlant {
    tau: f64,
    nq: f64,
    v_ref: f64,
    q_ref: f64,
    q_load: f64,
    /// Sum_j B_ij.
    b_sum: f64,
    /// Sum_j B_ij * v_j at the measurement snapshot.
    bv: f64,
    /// Discretization step (controller sample time).
    t_step: f64,
}

impl FrozenPlant {
    fn f(&self, v: f64, u: f64) -> f64 {
        (-v + self.v_ref + u - self.nq * (self.q_load + v * v * self.b_sum - v * self.bv - self.q_ref))
            / self.tau
    }

    fn df_dv(&self, v: f64) -> f64 {
        (-1.0 - self.nq * (2.0 * v * self.b_sum - self.bv)) / self.tau
    }

    fn step(&self, v: f64, u: f64) -> f64 {
        v + self.t_step * self.f(v, u)
    }

    fn rollout(&self, v0: f64, u: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(u.len());
        let mut v = v0;
        for &uk in u {
            v = self.step(v, uk);
            out.push(v);
        }
        out
    }

    fn cost(&self, v0: f64, u: &[f64], w: &MpcWeights) -> f64 {
        self.rollout(v0, u)
            .iter()
            .map(|v| w.q * (v - self.v_ref).powi(2))
            .sum::<f64>()
            + u.iter().map(|uk| w.r * uk * uk).sum::<f64>()
    }
}

/// Result of one nonlinear solve.
#[derive(Debug, Clone)]
pub struct NonlinearStep {
    pub u: f64,
    pub u_sequence: Vec<f64>,
    pub solve_time_s: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const SQP_TOL: f64 = 1e-6;
pub const SQP_MAX_ITER: usize = 50;

/// Solve the per-agent nonlinear horizon problem by Gauss-Newton.
///
/// Non-convergence within the budget returns the best iterate, flagged.
pub fn nonlinear_mpc_step(
    agent_index: usize,
    state: &GridState,
    model: &MicrogridModel,
    q_loads: &[f64],
    weights: &MpcWeights,
    warm_start: &[f64],
) -> Result<NonlinearStep> {
    weights.validate()?;
    let i = agent_index;
    let params = &model.inverters[i];
    let b_row = model.topology.susceptance.row(i);
    let plant = FrozenPlant {
        tau: params.tau,
        nq: params.nq,
        v_ref: params.v_ref,
        q_ref: params.q_ref,
        q_load: q_loads[i],
        b_sum: b_row.iter().sum(),
        bv: b_row.iter().zip(&state.v).map(|(b, v)| b * v).sum(),
        t_step: weights.sample_time,
    };
    let v0 = state.v[i];
    let h_p = weights.h_p;
    let mut u: Vec<f64> = if warm_start.len() == h_p {
        warm_start.to_vec()
    } else {
        vec![0.0; h_p]
    };
    let ((best_u, iterations, converged), elapsed) = timed(|| {
        let mut best = (plant.cost(v0, &u, weights), u.clone());
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..SQP_MAX_ITER {
            iterations = it + 1;
            let u_new = match gauss_newton_pass(&plant, v0, &u, weights) {
                Ok(x) => x,
                Err(_) => break,
            };
            let cost = plant.cost(v0, &u_new, weights);
            if cost < best.0 {
                best = (cost, u_new.clone());
            }
            let delta = u
                .iter()
                .zip(&u_new)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            u = u_new;
            if delta < SQP_TOL {
                converged = true;
                break;
            }
        }
        (best.1, iterations, converged)
    });
    Ok(NonlinearStep {
        u: best_u[0],
        u_sequence: best_u,
        solve_time_s: elapsed,
        iterations,
        converged,
    })
}

/// One Gauss-Newton pass: linearize the rollout around `u0`, solve the
/// resulting box-constrained QP in absolute inputs.
fn gauss_newton_pass(
    plant: &FrozenPlant,
    v0: f64,
    u0: &[f64],
    w: &MpcWeights,
) -> Result<Vec<f64>> {
    let h_p = u0.len();
    let v_traj = plant.rollout(v0, u0);
    // a_k = d step / d v at V_k-1 (state entering step k), b = T / tau
    let b_gain = plant.t_step / plant.tau;
    let mut a_coef = Vec::with_capacity(h_p);
    let mut v_prev = v0;
    for &vk in &v_traj {
        a_coef.push(1.0 + plant.t_step * plant.df_dv(v_prev));
        v_prev = vk;
    }
    // theta[k][i] = dV_k/du_i = b * prod_{j=i+1..k} a_j  (1-based steps)
    let mut theta = Matrix::zeros(h_p, h_p);
    for k in 0..h_p {
        for i in 0..=k {
            let mut sens = b_gain;
            for j in i + 1..=k {
                sens *= a_coef[j];
            }
            theta[(k, i)] = sens;
        }
    }
    // linearized prediction: V(u) ~= phi + theta u, phi = V(u0) - theta u0
    let tu0 = theta.matvec(u0);
    let phi: Vec<f64> = v_traj.iter().zip(&tu0).map(|(v, t)| v - t).collect();
    let tt = &theta.transpose() * &theta;
    let hessian = &tt.scale(2.0 * w.q) + &Matrix::identity(h_p).scale(2.0 * w.r);
    let dev: Vec<f64> = phi.iter().map(|p| p - plant.v_ref).collect();
    let gradient: Vec<f64> = theta
        .transpose()
        .matvec(&dev)
        .iter()
        .map(|v| 2.0 * w.q * v)
        .collect();
    // voltage box rows first, actuator bounds after (kept hard under the
    // softened variant)
    let mut cons = Matrix::zeros(4 * h_p, h_p);
    let mut rhs = vec![0.0; 4 * h_p];
    for k in 0..h_p {
        for i in 0..h_p {
            cons[(k, i)] = theta[(k, i)];
            cons[(h_p + k, i)] = -theta[(k, i)];
        }
        rhs[k] = w.v_max - phi[k];
        rhs[h_p + k] = phi[k] - w.v_min;
        cons[(2 * h_p + k, k)] = 1.0;
        rhs[2 * h_p + k] = w.u_max;
        cons[(3 * h_p + k, k)] = -1.0;
        rhs[3 * h_p + k] = w.u_max;
    }
    let qp = QpProblem {
        hessian,
        gradient,
        constraint_matrix: cons,
        constraint_rhs: rhs,
    };
    let outside = v0 < w.v_min || v0 > w.v_max;
    if outside {
        let soft = super::mpc::soften_qp(&qp, 2 * h_p);
        let mut warm: Vec<f64> = u0.iter().map(|u| u.clamp(-w.u_max, w.u_max)).collect();
        let viol = {
            let gu = qp.constraint_matrix.matvec(&warm);
            gu.iter()
                .take(2 * h_p)
                .zip(&qp.constraint_rhs)
                .fold(0.0f64, |m, (l, r)| m.max(l - r))
        };
        warm.push(viol.max(0.0) + 1.0);
        let sol = solve_qp(&soft, Some(&warm))?;
        Ok(sol.u[..h_p].to_vec())
    } else {
        let sol = solve_qp(&qp, Some(&u0.iter().map(|u| u.clamp(-w.u_max, w.u_max)).collect::<Vec<_>>()))?;
        Ok(sol.u)
    }
}

/// Telemetry of one nonlinear round.
#[derive(Debug, Clone)]
pub struct NonlinearRoundLog {
    pub t: f64,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
}

/// Plant-wide nonlinear MPC: independent per-agent solves, same barrier
/// round structure as the Koopman controller.
pub struct NonlinearMpc {
    pub weights: MpcWeights,
    pub parallelism: Parallelism,
    warm: Vec<Vec<f64>>,
    last_applied: Vec<f64>,
    pub rounds: Vec<NonlinearRoundLog>,
}

impl NonlinearMpc {
    pub fn new(n: usize, weights: MpcWeights, parallelism: Parallelism) -> Result<NonlinearMpc> {
        weights.validate()?;
        Ok(NonlinearMpc {
            warm: vec![vec![0.0; weights.h_p]; n],
            last_applied: vec![0.0; n],
            weights,
            parallelism,
            rounds: Vec::new(),
        })
    }
}

impl Controller for NonlinearMpc {
    fn sample_time(&self) -> f64 {
        self.weights.sample_time
    }

    fn control(
        &mut self,
        t: f64,
        state: &GridState,
        model: &MicrogridModel,
        q_loads: &[f64],
    ) -> Result<ControlOutput> {
        let n = model.n();
        if self.warm.len() != n {
            return Err(Error::DimensionMismatch("nonlinear controller size".into()));
        }
        let weights = self.weights.clone();
        let warm = self.warm.clone();
        let steps = map_indexed(self.parallelism, n, |i| {
            nonlinear_mpc_step(i, state, model, q_loads, &weights, &warm[i])
        });
        let mut u = Vec::with_capacity(n);
        let mut times = Vec::with_capacity(n);
        let mut log = NonlinearRoundLog {
            t,
            iterations: Vec::new(),
            converged: Vec::new(),
        };
        for (i, s) in steps.into_iter().enumerate() {
            match s {
                Ok(step) => {
                    // shift for the next round's warm start
                    let mut w = step.u_sequence[1..].to_vec();
                    w.push(*step.u_sequence.last().unwrap());
                    self.warm[i] = w;
                    self.last_applied[i] = step.u;
                    u.push(step.u);
                    times.push(step.solve_time_s);
                    log.iterations.push(step.iterations);
                    log.converged.push(step.converged);
                }
                Err(_) => {
                    u.push(self.last_applied[i]);
                    times.push(0.0);
                    log.iterations.push(0);
                    log.converged.push(false);
                }
            }
        }
        self.rounds.push(log);
        Ok(ControlOutput { u, solve_time_s: times })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BusNetwork, InverterParams, Line, LoadMapStrategy};
    use std::collections::BTreeMap;

    fn weights(h_p: usize) -> MpcWeights {
        MpcWeights {
            q: 1.0,
            r: 1.0,
            s: 0.0,
            h_p,
            sample_time: 0.01,
            v_min: 100.0,
            v_max: 200.0,
            u_max: 5.0,
        }
    }

    fn model_with_susceptance(b: f64) -> MicrogridModel {
        let omega = 2.0 * std::f64::consts::PI * 60.0;
        let inductance = if b > 0.0 { 1.0 / (omega * b) } else { 1.0 };
        let net = BusNetwork {
            n_nodes: 2,
            lines: vec![Line {
                id: "B1".into(),
                from: 1,
                to: 2,
                inductance_h: inductance,
                closed: b > 0.0,
            }],
            frequency_hz: 60.0,
        };
        let inv = |node| InverterParams {
            node,
            v_ref: 169.7056,
            q_ref: 0.0,
            p_ref: 10_000.0,
            nq: 1e-4,
            mp: 1e-4,
            tau: 0.1,
        };
        MicrogridModel::new(vec![inv(1), inv(2)], net, LoadMapStrategy::default(), &BTreeMap::new()).unwrap()
    }

    #[test]
    fn linear_limit_matches_linear_mpc() {
        // with zero susceptance the plant is first-order linear; the SQP
        // must converge in one pass to the linear MPC solution computed
        // here from explicit condensation
        let model = model_with_susceptance(0.0);
        let w = weights(4);
        let state = GridState {
            t: 0.0,
            v: vec![168.0, 168.0],
            q_mean: vec![0.0; 2],
            delta: vec![0.0; 2],
        };
        let step = nonlinear_mpc_step(0, &state, &model, &[0.0, 0.0], &w, &[0.0; 4]).unwrap();
        assert!(step.converged);

        // explicit linear condensation: V+ = a V + c0 + b u
        let p = &model.inverters[0];
        let a = 1.0 - w.sample_time / p.tau;
        let b = w.sample_time / p.tau;
        let c0 = w.sample_time * p.v_ref / p.tau;
        let h_p = w.h_p;
        let mut theta = Matrix::zeros(h_p, h_p);
        let mut free = vec![0.0; h_p];
        let mut v_free = 168.0;
        for k in 0..h_p {
            v_free = a * v_free + c0;
            free[k] = v_free;
            for i in 0..=k {
                theta[(k, i)] = b * a.powi((k - i) as i32);
            }
        }
        let tt = &theta.transpose() * &theta;
        let hessian = &tt.scale(2.0 * w.q) + &Matrix::identity(h_p).scale(2.0 * w.r);
        let dev: Vec<f64> = free.iter().map(|f| f - p.v_ref).collect();
        let gradient: Vec<f64> = theta.transpose().matvec(&dev).iter().map(|v| 2.0 * w.q * v).collect();
        let qp = QpProblem {
            hessian,
            gradient,
            constraint_matrix: Matrix::zeros(0, h_p),
            constraint_rhs: vec![],
        };
        let sol = solve_qp(&qp, None).unwrap();
        assert!(
            (step.u - sol.u[0]).abs() < 1e-6,
            "nonlinear {} vs linear {}",
            step.u,
            sol.u[0]
        );
    }

    #[test]
    fn horizon_one_matches_grid_search_oracle() {
        let model = model_with_susceptance(2.0);
        let w = weights(1);
        let state = GridState {
            t: 0.0,
            v: vec![167.5, 170.2],
            q_mean: vec![0.0; 2],
            delta: vec![0.0; 2],
        };
        let q_loads = [500.0, 0.0];
        let step = nonlinear_mpc_step(0, &state, &model, &q_loads, &w, &[0.0]).unwrap();

        // brute-force grid over u in [-5, 5] at 1e-4 resolution
        let params = &model.inverters[0];
        let b_row = model.topology.susceptance.row(0);
        let plant = FrozenPlant {
            tau: params.tau,
            nq: params.nq,
            v_ref: params.v_ref,
            q_ref: params.q_ref,
            q_load: q_loads[0],
            b_sum: b_row.iter().sum(),
            bv: b_row.iter().zip(&state.v).map(|(b, v)| b * v).sum(),
            t_step: w.sample_time,
        };
        let mut best = (f64::INFINITY, 0.0);
        let mut u = -5.0;
        while u <= 5.0 {
            let cost = plant.cost(167.5, &[u], &w);
            if cost < best.0 {
                best = (cost, u);
            }
            u += 1e-4;
        }
        assert!(
            (step.u - best.1).abs() <= 1.5e-4,
            "sqp {} vs grid {}",
            step.u,
            best.1
        );
    }

    #[test]
    fn controller_round_runs_all_agents() {
        let model = model_with_susceptance(1.0);
        let mut ctrl = NonlinearMpc::new(2, weights(5), Parallelism::Sequential).unwrap();
        let state = GridState {
            t: 0.0,
            v: vec![169.0, 170.0],
            q_mean: vec![0.0; 2],
            delta: vec![0.0; 2],
        };
        let out = ctrl.control(0.0, &state, &model, &[0.0, 0.0]).unwrap();
        assert_eq!(out.u.len(), 2);
        assert!(out.u.iter().all(|u| u.is_finite()));
        assert_eq!(ctrl.rounds.len(), 1);
        assert!(ctrl.rounds[0].converged.iter().all(|&c| c));
    }

    #[test]
    fn softened_path_handles_startup() {
        let model = model_with_susceptance(1.0);
        let mut w = weights(3);
        w.v_min = 165.0;
        w.v_max = 175.0;
        let state = GridState::flat_start(2);
        let step = nonlinear_mpc_step(0, &state, &model, &[0.0, 0.0], &w, &[0.0; 3]).unwrap();
        assert!(step.u.is_finite());
    }
}
