//! Voltage dynamics of the droop-controlled inverters and the forward-Euler
//! simulation loop that drives every scenario.
//!
//! The plant integrates the decoupled voltage equation
//!
//!   tau_i dV_i/dt = -V_i + V_ref_i + u_i
//!                   - nq_i (QL_i + V_i^2 Sum_j B_ij - Sum_j V_i V_j B_ij - Qref_i)
//!
//! with phases frozen at equal angles. The full angle-dependent power flow
//! exists only as a validation oracle for the decoupling assumption.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::grid::{GridState, LoadSchedule, MicrogridModel, NetworkTopology};
use crate::numerics::Matrix;

/// Injected reactive power at node i under the decoupled approximation:
/// Q_i = V_i^2 Sum_j B_ij - Sum_j V_i V_j B_ij.
pub fn reactive_power_simplified(v: &[f64], topo: &NetworkTopology, i: usize) -> f64 {
    let vi = v[i];
    let mut q = 0.0;
    for j in 0..topo.n {
        let b = topo.susceptance[(i, j)];
        if b != 0.0 {
            q += b * vi * (vi - v[j]);
        }
    }
    q
}

/// Active/reactive injection at node i from the full power-flow equations
///
///   P_i = Sum_j V_i V_j |Y_ij| cos(theta_ij + delta_j - delta_i)
///   Q_i = Sum_j V_i V_j |Y_ij| sin(theta_ij + delta_j - delta_i)
///
/// with caller-supplied admittance magnitude and angle matrices (diagonal
/// self-admittance included).
pub fn power_flow_full(
    v: &[f64],
    delta: &[f64],
    y_mag: &Matrix,
    y_angle: &Matrix,
    i: usize,
) -> (f64, f64) {
    let n = v.len();
    let mut p = 0.0;
    let mut q = 0.0;
    for j in 0..n {
        let y = y_mag[(i, j)];
        if y == 0.0 {
            continue;
        }
        let arg = y_angle[(i, j)] + delta[j] - delta[i];
        p += v[i] * v[j] * y * arg.cos();
        q += v[i] * v[j] * y * arg.sin();
    }
    (p, q)
}

/// Admittance matrices of a purely inductive reduced network: off-diagonal
/// entries carry |B_ij| at angle -pi/2, the diagonal carries the row sum at
/// +pi/2. With equal angles this collapses the full power flow exactly onto
/// the simplified reactive expression.
pub fn admittance_from_topology(topo: &NetworkTopology) -> (Matrix, Matrix) {
    let n = topo.n;
    let mut mag = Matrix::zeros(n, n);
    let mut ang = Matrix::zeros(n, n);
    for i in 0..n {
        mag[(i, i)] = topo.row_sum(i);
        ang[(i, i)] = std::f64::consts::FRAC_PI_2;
        for j in 0..n {
            if i != j && topo.susceptance[(i, j)] != 0.0 {
                mag[(i, j)] = topo.susceptance[(i, j)];
                ang[(i, j)] = -std::f64::consts::FRAC_PI_2;
            }
        }
    }
    (mag, ang)
}

/// dV/dt for all inverters at once; `q_loads` holds the reactive load
/// aggregated per inverter at the current time.
pub fn voltage_derivative(
    state: &GridState,
    u: &[f64],
    model: &MicrogridModel,
    q_loads: &[f64],
) -> Vec<f64> {
    let n = model.n();
    debug_assert_eq!(u.len(), n);
    debug_assert_eq!(q_loads.len(), n);
    (0..n)
        .map(|i| {
            let p = &model.inverters[i];
            let q_flow = reactive_power_simplified(&state.v, &model.topology, i);
            (-state.v[i] + p.v_ref + u[i] - p.nq * (q_loads[i] + q_flow - p.q_ref)) / p.tau
        })
        .collect()
}

/// One forward-Euler step; rejects non-finite results so a blow-up surfaces
/// with its time stamp instead of propagating NaNs.
pub fn step(
    state: &GridState,
    u: &[f64],
    dt: f64,
    model: &MicrogridModel,
    q_loads: &[f64],
) -> Result<GridState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("step requires dt > 0".into()));
    }
    let dv = voltage_derivative(state, u, model, q_loads);
    let v: Vec<f64> = state.v.iter().zip(&dv).map(|(vi, d)| vi + dt * d).collect();
    let q_mean: Vec<f64> = (0..model.n())
        .map(|i| {
            let p = &model.inverters[i];
            (p.v_ref + u[i] - v[i]) / p.nq
        })
        .collect();
    let next = GridState {
        t: state.t + dt,
        v,
        q_mean,
        delta: state.delta.clone(),
    };
    if !next.all_finite() {
        return Err(Error::SimulationBlowUp {
            t: next.t,
            detail: "non-finite voltage after Euler step".into(),
        });
    }
    Ok(next)
}

/// Per-round controller output: the input vector to hold until the next
/// sample plus wall-clock solve time per agent.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub solve_time_s: Vec<f64>,
}

impl ControlOutput {
    pub fn zero(n: usize) -> ControlOutput {
        ControlOutput {
            u: vec![0.0; n],
            solve_time_s: vec![0.0; n],
        }
    }
}

/// Controller called at its own sample rate; inputs are held zero-order
/// between samples.
pub trait Controller {
    /// Controller sample time; must be an integer multiple of the plant dt.
    fn sample_time(&self) -> f64;

    fn control(
        &mut self,
        t: f64,
        state: &GridState,
        model: &MicrogridModel,
        q_loads: &[f64],
    ) -> Result<ControlOutput>;
}

/// Droop-only operation: u = 0.
pub struct ZeroController {
    pub n: usize,
    pub sample_time: f64,
}

impl Controller for ZeroController {
    fn sample_time(&self) -> f64 {
        self.sample_time
    }
    fn control(
        &mut self,
        _t: f64,
        _state: &GridState,
        _model: &MicrogridModel,
        _q_loads: &[f64],
    ) -> Result<ControlOutput> {
        Ok(ControlOutput::zero(self.n))
    }
}

/// Full trajectory log of one scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub n: usize,
    pub dt: f64,
    pub t: Vec<f64>,
    /// Row-per-step voltage samples, n entries per row.
    pub v: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Measured reactive power per inverter (load + network flow).
    pub q: Vec<Vec<f64>>,
    pub solve_ms: Vec<Vec<f64>>,
}

impl ScenarioResult {
    fn with_capacity(n: usize, dt: f64, steps: usize) -> ScenarioResult {
        ScenarioResult {
            n,
            dt,
            t: Vec::with_capacity(steps),
            v: Vec::with_capacity(steps),
            u: Vec::with_capacity(steps),
            q: Vec::with_capacity(steps),
            solve_ms: Vec::with_capacity(steps),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Voltage trace of one inverter.
    pub fn voltage_series(&self, i: usize) -> Vec<f64> {
        self.v.iter().map(|row| row[i]).collect()
    }
}

/// Simulate the closed loop from `initial` to `t_end`.
///
/// `topology_events` swaps the reduced network at the given times (line
/// switching); the controller runs every `controller.sample_time()` seconds
/// and its output is held between samples. The log has one row per plant
/// step, including t = 0.
pub fn simulate(
    model: &MicrogridModel,
    topology_events: &[(f64, MicrogridModel)],
    loads: &LoadSchedule,
    controller: &mut dyn Controller,
    t_end: f64,
    dt: f64,
    initial: &GridState,
) -> Result<ScenarioResult> {
    let n = model.n();
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::InvalidArgument("simulate requires dt > 0 and t_end > 0".into()));
    }
    let ratio = controller.sample_time() / dt;
    let ctrl_every = ratio.round() as usize;
    if ctrl_every == 0 || (ratio - ctrl_every as f64).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "controller sample time {} must be an integer multiple of dt {}",
            controller.sample_time(),
            dt
        )));
    }
    let steps = (t_end / dt).round() as usize;
    let mut result = ScenarioResult::with_capacity(n, dt, steps + 1);
    let mut state = initial.clone();
    state.t = 0.0;
    let mut active = model;
    let mut next_event = 0usize;
    let mut output = ControlOutput::zero(n);

    for k in 0..=steps {
        let t = k as f64 * dt;
        state.t = t;
        while next_event < topology_events.len() && topology_events[next_event].0 <= t {
            active = &topology_events[next_event].1;
            next_event += 1;
        }
        let q_loads = loads.q_per_inverter(t, &active.load_weights, n);
        if k % ctrl_every == 0 {
            output = controller.control(t, &state, active, &q_loads)?;
            if output.u.len() != n {
                return Err(Error::DimensionMismatch("controller output length".into()));
            }
        }
        let q_meas: Vec<f64> = (0..n)
            .map(|i| q_loads[i] + reactive_power_simplified(&state.v, &active.topology, i))
            .collect();
        result.t.push(t);
        result.v.push(state.v.clone());
        result.u.push(output.u.clone());
        result.q.push(q_meas);
        result
            .solve_ms
            .push(output.solve_time_s.iter().map(|s| s * 1e3).collect());
        if k < steps {
            state = step(&state, &output.u, dt, active, &q_loads)?;
        }
    }
    Ok(result)
}

/// Wall-clock helper used by the controllers for per-agent telemetry.
pub(crate) fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}
