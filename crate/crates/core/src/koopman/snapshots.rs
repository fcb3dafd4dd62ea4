//! Snapshot collection: excitation runs on the plant and assembly of the
//! aligned (Psi(X), Psi(Y), U) triples that the fit consumes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::grid::{
    simulate, ControlOutput, Controller, GridState, LoadSchedule, MicrogridModel, ScenarioResult,
};
use crate::koopman::{lift, neighbor_aggregate, NeighborAggregate, LIFT_DIM};
use crate::numerics::{format_float, Matrix};

/// Aligned snapshot triples for one agent, possibly concatenated from
/// several trajectories. `segments` records contiguous runs so rollout
/// windows never straddle a trajectory boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    /// M x 4 lifted states.
    pub x: Matrix,
    /// M x 4 lifted successors.
    pub y: Matrix,
    /// M x 1 inputs.
    pub u: Matrix,
    /// M x 2 physical (v_i, v_j) pairs backing each lifted row.
    pub raw_x: Matrix,
    pub sample_dt: f64,
    /// (start_row, len) of each contiguous trajectory segment.
    pub segments: Vec<(usize, usize)>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Verify the dictionary consistency of every row: psi3 = psi1 - psi2
    /// and psi4 = psi3^2, and that x is the lift of raw_x.
    pub fn check_dictionary_consistency(&self) -> Result<()> {
        for r in 0..self.len() {
            let psi = self.x.row(r);
            if psi[2] != psi[0] - psi[1] || psi[3] != psi[2] * psi[2] {
                return Err(Error::InvalidArgument(format!(
                    "row {r} violates dictionary consistency"
                )));
            }
            let lifted = lift(self.raw_x[(r, 0)], self.raw_x[(r, 1)]);
            if lifted != [psi[0], psi[1], psi[2], psi[3]] {
                return Err(Error::InvalidArgument(format!(
                    "row {r} is not the lift of its physical state"
                )));
            }
        }
        Ok(())
    }

    /// Concatenate sets, keeping segment boundaries.
    pub fn concat(sets: &[SnapshotSet]) -> Result<SnapshotSet> {
        if sets.is_empty() {
            return Err(Error::InvalidArgument("concat of zero snapshot sets".into()));
        }
        let dt = sets[0].sample_dt;
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let mut x = Matrix::zeros(total, LIFT_DIM);
        let mut y = Matrix::zeros(total, LIFT_DIM);
        let mut u = Matrix::zeros(total, 1);
        let mut raw = Matrix::zeros(total, 2);
        let mut segments = Vec::new();
        let mut at = 0usize;
        for s in sets {
            if (s.sample_dt - dt).abs() > 1e-15 {
                return Err(Error::InvalidArgument("mixed sample_dt in concat".into()));
            }
            for (seg_start, seg_len) in &s.segments {
                segments.push((at + seg_start, *seg_len));
            }
            x.set_block(at, 0, &s.x);
            y.set_block(at, 0, &s.y);
            u.set_block(at, 0, &s.u);
            raw.set_block(at, 0, &s.raw_x);
            at += s.len();
        }
        Ok(SnapshotSet {
            x,
            y,
            u,
            raw_x: raw,
            sample_dt: dt,
            segments,
        })
    }

    /// Chronological split of every segment at `fraction` (0 < f < 1).
    pub fn split_chronological(&self, fraction: f64) -> Result<(SnapshotSet, SnapshotSet)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument("split fraction must be in (0,1)".into()));
        }
        let mut head_rows = Vec::new();
        let mut tail_rows = Vec::new();
        let mut head_segments = Vec::new();
        let mut tail_segments = Vec::new();
        for &(start, len) in &self.segments {
            let cut = ((len as f64) * fraction).floor() as usize;
            if cut > 0 {
                head_segments.push((head_rows.len(), cut));
                head_rows.extend(start..start + cut);
            }
            if cut < len {
                tail_segments.push((tail_rows.len(), len - cut));
                tail_rows.extend(start + cut..start + len);
            }
        }
        let gather = |rows: &[usize]| SnapshotSet {
            x: Matrix::from_fn(rows.len(), LIFT_DIM, |i, j| self.x[(rows[i], j)]),
            y: Matrix::from_fn(rows.len(), LIFT_DIM, |i, j| self.y[(rows[i], j)]),
            u: Matrix::from_fn(rows.len(), 1, |i, _| self.u[(rows[i], 0)]),
            raw_x: Matrix::from_fn(rows.len(), 2, |i, j| self.raw_x[(rows[i], j)]),
            sample_dt: self.sample_dt,
            segments: Vec::new(),
        };
        let mut head = gather(&head_rows);
        head.segments = head_segments;
        let mut tail = gather(&tail_rows);
        tail.segments = tail_segments;
        Ok((head, tail))
    }

    /// CSV export: columns v_i, v_j, u, v_i_next, v_j_next. Segment
    /// boundaries are not part of the interchange format; re-imported sets
    /// are treated as one contiguous segment.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("v_i,v_j,u,v_i_next,v_j_next\n");
        for r in 0..self.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                format_float(self.raw_x[(r, 0)]),
                format_float(self.raw_x[(r, 1)]),
                format_float(self.u[(r, 0)]),
                format_float(self.y[(r, 0)]),
                format_float(self.y[(r, 1)]),
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn from_csv_str(s: &str, sample_dt: f64) -> Result<SnapshotSet> {
        let mut rows: Vec<[f64; 5]> = Vec::new();
        for (idx, line) in s.lines().enumerate() {
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("snapshot csv line {}: {e}", idx + 1)))?;
            if vals.len() != 5 {
                return Err(Error::Parse(format!(
                    "snapshot csv line {}: expected 5 columns",
                    idx + 1
                )));
            }
            rows.push([vals[0], vals[1], vals[2], vals[3], vals[4]]);
        }
        let m = rows.len();
        let mut set = SnapshotSet {
            x: Matrix::zeros(m, LIFT_DIM),
            y: Matrix::zeros(m, LIFT_DIM),
            u: Matrix::zeros(m, 1),
            raw_x: Matrix::zeros(m, 2),
            sample_dt,
            segments: vec![(0, m)],
        };
        for (r, vals) in rows.iter().enumerate() {
            let xl = lift(vals[0], vals[1]);
            let yl = lift(vals[3], vals[4]);
            for j in 0..LIFT_DIM {
                set.x[(r, j)] = xl[j];
                set.y[(r, j)] = yl[j];
            }
            set.u[(r, 0)] = vals[2];
            set.raw_x[(r, 0)] = vals[0];
            set.raw_x[(r, 1)] = vals[1];
        }
        Ok(set)
    }
}

/// The excitation protocol: a settle-in pre-roll from a random start,
/// then a recorded window driven by piecewise-constant random inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationProtocol {
    /// Recorded window length in seconds.
    pub window: f64,
    /// Input dwell time in seconds.
    pub dwell: f64,
    /// Input amplitude bound in volts (uniform on [-amp, amp]).
    pub amplitude: f64,
    /// Number of independent trajectories.
    pub trajectories: usize,
    /// Plant sampling period.
    pub sample_dt: f64,
    /// Settle-in time before the recording window opens. The random initial
    /// condition decays through it, so the recorded data stays in the
    /// operating region the dictionary spans well.
    pub warmup: f64,
    /// Chronological fit fraction (the rest is validation).
    pub split: f64,
    pub seed: u64,
}

impl Default for ExcitationProtocol {
    fn default() -> Self {
        ExcitationProtocol {
            window: 10.0,
            dwell: 1.7,
            amplitude: 1.0,
            trajectories: 10,
            sample_dt: 1e-3,
            warmup: 2.0,
            split: 0.8,
            seed: 1,
        }
    }
}

struct PiecewiseInput {
    segments: Vec<Vec<f64>>,
    dwell: f64,
    dt: f64,
    n: usize,
}

impl Controller for PiecewiseInput {
    fn sample_time(&self) -> f64 {
        self.dt
    }
    fn control(
        &mut self,
        t: f64,
        _state: &GridState,
        _model: &MicrogridModel,
        _q_loads: &[f64],
    ) -> Result<ControlOutput> {
        let idx = ((t / self.dwell).floor() as usize).min(self.segments.len() - 1);
        Ok(ControlOutput {
            u: self.segments[idx].clone(),
            solve_time_s: vec![0.0; self.n],
        })
    }
}

/// Run one excitation trajectory: random initial voltages in [0, v_ref],
/// independent piecewise-constant inputs per inverter. Deterministic in
/// (protocol.seed, trajectory index).
pub fn simulate_excitation(
    model: &MicrogridModel,
    protocol: &ExcitationProtocol,
    trajectory: usize,
) -> Result<ScenarioResult> {
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(
        protocol
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(trajectory as u64),
    );
    let v0: Vec<f64> = model
        .inverters
        .iter()
        .map(|p| rng.random_range(0.0..=p.v_ref))
        .collect();
    let total = protocol.warmup + protocol.window;
    let n_segments = (total / protocol.dwell).ceil() as usize + 1;
    let segments: Vec<Vec<f64>> = (0..n_segments)
        .map(|_| {
            (0..n)
                .map(|_| rng.random_range(-protocol.amplitude..=protocol.amplitude))
                .collect()
        })
        .collect();
    let mut input = PiecewiseInput {
        segments,
        dwell: protocol.dwell,
        dt: protocol.sample_dt,
        n,
    };
    let initial = GridState {
        t: 0.0,
        v: v0,
        q_mean: vec![0.0; n],
        delta: vec![0.0; n],
    };
    simulate(
        model,
        &[],
        &LoadSchedule::empty(),
        &mut input,
        total,
        protocol.sample_dt,
        &initial,
    )
}

/// Extract one agent's snapshot rows from a simulated trajectory.
///
/// The recorded window opens after the warmup; `window/dt` states produce
/// `window/dt - 1` consecutive (x, y, u) rows.
pub fn build_snapshots(
    result: &ScenarioResult,
    protocol: &ExcitationProtocol,
    agent: usize,
    graph: &CommGraph,
    strategy: NeighborAggregate,
    model: &MicrogridModel,
) -> Result<SnapshotSet> {
    let skip = (protocol.warmup / protocol.sample_dt).round() as usize;
    let states = (protocol.window / protocol.sample_dt).round() as usize;
    if result.len() < skip + states {
        return Err(Error::InvalidArgument(format!(
            "trajectory too short: {} rows, need {}",
            result.len(),
            skip + states
        )));
    }
    let m = states - 1;
    let mut set = SnapshotSet {
        x: Matrix::zeros(m, LIFT_DIM),
        y: Matrix::zeros(m, LIFT_DIM),
        u: Matrix::zeros(m, 1),
        raw_x: Matrix::zeros(m, 2),
        sample_dt: protocol.sample_dt,
        segments: vec![(0, m)],
    };
    let pair_at = |k: usize| -> Result<(f64, f64)> {
        let v = &result.v[skip + k];
        let vj = neighbor_aggregate(v, agent, graph, strategy, &model.topology)?;
        Ok((v[agent], vj))
    };
    let (mut vi_k, mut vj_k) = pair_at(0)?;
    for r in 0..m {
        let (vi_n, vj_n) = pair_at(r + 1)?;
        let xl = lift(vi_k, vj_k);
        let yl = lift(vi_n, vj_n);
        for j in 0..LIFT_DIM {
            set.x[(r, j)] = xl[j];
            set.y[(r, j)] = yl[j];
        }
        set.raw_x[(r, 0)] = vi_k;
        set.raw_x[(r, 1)] = vj_k;
        set.u[(r, 0)] = result.u[skip + r][agent];
        vi_k = vi_n;
        vj_k = vj_n;
    }
    Ok(set)
}

/// Fit/validation pair for one agent.
#[derive(Debug, Clone)]
pub struct SplitSnapshots {
    pub fit: SnapshotSet,
    pub validation: SnapshotSet,
}

/// Full excitation pipeline for one agent: run every trajectory, extract
/// snapshots, split chronologically.
pub fn generate_excitation(
    model: &MicrogridModel,
    protocol: &ExcitationProtocol,
    agent: usize,
    graph: &CommGraph,
    strategy: NeighborAggregate,
) -> Result<SplitSnapshots> {
    let mut sets = Vec::with_capacity(protocol.trajectories);
    for traj in 0..protocol.trajectories {
        let result = simulate_excitation(model, protocol, traj)?;
        sets.push(build_snapshots(&result, protocol, agent, graph, strategy, model)?);
    }
    let all = SnapshotSet::concat(&sets)?;
    let (fit, validation) = all.split_chronological(protocol.split)?;
    Ok(SplitSnapshots { fit, validation })
}
