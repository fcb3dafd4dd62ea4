//! Per-inverter lifted linear predictor: dictionary, snapshot collection
//! from excitation runs, and the least-squares fit of (A, B, C).

mod edmd;
mod snapshots;

pub use edmd::{fit_edmd, predict, prediction_error, FitReport, LiftedPredictor};
pub use snapshots::{
    build_snapshots, generate_excitation, simulate_excitation, ExcitationProtocol, SnapshotSet,
    SplitSnapshots,
};

use crate::error::{Error, Result};
use crate::graph::CommGraph;
use crate::grid::NetworkTopology;

/// Lifted dimension of the pair dictionary.
pub const LIFT_DIM: usize = 4;

/// The observable dictionary over a voltage pair:
/// Psi = [v_i, v_j, v_i - v_j, (v_i - v_j)^2].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisDefinition;

impl BasisDefinition {
    pub const TAG: &'static str = "voltage-pair-quadratic-v4";

    pub fn dimension(&self) -> usize {
        LIFT_DIM
    }

    pub fn description(&self) -> &'static str {
        "[v_i, v_j, v_i - v_j, (v_i - v_j)^2]"
    }
}

/// Lift a physical voltage pair into the observable space.
pub fn lift(v_i: f64, v_j: f64) -> [f64; LIFT_DIM] {
    let d = v_i - v_j;
    [v_i, v_j, d, d * d]
}

/// How an agent condenses its neighbors' voltages into the scalar v_j of
/// the dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeighborAggregate {
    /// Arithmetic mean of communication-graph neighbors.
    #[default]
    Mean,
    /// Susceptance-weighted mean over the same neighbor set.
    SusceptanceWeighted,
}

/// Aggregate neighbor voltages for agent `i` under the active graph.
pub fn neighbor_aggregate(
    v: &[f64],
    i: usize,
    graph: &CommGraph,
    strategy: NeighborAggregate,
    topo: &NetworkTopology,
) -> Result<f64> {
    let neighbors = graph.neighbors(i);
    if neighbors.is_empty() {
        return Err(Error::IsolatedNode(i + 1));
    }
    match strategy {
        NeighborAggregate::Mean => {
            Ok(neighbors.iter().map(|&j| v[j]).sum::<f64>() / neighbors.len() as f64)
        }
        NeighborAggregate::SusceptanceWeighted => {
            let mut wsum = 0.0;
            let mut acc = 0.0;
            for &j in &neighbors {
                let w = topo.susceptance[(i, j)];
                wsum += w;
                acc += w * v[j];
            }
            if wsum > 0.0 {
                Ok(acc / wsum)
            } else {
                // no electrical coupling to any comm neighbor: plain mean
                Ok(neighbors.iter().map(|&j| v[j]).sum::<f64>() / neighbors.len() as f64)
            }
        }
    }
}
