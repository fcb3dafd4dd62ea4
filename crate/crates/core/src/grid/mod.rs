//! Microgrid plant model: per-inverter droop parameters, the transmission
//! network with its reduction onto the inverter nodes, and load scheduling.
//!
//! The full node set (14 buses in the shipped scenarios) is collapsed onto
//! the inverter buses by Kron elimination of the passive nodes at nominal
//! frequency. Loads at passive nodes attach to their electrically nearest
//! inverter (shortest series-inductance path); the mapping can be
//! overridden in the scenario config and stays fixed across line events.

mod dynamics;

pub(crate) use dynamics::timed;
pub use dynamics::{
    admittance_from_topology, power_flow_full, reactive_power_simplified, simulate, step,
    voltage_derivative, ControlOutput, Controller, ScenarioResult, ZeroController,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Lu, Matrix};

/// Droop and filter parameters of one grid-forming inverter.
///
/// `mp` (active-power droop) is carried because model files list it, but the
/// voltage loop never reads it; frequency dynamics are out of scope.
#[derive(Debug, Clone, PartialEq)]
pub struct InverterParams {
    /// Grid node this inverter sits on (1-based).
    pub node: usize,
    /// Voltage reference in peak per-phase volts.
    pub v_ref: f64,
    /// Reactive power reference in var.
    pub q_ref: f64,
    /// Active power reference in watts.
    pub p_ref: f64,
    /// Reactive droop gain in volts/var.
    pub nq: f64,
    /// Active droop gain (stored, unused by the voltage loop).
    pub mp: f64,
    /// Low-pass filter time constant in seconds.
    pub tau: f64,
}

impl InverterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("inverter at node {}: tau must be > 0", self.node)));
        }
        if !(self.nq > 0.0) {
            return Err(Error::Config(format!("inverter at node {}: nq must be > 0", self.node)));
        }
        if !(self.v_ref > 0.0) {
            return Err(Error::Config(format!(
                "inverter at node {}: v_ref must be > 0",
                self.node
            )));
        }
        Ok(())
    }
}

/// One transmission line of the full network.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub inductance_h: f64,
    pub closed: bool,
}

/// Full bus-level network before reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct BusNetwork {
    pub n_nodes: usize,
    pub lines: Vec<Line>,
    pub frequency_hz: f64,
}

impl BusNetwork {
    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency_hz
    }

    fn line_susceptance(&self, line: &Line) -> f64 {
        1.0 / (self.omega() * line.inductance_h)
    }

    /// Nodal susceptance Laplacian over all nodes, closed lines only.
    fn susceptance_laplacian(&self) -> Matrix {
        let mut b = Matrix::zeros(self.n_nodes, self.n_nodes);
        for line in self.lines.iter().filter(|l| l.closed) {
            let y = self.line_susceptance(line);
            let (i, j) = (line.from - 1, line.to - 1);
            b[(i, i)] += y;
            b[(j, j)] += y;
            b[(i, j)] -= y;
            b[(j, i)] -= y;
        }
        b
    }

    /// Kron-reduce the network onto `keep_nodes` (1-based), eliminating all
    /// other nodes through the Schur complement at nominal frequency.
    pub fn reduce(&self, keep_nodes: &[usize]) -> Result<NetworkTopology> {
        let n = keep_nodes.len();
        if n == 0 {
            return Err(Error::Config("reduction needs at least one kept node".into()));
        }
        let b = self.susceptance_laplacian();
        let keep: Vec<usize> = keep_nodes.iter().map(|&k| k - 1).collect();
        let elim: Vec<usize> = (0..self.n_nodes).filter(|i| !keep.contains(i)).collect();
        let pick = |rows: &[usize], cols: &[usize]| {
            Matrix::from_fn(rows.len(), cols.len(), |i, j| b[(rows[i], cols[j])])
        };
        let b_kk = pick(&keep, &keep);
        let reduced = if elim.is_empty() {
            b_kk
        } else {
            let b_ke = pick(&keep, &elim);
            let b_ee = pick(&elim, &elim);
            let b_ek = pick(&elim, &keep);
            let lu = Lu::factor(&b_ee).map_err(|_| {
                Error::Config(
                    "network reduction failed: a passive node is isolated from every inverter"
                        .into(),
                )
            })?;
            &b_kk - &(&b_ke * &lu.solve(&b_ek))
        };
        let mut susceptance = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    susceptance[(i, j)] = (-reduced[(i, j)]).max(0.0);
                }
            }
        }
        // enforce exact symmetry against elimination round-off
        let susceptance = susceptance.symmetrized();
        let line_inductances = self
            .lines
            .iter()
            .filter(|l| l.closed)
            .map(|l| (l.id.clone(), l.inductance_h))
            .collect();
        Ok(NetworkTopology {
            n,
            susceptance,
            line_inductances,
        })
    }

    /// Current-division weights of the Kron elimination: column m gives the
    /// fraction of an injection at node m that lands on each kept node.
    /// Kept nodes get one-hot columns; eliminated nodes get -B_ke B_ee^-1
    /// columns, which are non-negative and sum to one on a connected
    /// lossless network.
    pub fn kron_load_weights(&self, keep_nodes: &[usize]) -> Result<Matrix> {
        let n = keep_nodes.len();
        let b = self.susceptance_laplacian();
        let keep: Vec<usize> = keep_nodes.iter().map(|&k| k - 1).collect();
        let elim: Vec<usize> = (0..self.n_nodes).filter(|i| !keep.contains(i)).collect();
        let mut weights = Matrix::zeros(n, self.n_nodes);
        for (row, &node) in keep.iter().enumerate() {
            weights[(row, node)] = 1.0;
        }
        if elim.is_empty() {
            return Ok(weights);
        }
        let pick = |rows: &[usize], cols: &[usize]| {
            Matrix::from_fn(rows.len(), cols.len(), |i, j| b[(rows[i], cols[j])])
        };
        let b_ke = pick(&keep, &elim);
        let b_ee = pick(&elim, &elim);
        let lu = Lu::factor(&b_ee).map_err(|_| {
            Error::Config(
                "load distribution failed: a passive node is isolated from every inverter".into(),
            )
        })?;
        let spread = &b_ke * &lu.solve(&Matrix::identity(elim.len()));
        for (col, &node) in elim.iter().enumerate() {
            for row in 0..n {
                weights[(row, node)] = (-spread[(row, col)]).max(0.0);
            }
        }
        Ok(weights)
    }

    /// Map every node to its nearest inverter node by series-inductance
    /// distance (Dijkstra over closed lines).
    pub fn nearest_inverter_map(&self, inverter_nodes: &[usize]) -> Result<BTreeMap<usize, usize>> {
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_nodes];
        for line in self.lines.iter().filter(|l| l.closed) {
            adj[line.from - 1].push((line.to - 1, line.inductance_h));
            adj[line.to - 1].push((line.from - 1, line.inductance_h));
        }
        let mut map = BTreeMap::new();
        for src in 0..self.n_nodes {
            let mut dist = vec![f64::INFINITY; self.n_nodes];
            dist[src] = 0.0;
            let mut visited = vec![false; self.n_nodes];
            let best = loop {
                let mut u = None;
                let mut du = f64::INFINITY;
                for i in 0..self.n_nodes {
                    if !visited[i] && dist[i] < du {
                        du = dist[i];
                        u = Some(i);
                    }
                }
                let Some(u) = u else { break None };
                if let Some(pos) = inverter_nodes.iter().position(|&inv| inv - 1 == u) {
                    break Some(pos);
                }
                visited[u] = true;
                for &(v, w) in &adj[u] {
                    if dist[u] + w < dist[v] {
                        dist[v] = dist[u] + w;
                    }
                }
            };
            match best {
                Some(inv_idx) => {
                    map.insert(src + 1, inv_idx);
                }
                None => {
                    return Err(Error::Config(format!(
                        "node {} cannot reach any inverter through closed lines",
                        src + 1
                    )))
                }
            }
        }
        Ok(map)
    }
}

/// Reduced inverter-level topology.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    pub n: usize,
    /// Symmetric |B^(ij)| matrix in siemens, zero diagonal.
    pub susceptance: Matrix,
    pub line_inductances: BTreeMap<String, f64>,
}

impl NetworkTopology {
    pub fn validate(&self) -> Result<()> {
        if self.susceptance.rows() != self.n || self.susceptance.cols() != self.n {
            return Err(Error::DimensionMismatch("susceptance matrix".into()));
        }
        if self.susceptance.symmetry_error() > 1e-12 * self.susceptance.max_abs().max(1.0) {
            return Err(Error::Config("susceptance matrix must be symmetric".into()));
        }
        for i in 0..self.n {
            if self.susceptance[(i, i)] != 0.0 {
                return Err(Error::Config("susceptance diagonal must be zero".into()));
            }
            for j in 0..self.n {
                if self.susceptance[(i, j)] < 0.0 {
                    return Err(Error::Config("susceptance entries must be non-negative".into()));
                }
            }
        }
        Ok(())
    }

    /// Sum of row i, the self term Sigma_j |B^(ij)|.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.susceptance.row(i).iter().sum()
    }
}

/// One load event: at `time`, the load at `node` becomes (p, q) absolutely.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadEvent {
    pub time: f64,
    pub node: usize,
    pub p_load: f64,
    pub q_load: f64,
}

/// Time-sorted schedule of absolute load levels per node.
#[derive(Debug, Clone, Default)]
pub struct LoadSchedule {
    events: Vec<LoadEvent>,
}

impl LoadSchedule {
    pub fn new(mut events: Vec<LoadEvent>) -> Result<LoadSchedule> {
        for e in &events {
            if e.q_load < 0.0 {
                return Err(Error::Config(format!(
                    "load at node {} has negative reactive component",
                    e.node
                )));
            }
        }
        events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap().then(a.node.cmp(&b.node)));
        Ok(LoadSchedule { events })
    }

    pub fn empty() -> LoadSchedule {
        LoadSchedule { events: Vec::new() }
    }

    pub fn events(&self) -> &[LoadEvent] {
        &self.events
    }

    /// Per-node (p, q) levels active at time t.
    pub fn active_at(&self, t: f64) -> BTreeMap<usize, (f64, f64)> {
        let mut levels = BTreeMap::new();
        for e in self.events.iter().take_while(|e| e.time <= t) {
            levels.insert(e.node, (e.p_load, e.q_load));
        }
        levels
    }

    /// Aggregate active reactive loads onto inverters through the load
    /// weight matrix (inverters x nodes).
    pub fn q_per_inverter(&self, t: f64, load_weights: &Matrix, n: usize) -> Vec<f64> {
        let mut q = vec![0.0; n];
        for (node, (_p, ql)) in self.active_at(t) {
            for i in 0..n {
                q[i] += load_weights[(i, node - 1)] * ql;
            }
        }
        q
    }
}

/// Plant state at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub t: f64,
    /// Peak per-phase voltage magnitude per inverter.
    pub v: Vec<f64>,
    /// Filtered reactive power per inverter (derived from the droop relation).
    pub q_mean: Vec<f64>,
    /// Phase angles, used only by the full-model validation path.
    pub delta: Vec<f64>,
}

impl GridState {
    pub fn flat_start(n: usize) -> GridState {
        GridState {
            t: 0.0,
            v: vec![0.0; n],
            q_mean: vec![0.0; n],
            delta: vec![0.0; n],
        }
    }

    pub fn at_voltage(n: usize, v: f64) -> GridState {
        GridState {
            t: 0.0,
            v: vec![v; n],
            q_mean: vec![0.0; n],
            delta: vec![0.0; n],
        }
    }

    pub fn all_finite(&self) -> bool {
        self.v.iter().chain(&self.q_mean).chain(&self.delta).all(|x| x.is_finite())
    }
}

/// How passive-node loads are attributed to inverters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMapStrategy {
    /// Electrical current division from the Kron elimination; the weights
    /// follow topology changes, so line switching shifts load sharing.
    #[default]
    KronWeights,
    /// Whole load to the nearest inverter by series inductance; the map is
    /// frozen at construction.
    NearestInverter,
}

/// The complete plant: inverters plus the reduced network and load mapping.
#[derive(Debug, Clone)]
pub struct MicrogridModel {
    pub inverters: Vec<InverterParams>,
    pub network: BusNetwork,
    pub topology: NetworkTopology,
    /// (inverters x nodes) attribution of nodal loads, per the strategy.
    pub load_weights: Matrix,
    pub load_strategy: LoadMapStrategy,
    /// Config-pinned node -> inverter assignments overriding the strategy.
    pub load_overrides: BTreeMap<usize, usize>,
}

impl MicrogridModel {
    /// Build the reduced model. `load_map_override` pins specific nodes
    /// entirely onto inverters, on top of the chosen strategy.
    pub fn new(
        inverters: Vec<InverterParams>,
        network: BusNetwork,
        strategy: LoadMapStrategy,
        load_map_override: &BTreeMap<usize, usize>,
    ) -> Result<MicrogridModel> {
        if inverters.is_empty() {
            return Err(Error::Config("model needs at least one inverter".into()));
        }
        for inv in &inverters {
            inv.validate()?;
            if inv.node == 0 || inv.node > network.n_nodes {
                return Err(Error::Config(format!("inverter node {} out of range", inv.node)));
            }
        }
        for &inv in load_map_override.values() {
            if inv >= inverters.len() {
                return Err(Error::Config("load map override references unknown inverter".into()));
            }
        }
        let nodes: Vec<usize> = inverters.iter().map(|p| p.node).collect();
        let topology = network.reduce(&nodes)?;
        topology.validate()?;
        let load_weights = build_load_weights(&network, &nodes, strategy, load_map_override)?;
        Ok(MicrogridModel {
            inverters,
            network,
            topology,
            load_weights,
            load_strategy: strategy,
            load_overrides: load_map_override.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.inverters.len()
    }

    /// New model with a line opened or closed. The reduced susceptance is
    /// recomputed; Kron load weights follow the new topology, while the
    /// nearest-inverter map stays as built.
    pub fn with_line_state(&self, line_id: &str, closed: bool) -> Result<MicrogridModel> {
        let mut network = self.network.clone();
        let line = network
            .lines
            .iter_mut()
            .find(|l| l.id == line_id)
            .ok_or_else(|| Error::Config(format!("unknown line id {line_id}")))?;
        line.closed = closed;
        let nodes: Vec<usize> = self.inverters.iter().map(|p| p.node).collect();
        let topology = network.reduce(&nodes)?;
        topology.validate()?;
        let load_weights = match self.load_strategy {
            LoadMapStrategy::KronWeights => {
                build_load_weights(&network, &nodes, self.load_strategy, &self.load_overrides)?
            }
            LoadMapStrategy::NearestInverter => self.load_weights.clone(),
        };
        Ok(MicrogridModel {
            inverters: self.inverters.clone(),
            network,
            topology,
            load_weights,
            load_strategy: self.load_strategy,
            load_overrides: self.load_overrides.clone(),
        })
    }

    pub fn v_ref_vec(&self) -> Vec<f64> {
        self.inverters.iter().map(|p| p.v_ref).collect()
    }
}

fn build_load_weights(
    network: &BusNetwork,
    inverter_nodes: &[usize],
    strategy: LoadMapStrategy,
    overrides: &BTreeMap<usize, usize>,
) -> Result<Matrix> {
    let n = inverter_nodes.len();
    let mut weights = match strategy {
        LoadMapStrategy::KronWeights => network.kron_load_weights(inverter_nodes)?,
        LoadMapStrategy::NearestInverter => {
            let map = network.nearest_inverter_map(inverter_nodes)?;
            let mut w = Matrix::zeros(n, network.n_nodes);
            for (node, inv) in map {
                w[(inv, node - 1)] = 1.0;
            }
            w
        }
    };
    for (&node, &inv) in overrides {
        if node == 0 || node > network.n_nodes {
            return Err(Error::Config(format!("load override node {node} out of range")));
        }
        for i in 0..n {
            weights[(i, node - 1)] = if i == inv { 1.0 } else { 0.0 };
        }
    }
    Ok(weights)
}
