//! Scenario configuration: one TOML file per scenario, carrying the model
//! tables, the communication graph and its switches, load and line events,
//! controller tuning, and the identification protocol.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::{CommGraph, SwitchSchedule};
use crate::grid::{BusNetwork, InverterParams, Line, LoadEvent, LoadSchedule, MicrogridModel};
use crate::koopman::{ExcitationProtocol, NeighborAggregate};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    pub graph: GraphSection,
    #[serde(default)]
    pub events: EventsSection,
    pub controller: ControllerSection,
    #[serde(default)]
    pub identification: IdentificationSection,
    #[serde(default)]
    pub comparison: ComparisonSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    pub controller: ControllerKind,
    pub duration_s: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub initial_voltage: f64,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "koopman-dmpc")]
    KoopmanDmpc,
    #[serde(rename = "nonlinear-mpc")]
    NonlinearMpc,
    #[serde(rename = "droop-only")]
    DroopOnly,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub nodes: usize,
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
    pub inverter: Vec<InverterEntry>,
    pub line: Vec<LineEntry>,
    #[serde(default)]
    pub load: Vec<LoadEntry>,
    #[serde(default)]
    pub reduction: ReductionSection,
}

fn default_frequency() -> f64 {
    60.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterEntry {
    pub id: usize,
    pub node: usize,
    pub v_ref: f64,
    pub q_ref_var: f64,
    pub p_ref_w: f64,
    pub nq: f64,
    pub mp: f64,
    pub tau_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineEntry {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub inductance_mh: f64,
    #[serde(default)]
    pub open: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadEntry {
    pub time_s: f64,
    pub node: usize,
    #[serde(default)]
    pub p_kw: f64,
    #[serde(default)]
    pub q_kvar: f64,
}

/// Load attribution: the distribution strategy plus per-node pinning that
/// overrides it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionSection {
    #[serde(default)]
    pub load_map: LoadMapKind,
    #[serde(default)]
    pub assign: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub enum LoadMapKind {
    /// Electrical current-division weights from the Kron elimination.
    #[default]
    #[serde(rename = "kron")]
    Kron,
    /// Whole load to the nearest inverter by series inductance.
    #[serde(rename = "nearest")]
    Nearest,
}

impl From<LoadMapKind> for crate::grid::LoadMapStrategy {
    fn from(k: LoadMapKind) -> Self {
        match k {
            LoadMapKind::Kron => crate::grid::LoadMapStrategy::KronWeights,
            LoadMapKind::Nearest => crate::grid::LoadMapStrategy::NearestInverter,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub edges: Vec<(usize, usize)>,
    #[serde(default)]
    pub switch: Vec<GraphSwitchEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSwitchEntry {
    pub time_s: f64,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventsSection {
    #[serde(default)]
    pub line: Vec<LineEventEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineEventEntry {
    pub time_s: f64,
    pub line: String,
    pub closed: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub q: f64,
    pub r: f64,
    #[serde(default)]
    pub s: f64,
    pub horizon: usize,
    pub sample_time_s: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Actuator bound on the secondary input, |u| <= u_max.
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    #[serde(default = "default_predictor_dir")]
    pub predictor_dir: String,
}

fn default_u_max() -> f64 {
    10.0
}

fn default_predictor_dir() -> String {
    "predictors".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentificationSection {
    #[serde(default = "default_window")]
    pub window_s: f64,
    #[serde(default = "default_dwell")]
    pub dwell_s: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude_v: f64,
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    #[serde(default = "default_warmup")]
    pub warmup_s: f64,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub neighbor_aggregate: AggregateKind,
    /// Validation rollout error ceiling (relative to v_ref); the pipeline
    /// fails loudly above it.
    #[serde(default = "default_error_ceiling")]
    pub error_ceiling: f64,
    /// Rollout horizon (steps) used for the validation error check.
    #[serde(default = "default_error_horizon")]
    pub error_horizon: usize,
}

fn default_window() -> f64 {
    10.0
}
fn default_dwell() -> f64 {
    1.7
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_trajectories() -> usize {
    10
}
fn default_warmup() -> f64 {
    2.0
}
fn default_split() -> f64 {
    0.8
}
fn default_error_ceiling() -> f64 {
    0.01
}
fn default_error_horizon() -> usize {
    500
}

impl Default for IdentificationSection {
    fn default() -> Self {
        IdentificationSection {
            window_s: default_window(),
            dwell_s: default_dwell(),
            amplitude_v: default_amplitude(),
            trajectories: default_trajectories(),
            warmup_s: default_warmup(),
            split: default_split(),
            neighbor_aggregate: AggregateKind::default(),
            error_ceiling: default_error_ceiling(),
            error_horizon: default_error_horizon(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub enum AggregateKind {
    #[default]
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "susceptance-weighted")]
    SusceptanceWeighted,
}

impl From<AggregateKind> for NeighborAggregate {
    fn from(k: AggregateKind) -> Self {
        match k {
            AggregateKind::Mean => NeighborAggregate::Mean,
            AggregateKind::SusceptanceWeighted => NeighborAggregate::SusceptanceWeighted,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSection {
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default = "default_one")]
    pub q: f64,
    #[serde(default = "default_one")]
    pub r: f64,
    #[serde(default = "default_cmp_horizon")]
    pub horizon: usize,
    #[serde(default = "default_cmp_sample")]
    pub sample_time_s: f64,
    #[serde(default = "default_cmp_vmin")]
    pub v_min: f64,
    #[serde(default = "default_cmp_vmax")]
    pub v_max: f64,
}

fn default_cycles() -> usize {
    250
}
fn default_one() -> f64 {
    1.0
}
fn default_cmp_horizon() -> usize {
    10
}
fn default_cmp_sample() -> f64 {
    0.01
}
fn default_cmp_vmin() -> f64 {
    170.0
}
fn default_cmp_vmax() -> f64 {
    171.0
}

impl Default for ComparisonSection {
    fn default() -> Self {
        ComparisonSection {
            cycles: default_cycles(),
            q: 1.0,
            r: 1.0,
            horizon: default_cmp_horizon(),
            sample_time_s: default_cmp_sample(),
            v_min: default_cmp_vmin(),
            v_max: default_cmp_vmax(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_sweep_duration")]
    pub duration_s: f64,
}

fn default_horizons() -> Vec<usize> {
    vec![2, 5, 10, 15, 20]
}
fn default_sweep_duration() -> f64 {
    4.0
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            horizons: default_horizons(),
            duration_s: default_sweep_duration(),
        }
    }
}

/// Everything a run needs, constructed and cross-validated from a config.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub config: ScenarioConfig,
    pub model: MicrogridModel,
    pub loads: LoadSchedule,
    pub graphs: SwitchSchedule,
    /// Reduced models taking effect at line-switch times.
    pub line_events: Vec<(f64, MicrogridModel)>,
    pub protocol: ExcitationProtocol,
}

impl ScenarioConfig {
    pub fn from_str_validated(s: &str) -> Result<ScenarioConfig> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_validated(&text)
    }

    /// Validate and assemble the domain objects.
    pub fn build(self) -> Result<BuiltScenario> {
        let m = &self.model;
        if m.inverter.is_empty() {
            return Err(Error::Config("at least one inverter required".into()));
        }
        let mut ids: Vec<usize> = m.inverter.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        if ids != (1..=m.inverter.len()).collect::<Vec<_>>() {
            return Err(Error::Config("inverter ids must be 1..=N".into()));
        }
        let mut sorted = m.inverter.clone();
        sorted.sort_by_key(|i| i.id);
        let inverters: Vec<InverterParams> = sorted
            .iter()
            .map(|e| InverterParams {
                node: e.node,
                v_ref: e.v_ref,
                q_ref: e.q_ref_var,
                p_ref: e.p_ref_w,
                nq: e.nq,
                mp: e.mp,
                tau: e.tau_s,
            })
            .collect();
        for line in &m.line {
            if line.from == 0 || line.from > m.nodes || line.to == 0 || line.to > m.nodes {
                return Err(Error::Config(format!("line {} endpoints out of range", line.id)));
            }
            if !(line.inductance_mh > 0.0) {
                return Err(Error::Config(format!("line {} needs positive inductance", line.id)));
            }
        }
        let network = BusNetwork {
            n_nodes: m.nodes,
            lines: m
                .line
                .iter()
                .map(|l| Line {
                    id: l.id.clone(),
                    from: l.from,
                    to: l.to,
                    inductance_h: l.inductance_mh * 1e-3,
                    closed: !l.open,
                })
                .collect(),
            frequency_hz: m.frequency_hz,
        };
        let mut overrides = BTreeMap::new();
        for &(node, inv_id) in &m.reduction.assign {
            if inv_id == 0 || inv_id > inverters.len() {
                return Err(Error::Config(format!(
                    "reduction assigns node {node} to unknown inverter {inv_id}"
                )));
            }
            overrides.insert(node, inv_id - 1);
        }
        let model = MicrogridModel::new(inverters, network, m.reduction.load_map.into(), &overrides)?;

        let loads = LoadSchedule::new(
            m.load
                .iter()
                .map(|l| LoadEvent {
                    time: l.time_s,
                    node: l.node,
                    p_load: l.p_kw * 1e3,
                    q_load: l.q_kvar * 1e3,
                })
                .collect(),
        )?;
        for l in &m.load {
            if l.node == 0 || l.node > m.nodes {
                return Err(Error::Config(format!("load references node {} out of range", l.node)));
            }
        }

        let n = model.n();
        let base_graph = CommGraph::from_edges(n, &self.graph.edges)?;
        let mut graph_events = vec![(0.0, base_graph)];
        for sw in &self.graph.switch {
            graph_events.push((sw.time_s, CommGraph::from_edges(n, &sw.edges)?));
        }
        let graphs = SwitchSchedule::new(graph_events)?;

        let mut line_events = Vec::new();
        let mut current = model.clone();
        let mut sorted_events = self.events.line.clone();
        sorted_events.sort_by(|a, b| a.time_s.partial_cmp(&b.time_s).unwrap());
        for ev in &sorted_events {
            if ev.time_s <= 0.0 {
                return Err(Error::Config("line events must occur at t > 0".into()));
            }
            current = current.with_line_state(&ev.line, ev.closed)?;
            line_events.push((ev.time_s, current.clone()));
        }

        // controller cadence must land on plant steps
        let sc = &self.scenario;
        if !(sc.dt_s > 0.0) || !(sc.duration_s > 0.0) {
            return Err(Error::Config("dt_s and duration_s must be positive".into()));
        }
        let ratio = self.controller.sample_time_s / sc.dt_s;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio < 1.0 {
            return Err(Error::Config(
                "controller sample_time_s must be an integer multiple of dt_s".into(),
            ));
        }
        let idf = &self.identification;
        if !(idf.split > 0.0 && idf.split < 1.0) {
            return Err(Error::Config("identification split must be in (0,1)".into()));
        }
        let protocol = ExcitationProtocol {
            window: idf.window_s,
            dwell: idf.dwell_s,
            amplitude: idf.amplitude_v,
            trajectories: idf.trajectories,
            sample_dt: sc.dt_s,
            warmup: idf.warmup_s,
            split: idf.split,
            seed: sc.seed,
        };

        Ok(BuiltScenario {
            config: self,
            model,
            loads,
            graphs,
            line_events,
            protocol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn minimal_toml() -> String {
        r#"
[scenario]
name = "mini"
controller = "droop-only"
duration_s = 1.0
dt_s = 0.001
seed = 7

[model]
nodes = 2
frequency_hz = 60.0

[[model.inverter]]
id = 1
node = 1
v_ref = 169.7056
q_ref_var = 5000.0
p_ref_w = 10000.0
nq = 0.0001
mp = 0.0001
tau_s = 0.1

[[model.inverter]]
id = 2
node = 2
v_ref = 169.7056
q_ref_var = 5000.0
p_ref_w = 10000.0
nq = 0.0001
mp = 0.0001
tau_s = 0.1

[[model.line]]
id = "B1"
from = 1
to = 2
inductance_mh = 2.47

[graph]
edges = [[1, 2]]

[controller]
q = 1.0
r = 5.0
s = 0.2
horizon = 3
sample_time_s = 0.1
v_min = 165.0
v_max = 175.0
"#
        .to_string()
    }

    #[test]
    fn minimal_config_builds() {
        let cfg = ScenarioConfig::from_str_validated(&minimal_toml()).unwrap();
        let built = cfg.build().unwrap();
        assert_eq!(built.model.n(), 2);
        assert_eq!(built.protocol.seed, 7);
        assert!(built.line_events.is_empty());
    }

    #[test]
    fn rejects_unknown_fields() {
        let toml = minimal_toml().replace("[controller]", "[controller]\nbogus = 1");
        assert!(ScenarioConfig::from_str_validated(&toml).is_err());
    }

    #[test]
    fn rejects_bad_cadence() {
        let toml = minimal_toml().replace("sample_time_s = 0.1", "sample_time_s = 0.0015");
        let cfg = ScenarioConfig::from_str_validated(&toml).unwrap();
        assert!(cfg.build().is_err());
    }

    #[test]
    fn rejects_bad_inverter_ids() {
        let toml = minimal_toml().replace("id = 2", "id = 3");
        let cfg = ScenarioConfig::from_str_validated(&toml).unwrap();
        assert!(cfg.build().is_err());
    }

    #[test]
    fn line_events_produce_switched_models() {
        let toml = minimal_toml().replace(
            "[graph]",
            "[[events.line]]\ntime_s = 0.5\nline = \"B1\"\nclosed = false\n\n[graph]",
        );
        let cfg = ScenarioConfig::from_str_validated(&toml).unwrap();
        let built = cfg.build().unwrap();
        assert_eq!(built.line_events.len(), 1);
        assert_eq!(built.line_events[0].1.topology.susceptance[(0, 1)], 0.0);
    }

    #[test]
    fn disconnected_graph_rejected() {
        let toml = minimal_toml().replace("edges = [[1, 2]]", "edges = []");
        let cfg = ScenarioConfig::from_str_validated(&toml).unwrap();
        assert!(cfg.build().is_err());
    }
}
