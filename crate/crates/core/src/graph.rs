//! Communication topology: Laplacian construction, connectivity checks,
//! and the scheduled graph switching used by the topology scenarios.

use crate::error::{Error, Result};
use crate::numerics::{symmetric_eigenvalues, Matrix};

/// Undirected, unweighted communication graph over `n` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    n: usize,
    adjacency: Matrix,
    laplacian: Matrix,
}

impl CommGraph {
    /// Build from an edge list of 1-based node pairs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<CommGraph> {
        if n == 0 {
            return Err(Error::Graph("graph needs at least one node".into()));
        }
        let mut adjacency = Matrix::zeros(n, n);
        for &(a, b) in edges {
            if a == 0 || b == 0 || a > n || b > n {
                return Err(Error::Graph(format!("edge ({a},{b}) references invalid node")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop at node {a}")));
            }
            let (i, j) = (a - 1, b - 1);
            if adjacency[(i, j)] != 0.0 {
                return Err(Error::Graph(format!("duplicate edge ({a},{b})")));
            }
            adjacency[(i, j)] = 1.0;
            adjacency[(j, i)] = 1.0;
        }
        let mut laplacian = adjacency.scale(-1.0);
        for i in 0..n {
            let degree: f64 = adjacency.row(i).iter().sum();
            laplacian[(i, i)] = degree;
        }
        Ok(CommGraph {
            n,
            adjacency,
            laplacian,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &Matrix {
        &self.laplacian
    }

    pub fn laplacian_row(&self, i: usize) -> &[f64] {
        self.laplacian.row(i)
    }

    /// 0-based neighbor indices of agent `i` (0-based).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.adjacency[(i, j)] > 0.0).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).len()
    }

    /// Connectivity via the algebraic connectivity lambda_2: the graph is
    /// connected iff the second-smallest Laplacian eigenvalue is positive.
    pub fn is_connected(&self) -> Result<(bool, f64)> {
        if self.n == 1 {
            return Ok((true, 0.0));
        }
        let eigs = symmetric_eigenvalues(&self.laplacian)?;
        let lambda2 = eigs[1];
        Ok((lambda2 > 1e-9, lambda2))
    }
}

/// Time-ordered schedule of communication graphs.
#[derive(Debug, Clone)]
pub struct SwitchSchedule {
    events: Vec<(f64, CommGraph)>,
}

impl SwitchSchedule {
    /// Events must be time-sorted, start at t <= 0, and every graph must be
    /// connected.
    pub fn new(events: Vec<(f64, CommGraph)>) -> Result<SwitchSchedule> {
        if events.is_empty() {
            return Err(Error::Graph("schedule must contain at least one graph".into()));
        }
        if events[0].0 > 0.0 {
            return Err(Error::Graph("first graph event must be at t <= 0".into()));
        }
        for w in events.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Graph("graph events must be strictly time-sorted".into()));
            }
        }
        for (t, g) in &events {
            let (connected, lambda2) = g.is_connected()?;
            if !connected {
                return Err(Error::Graph(format!(
                    "graph at t={t} is disconnected (lambda_2 = {lambda2:.3e})"
                )));
            }
        }
        Ok(SwitchSchedule { events })
    }

    /// Latest graph with event time <= t; the switch boundary is inclusive.
    pub fn active_graph(&self, t: f64) -> Result<&CommGraph> {
        let mut chosen: Option<&CommGraph> = None;
        for (et, g) in &self.events {
            if *et <= t {
                chosen = Some(g);
            } else {
                break;
            }
        }
        chosen.ok_or_else(|| Error::Graph(format!("query at t={t} precedes first graph event")))
    }

    pub fn events(&self) -> &[(f64, CommGraph)] {
        &self.events
    }
}

/// Edge list of the default communication topology on five agents.
pub const L1_EDGES: [(usize, usize); 5] = [(1, 2), (2, 3), (3, 4), (3, 5), (1, 4)];

/// Edge list of the star topology the graph-switch scenario moves to.
pub const L2_EDGES: [(usize, usize); 4] = [(1, 2), (1, 3), (1, 4), (1, 5)];
