//! Radial network topology: buses, lines, tree queries, and the voltage
//! sensitivity matrices used by both the controller and the oracle.
//!
//! Buses are numbered `0..=n`; bus 0 is always the substation (slack) bus.
//! Every other bus is connected to its parent by exactly one line, so the
//! network is a tree rooted at the substation.

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

/// Bus identifier. Bus 0 is the substation.
pub type BusId = usize;

/// A distribution line joining a parent bus to a child bus.
///
/// `r` and `x` are the series resistance and reactance in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
}

impl Line {
    pub fn new(from: BusId, to: BusId, r: f64, x: f64) -> Self {
        Line { from, to, r, x }
    }
}

/// Errors raised while validating a candidate network.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetworkError {
    /// Bus 0 missing, or the network has no non-root bus to control.
    #[error("network must contain the substation (bus 0) and at least one other bus")]
    BadRoot,
    /// The same pair of buses is joined by more than one line.
    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(BusId, BusId),
    /// Adding this line closes a loop, so the network is not radial.
    #[error("line between buses {0} and {1} closes a cycle")]
    CycleDetected(BusId, BusId),
    /// The bus has no path to the substation.
    #[error("bus {0} is not connected to the substation")]
    DisconnectedBus(BusId),
    /// A line references a bus id outside `0..num_buses`.
    #[error("line references bus {0} but bus ids end at {1}")]
    UnknownBus(BusId, BusId),
    /// Lines must have strictly positive resistance and reactance.
    #[error("line between buses {0} and {1} must have positive finite r and x")]
    NonPositiveImpedance(BusId, BusId),
}

/// A validated rooted radial (tree) distribution network.
#[derive(Debug, Clone)]
pub struct RadialNetwork {
    /// `parent[i]` for every bus; `parent[0]` is `None`.
    parent: Vec<Option<BusId>>,
    /// Children of every bus, ascending by id.
    children: Vec<Vec<BusId>>,
    /// Impedance of the line from `parent[i]` into bus `i`; index 0 unused.
    line_r: Vec<f64>,
    line_x: Vec<f64>,
    /// Hop count from the substation; `depth[0] == 0`.
    depth: Vec<usize>,
    /// Non-root buses ordered so that parents precede children.
    order: Vec<BusId>,
}

impl RadialNetwork {
    /// Builds and validates a network over buses `0..num_buses`.
    pub fn new(num_buses: usize, lines: &[Line]) -> Result<Self, NetworkError> {
        if num_buses < 2 {
            return Err(NetworkError::BadRoot);
        }
        let mut seen = std::collections::HashSet::new();
        let mut uf: Vec<BusId> = (0..num_buses).collect();
        fn find(uf: &mut [BusId], mut i: BusId) -> BusId {
            while uf[i] != i {
                uf[i] = uf[uf[i]]; // path halving
                i = uf[i];
            }
            i
        }
        for l in lines {
            let hi = l.from.max(l.to);
            if hi >= num_buses {
                return Err(NetworkError::UnknownBus(hi, num_buses - 1));
            }
            if l.from == l.to {
                return Err(NetworkError::CycleDetected(l.from, l.to));
            }
            if !(l.r.is_finite() && l.x.is_finite() && l.r > 0.0 && l.x > 0.0) {
                return Err(NetworkError::NonPositiveImpedance(l.from, l.to));
            }
            if !seen.insert((l.from.min(l.to), hi)) {
                return Err(NetworkError::DuplicateLine(l.from, l.to));
            }
            let (ra, rb) = (find(&mut uf, l.from), find(&mut uf, l.to));
            if ra == rb {
                return Err(NetworkError::CycleDetected(l.from, l.to));
            }
            uf[ra] = rb;
        }

        // Breadth-first search from the substation fixes parents, depths and
        // canonical line orientation (a file may list a line child-first).
        let mut adj: Vec<Vec<(BusId, f64, f64)>> = vec![Vec::new(); num_buses];
        for l in lines {
            adj[l.from].push((l.to, l.r, l.x));
            adj[l.to].push((l.from, l.r, l.x));
        }
        for a in &mut adj {
            a.sort_by_key(|&(b, _, _)| b);
        }
        let mut parent = vec![None; num_buses];
        let mut depth = vec![0usize; num_buses];
        let mut line_r = vec![0.0; num_buses];
        let mut line_x = vec![0.0; num_buses];
        let mut visited = vec![false; num_buses];
        let mut order = Vec::with_capacity(num_buses - 1);
        let mut frontier = std::collections::VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(i) = frontier.pop_front() {
            for &(j, r, x) in &adj[i] {
                if !visited[j] {
                    visited[j] = true;
                    parent[j] = Some(i);
                    depth[j] = depth[i] + 1;
                    line_r[j] = r;
                    line_x[j] = x;
                    order.push(j);
                    frontier.push_back(j);
                }
            }
        }
        if let Some(i) = visited.iter().position(|v| !v) {
            return Err(NetworkError::DisconnectedBus(i));
        }
        let mut children: Vec<Vec<BusId>> = vec![Vec::new(); num_buses];
        for &i in &order {
            children[parent[i].unwrap()].push(i);
        }
        Ok(RadialNetwork {
            parent,
            children,
            line_r,
            line_x,
            depth,
            order,
        })
    }

    /// Builds a network from a line list alone; the bus count is implied by
    /// the largest endpoint id.
    pub fn from_lines(lines: &[Line]) -> Result<Self, NetworkError> {
        let num_buses = lines
            .iter()
            .map(|l| l.from.max(l.to) + 1)
            .max()
            .unwrap_or(0);
        Self::new(num_buses, lines)
    }

    /// Generates a random tree: bus `i` attaches to a uniformly chosen bus
    /// `< i`, with impedances drawn from the given per-unit ranges. Useful
    /// for randomized tests and synthetic feeders.
    pub fn random<R: Rng>(
        rng: &mut R,
        num_buses: usize,
        r_range: (f64, f64),
        x_range: (f64, f64),
    ) -> Self {
        assert!(num_buses >= 2, "need at least one non-root bus");
        let lines: Vec<Line> = (1..num_buses)
            .map(|i| {
                let parent = rng.gen_range(0..i);
                let r = r_range.0 + rng.gen::<f64>() * (r_range.1 - r_range.0);
                let x = x_range.0 + rng.gen::<f64>() * (x_range.1 - x_range.0);
                Line::new(parent, i, r, x)
            })
            .collect();
        Self::new(num_buses, &lines).expect("construction always yields a valid tree")
    }

    /// Number of non-root buses (the controllable buses).
    pub fn num_buses(&self) -> usize {
        self.parent.len() - 1
    }

    /// Total bus count including the substation.
    pub fn num_buses_total(&self) -> usize {
        self.parent.len()
    }

    /// Parent of a bus; `None` for the substation.
    pub fn parent(&self, i: BusId) -> Option<BusId> {
        self.parent[i]
    }

    /// Children of a bus, ascending by id.
    pub fn children(&self, i: BusId) -> &[BusId] {
        &self.children[i]
    }

    /// `(r, x)` of the line from `parent(i)` into non-root bus `i`.
    pub fn line_impedance(&self, i: BusId) -> (f64, f64) {
        assert!(i > 0, "the substation has no incoming line");
        (self.line_r[i], self.line_x[i])
    }

    /// Hop count from the substation.
    pub fn depth(&self, i: BusId) -> usize {
        self.depth[i]
    }

    /// Non-root buses ordered so every parent precedes its children.
    pub fn bus_order(&self) -> &[BusId] {
        &self.order
    }

    /// Buses on the path from `i` up to and including the substation.
    pub fn path_to_root(&self, i: BusId) -> Vec<BusId> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Most recent common ancestor of two buses.
    pub fn mrca(&self, i: BusId, j: BusId) -> BusId {
        let (mut a, mut b) = (i, j);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap();
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap();
        }
        while a != b {
            a = self.parent[a].unwrap();
            b = self.parent[b].unwrap();
        }
        a
    }

    /// Hop distance between two buses along the tree.
    pub fn dist(&self, i: BusId, j: BusId) -> usize {
        self.depth[i] + self.depth[j] - 2 * self.depth[self.mrca(i, j)]
    }

    /// Maximum pairwise hop distance over the non-root buses.
    pub fn diameter(&self) -> usize {
        let n = self.num_buses_total();
        let mut best = 0;
        for i in 1..n {
            for j in (i + 1)..n {
                best = best.max(self.dist(i, j));
            }
        }
        best
    }

    /// Number of buses fed directly by the substation.
    pub fn substation_degree(&self) -> usize {
        self.children[0].len()
    }

    /// Voltage sensitivity matrices for the linearized power flow.
    pub fn sensitivity(&self) -> SensitivityMatrices {
        let total = self.num_buses_total();
        let n = self.num_buses();
        // Diagonal entries accumulate down the tree: each bus adds twice its
        // incoming line impedance to its parent's diagonal entry.
        let mut diag_r = vec![0.0; total];
        let mut diag_x = vec![0.0; total];
        for &i in &self.order {
            let p = self.parent[i].unwrap();
            diag_r[i] = diag_r[p] + 2.0 * self.line_r[i];
            diag_x[i] = diag_x[p] + 2.0 * self.line_x[i];
        }
        // Off-diagonal entries equal the diagonal entry of the most recent
        // common ancestor (the shared path to the substation).
        let mut r = DMatrix::zeros(n, n);
        let mut x = DMatrix::zeros(n, n);
        for i in 1..=n {
            for j in i..=n {
                let k = self.mrca(i, j);
                r[(i - 1, j - 1)] = diag_r[k];
                r[(j - 1, i - 1)] = diag_r[k];
                x[(i - 1, j - 1)] = diag_x[k];
                x[(j - 1, i - 1)] = diag_x[k];
            }
        }
        SensitivityMatrices { r, x }
    }
}

/// Dense voltage sensitivity matrices over the non-root buses.
///
/// Row and column `k` correspond to bus `k + 1`; entry `(i-1, j-1)` is the
/// change in squared voltage at bus `i` per unit of power injected at bus
/// `j`. Both matrices are symmetric positive definite for a valid network.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl SensitivityMatrices {
    /// Entry of `r` addressed by bus ids.
    pub fn r_at(&self, i: BusId, j: BusId) -> f64 {
        self.r[(i - 1, j - 1)]
    }

    /// Entry of `x` addressed by bus ids.
    pub fn x_at(&self, i: BusId, j: BusId) -> f64 {
        self.x[(i - 1, j - 1)]
    }

    /// Diagonal entry of `r` for a bus.
    pub fn diag_r(&self, i: BusId) -> f64 {
        self.r[(i - 1, i - 1)]
    }

    /// Diagonal entry of `x` for a bus.
    pub fn diag_x(&self, i: BusId) -> f64 {
        self.x[(i - 1, i - 1)]
    }

    pub fn n(&self) -> usize {
        self.r.nrows()
    }
}
