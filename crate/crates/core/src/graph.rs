//! Communication and trading topologies.
//!
//! A [`Topology`] is an undirected simple graph with cached neighbor lists and a
//! connectivity flag. [`metropolis_weights`] turns it into a symmetric doubly
//! stochastic [`WeightMatrix`] whose sparsity follows the edges, and
//! [`spectral_gap`] measures how fast that matrix mixes.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{asymmetry, symmetric_eigenvalues, Matrix};

/// Tolerance for the symmetry and stochasticity checks on weight matrices.
pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("a topology needs at least one node")]
    Empty,
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    OutOfRange(usize, usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("topology is disconnected")]
    Disconnected,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not doubly stochastic (max row-sum error {0:e})")]
    NotStochastic(f64),
    #[error("invalid generator parameter: {0}")]
    Generator(String),
}

/// Undirected graph without self-loops or parallel edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    connected: bool,
}

impl Topology {
    /// Validates the edge list and records connectivity.
    ///
    /// Edges are normalized to `(min, max)`; listing both `(i, j)` and `(j, i)`
    /// counts as a duplicate.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut seen = BTreeSet::new();
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(GraphError::OutOfRange(i, j, n));
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(GraphError::DuplicateEdge(i, j));
            }
        }
        let edges: Vec<(usize, usize)> = seen.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let connected = bfs_reaches_all(&neighbors);
        Ok(Self {
            n,
            edges,
            neighbors,
            connected,
        })
    }

    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges)
    }

    /// Cycle on `n` nodes; falls back to a path for `n < 3`.
    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Self::path(n);
        }
        let mut edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        edges.push((n - 1, 0));
        Self::new(n, &edges)
    }

    /// Star centered at node 0.
    pub fn star(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|i| (0, i)).collect();
        Self::new(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect();
        Self::new(n, &edges)
    }

    /// G(n, p) random graph. The result may be disconnected; check
    /// [`Topology::is_connected`].
    pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Self, GraphError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(GraphError::Generator(format!("edge probability {p} not in [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Normalized `(i, j)` pairs with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }
}

fn bfs_reaches_all(neighbors: &[Vec<usize>]) -> bool {
    let mut visited = vec![false; neighbors.len()];
    let mut queue = VecDeque::from([0]);
    visited[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &neighbors[u] {
            if !visited[v] {
                visited[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == neighbors.len()
}

/// Topology description as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologySpec {
    Explicit {
        n: usize,
        edges: Vec<[usize; 2]>,
    },
    Generated {
        generator: Generator,
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Path,
    Ring,
    Star,
    Complete,
    ErdosRenyi,
}

impl TopologySpec {
    pub fn build(&self) -> Result<Topology, GraphError> {
        match self {
            TopologySpec::Explicit { n, edges } => {
                let pairs: Vec<_> = edges.iter().map(|e| (e[0], e[1])).collect();
                Topology::new(*n, &pairs)
            }
            TopologySpec::Generated {
                generator,
                n,
                p,
                seed,
            } => match generator {
                Generator::Path => Topology::path(*n),
                Generator::Ring => Topology::ring(*n),
                Generator::Star => Topology::star(*n),
                Generator::Complete => Topology::complete(*n),
                Generator::ErdosRenyi => {
                    let p = p.ok_or_else(|| {
                        GraphError::Generator("erdos_renyi needs \"p\"".to_string())
                    })?;
                    Topology::erdos_renyi(*n, p, seed.unwrap_or(0))
                }
            },
        }
    }
}

/// Symmetric doubly stochastic mixing matrix `W` with its Laplacian `L = I - W`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    w: Matrix,
    laplacian: Matrix,
    gap: f64,
}

impl WeightMatrix {
    /// Wraps an arbitrary matrix after checking symmetry and stochasticity.
    pub fn from_matrix(w: Matrix) -> Result<Self, GraphError> {
        let gap = spectral_gap(&w)?;
        let n = w.nrows();
        let laplacian = Matrix::identity(n, n) - &w;
        Ok(Self { w, laplacian, gap })
    }

    /// Skips validation; lets tests plant entries a correct solver must never read.
    #[cfg(test)]
    pub(crate) fn from_matrix_unchecked(w: Matrix) -> Self {
        let n = w.nrows();
        let laplacian = Matrix::identity(n, n) - &w;
        Self { w, laplacian, gap: f64::NAN }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    pub fn laplacian(&self) -> &Matrix {
        &self.laplacian
    }

    pub fn spectral_gap(&self) -> f64 {
        self.gap
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// `(I + W) / 2`: same sparsity and fixed points, spectrum moved into `[0, 1]`.
    pub fn lazy(&self) -> Self {
        let n = self.dim();
        let w = (Matrix::identity(n, n) + &self.w) * 0.5;
        Self::from_matrix(w).expect("lazy version of a valid weight matrix is valid")
    }
}

/// Metropolis–Hastings matrix without the connectivity requirement.
///
/// `w_ij = 1 / (1 + max(d_i, d_j))` on edges, the diagonal absorbs the rest.
pub fn metropolis_matrix(t: &Topology) -> Matrix {
    let n = t.n_nodes();
    let mut w = Matrix::zeros(n, n);
    for &(i, j) in t.edges() {
        let wij = 1.0 / (1.0 + t.degree(i).max(t.degree(j)) as f64);
        w[(i, j)] = wij;
        w[(j, i)] = wij;
    }
    for i in 0..n {
        let off: f64 = t.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

pub fn metropolis_weights(t: &Topology) -> Result<WeightMatrix, GraphError> {
    if !t.is_connected() {
        return Err(GraphError::Disconnected);
    }
    WeightMatrix::from_matrix(metropolis_matrix(t))
}

/// `1 - max |λ_i(W)|` over all eigenvalues except the one at 1.
///
/// A single node has no non-principal eigenvalue and gets gap 1.
pub fn spectral_gap(w: &Matrix) -> Result<f64, GraphError> {
    let asym = asymmetry(w);
    if asym > WEIGHT_TOL {
        return Err(GraphError::Asymmetric(asym));
    }
    let row_err = w
        .row_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    if row_err > WEIGHT_TOL {
        return Err(GraphError::NotStochastic(row_err));
    }
    let ev = symmetric_eigenvalues(w);
    if ev.len() <= 1 {
        return Ok(1.0);
    }
    // Drop the eigenvalue closest to 1 (the consensus direction).
    let principal = ev
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let second = ev
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != principal)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    Ok((1.0 - second).clamp(0.0, 1.0))
}
