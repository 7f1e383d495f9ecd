//! Interference graph between cells.
//!
//! Cells are indexed from 0. An edge means the two cells cannot use the same
//! channel in the same slot.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("edge ({0}, {0}) is a self-loop")]
    SelfLoop(usize),
    #[error("cell index {index} out of range for {cell_count} cells")]
    IndexOutOfRange { index: usize, cell_count: usize },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterferenceGraph {
    cell_count: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    // Row-major L x L adjacency for O(1) neighbor tests.
    matrix: Vec<bool>,
}

impl InterferenceGraph {
    /// Builds and validates a graph. Edges are unordered; `(a, b)` and
    /// `(b, a)` are the same edge.
    pub fn new(
        cell_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        let mut matrix = vec![false; cell_count * cell_count];
        let mut adjacency = vec![Vec::new(); cell_count];
        let mut normalized = Vec::new();
        for (a, b) in edges {
            for index in [a, b] {
                if index >= cell_count {
                    return Err(TopologyError::IndexOutOfRange { index, cell_count });
                }
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            let (lo, hi) = (a.min(b), a.max(b));
            if matrix[lo * cell_count + hi] {
                return Err(TopologyError::DuplicateEdge(lo, hi));
            }
            matrix[lo * cell_count + hi] = true;
            matrix[hi * cell_count + lo] = true;
            adjacency[lo].push(hi);
            adjacency[hi].push(lo);
            normalized.push((lo, hi));
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        normalized.sort_unstable();
        Ok(Self {
            cell_count,
            edges: normalized,
            adjacency,
            matrix,
        })
    }

    pub fn empty(cell_count: usize) -> Self {
        Self::new(cell_count, []).expect("empty graph is valid")
    }

    pub fn complete(cell_count: usize) -> Self {
        let edges = (0..cell_count).flat_map(|a| (a + 1..cell_count).map(move |b| (a, b)));
        Self::new(cell_count, edges).expect("complete graph is valid")
    }

    /// Path `0 - 1 - ... - (n-1)`.
    pub fn path(cell_count: usize) -> Self {
        let edges = (1..cell_count).map(|b| (b - 1, b));
        Self::new(cell_count, edges).expect("path graph is valid")
    }

    /// Erdős–Rényi graph: each unordered pair is an edge with probability
    /// `edge_probability`.
    pub fn erdos_renyi<R: Rng + ?Sized>(
        cell_count: usize,
        edge_probability: f64,
        rng: &mut R,
    ) -> Self {
        let mut edges = Vec::new();
        for a in 0..cell_count {
            for b in a + 1..cell_count {
                if rng.random::<f64>() < edge_probability {
                    edges.push((a, b));
                }
            }
        }
        Self::new(cell_count, edges).expect("generated edges are valid")
    }

    pub fn cell_count(&self) -> usize {
        self.cell_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, cell: usize) -> &[usize] {
        &self.adjacency[cell]
    }

    pub fn degree(&self, cell: usize) -> usize {
        self.adjacency[cell].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.matrix[a * self.cell_count + b]
    }

    /// Whether `channel_count >= D + 1` for every cell. This is sufficient
    /// for every cell to find a free channel, not necessary; callers treat a
    /// `false` as a warning and let the solver detect real deadlock.
    pub fn check_feasibility(&self, channel_count: usize) -> bool {
        channel_count > self.max_degree()
    }

    /// Cells whose degree violates the sufficient condition.
    pub fn crowded_cells(&self, channel_count: usize) -> Vec<usize> {
        (0..self.cell_count)
            .filter(|&l| self.degree(l) + 1 > channel_count)
            .collect()
    }
}
