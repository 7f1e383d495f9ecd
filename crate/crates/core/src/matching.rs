//! Generalized Gale–Shapley stable allocations on an interference graph.
//!
//! An allocation maps every cell to one channel. It is *stable* when it is
//! interference-free and every cell that prefers another channel is blocked
//! there by an assigned neighbor with a strictly higher mean rate on it.
//!
//! [`solve_stable`] is the greedy max-first solver: repeatedly take the
//! largest remaining entry `(cell, channel)` among unassigned cells, assign it
//! if no neighbor already holds the channel, otherwise discard that single
//! entry and log the collision. Ties are broken by lowest cell index, then
//! lowest channel index. Only order comparisons are used.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::InterferenceGraph;

/// Guard for [`enumerate_stable`]: at most this many candidate maps.
pub const ENUMERATION_LIMIT: f64 = 1e7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("rate matrix has {rows} rows but the graph has {cells} cells")]
    DimensionMismatch { rows: usize, cells: usize },
    #[error("rate matrix rows have inconsistent lengths")]
    RaggedRows,
    #[error("rate entry ({cell}, {channel}) = {value} is negative or not finite")]
    InvalidRate {
        cell: usize,
        channel: usize,
        value: f64,
    },
    #[error("no feasible channel remains for cell {cell}")]
    Deadlock {
        cell: usize,
        log: Vec<IterationRecord>,
    },
    #[error("invalid allocation: {0}")]
    InvalidAllocation(String),
    #[error("instance too large to enumerate: {channels}^{cells} candidate maps")]
    InstanceTooLarge { cells: usize, channels: usize },
}

/// Dense `cells x channels` matrix of (estimated or true) mean rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    cells: usize,
    channels: usize,
    values: Vec<f64>,
}

impl RateMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(MatchingError::RaggedRows);
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let m = Self {
            cells: rows.len(),
            channels,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_fn(cells: usize, channels: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(cells * channels);
        for l in 0..cells {
            for s in 0..channels {
                values.push(f(l, s));
            }
        }
        Self {
            cells,
            channels,
            values,
        }
    }

    pub fn zeros(cells: usize, channels: usize) -> Self {
        Self::from_fn(cells, channels, |_, _| 0.0)
    }

    /// Checks that every entry is finite and nonnegative.
    pub fn validate(&self) -> Result<(), MatchingError> {
        for l in 0..self.cells {
            for s in 0..self.channels {
                let value = self.get(l, s);
                if !value.is_finite() || value < 0.0 {
                    return Err(MatchingError::InvalidRate {
                        cell: l,
                        channel: s,
                        value,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, cell: usize, channel: usize) -> f64 {
        self.values[cell * self.channels + channel]
    }

    pub fn set(&mut self, cell: usize, channel: usize, value: f64) {
        self.values[cell * self.channels + channel] = value;
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.channels..(cell + 1) * self.channels]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.cells).map(|l| self.row(l).to_vec()).collect()
    }

    /// Applies `f` to every entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            cells: self.cells,
            channels: self.channels,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Total map from cell to channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Allocation(Vec<usize>);

impl Allocation {
    pub fn new(channels: Vec<usize>) -> Self {
        Self(channels)
    }

    pub fn channel_of(&self, cell: usize) -> usize {
        self.0[cell]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Cells assigned to `channel`.
    pub fn cells_on(&self, channel: usize) -> Vec<usize> {
        (0..self.0.len()).filter(|&l| self.0[l] == channel).collect()
    }

    /// Sum of `rates[cell, P(cell)]`.
    pub fn value(&self, rates: &RateMatrix) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(l, &s)| rates.get(l, s))
            .sum()
    }
}

/// What happened in one iteration of the greedy solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IterationOutcome {
    Assigned,
    /// Assigned neighbors already holding the channel.
    Collision { blockers: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub cell: usize,
    pub channel: usize,
    pub value: f64,
    pub outcome: IterationOutcome,
}

impl IterationRecord {
    pub fn is_collision(&self) -> bool {
        matches!(self.outcome, IterationOutcome::Collision { .. })
    }

    /// Slots the iteration occupies: one for an assignment, two (attempt and
    /// repeat) for a collision.
    pub fn slots(&self) -> u64 {
        if self.is_collision() {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StableSolution {
    pub allocation: Allocation,
    pub log: Vec<IterationRecord>,
}

impl StableSolution {
    pub fn iterations(&self) -> usize {
        self.log.len()
    }

    pub fn collisions(&self) -> usize {
        self.log.iter().filter(|r| r.is_collision()).count()
    }

    /// 1-based iteration numbers at which collisions occurred.
    pub fn collision_iterations(&self) -> Vec<usize> {
        self.log
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_collision())
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn slots(&self) -> u64 {
        self.log.iter().map(IterationRecord::slots).sum()
    }
}

fn check_dims(rates: &RateMatrix, graph: &InterferenceGraph) -> Result<(), MatchingError> {
    if rates.cells() != graph.cell_count() {
        return Err(MatchingError::DimensionMismatch {
            rows: rates.cells(),
            cells: graph.cell_count(),
        });
    }
    Ok(())
}

/// Entries in greedy order: value descending, then cell, then channel.
pub fn greedy_order(rates: &RateMatrix) -> Vec<(usize, usize)> {
    let mut entries: Vec<(usize, usize)> = (0..rates.cells())
        .flat_map(|l| (0..rates.channels()).map(move |s| (l, s)))
        .collect();
    entries.sort_by(|&(l1, s1), &(l2, s2)| {
        rates
            .get(l2, s2)
            .total_cmp(&rates.get(l1, s1))
            .then(l1.cmp(&l2))
            .then(s1.cmp(&s2))
    });
    entries
}

/// Greedy max-first stable allocation with its iteration log.
///
/// Discarding entries in sorted order is the same as repeatedly taking the
/// maximum of the shrinking matrix: an assignment removes a whole row and a
/// collision removes a single entry, so the next maximum is always the next
/// sorted entry whose row is still unassigned.
pub fn solve_stable(
    rates: &RateMatrix,
    graph: &InterferenceGraph,
) -> Result<StableSolution, MatchingError> {
    check_dims(rates, graph)?;
    rates.validate()?;
    let cells = rates.cells();
    let mut assigned: Vec<Option<usize>> = vec![None; cells];
    let mut remaining = cells;
    let mut log = Vec::new();
    for (cell, channel) in greedy_order(rates) {
        if remaining == 0 {
            break;
        }
        if assigned[cell].is_some() {
            continue;
        }
        let blockers: Vec<usize> = graph
            .neighbors(cell)
            .iter()
            .copied()
            .filter(|&q| assigned[q] == Some(channel))
            .collect();
        let outcome = if blockers.is_empty() {
            assigned[cell] = Some(channel);
            remaining -= 1;
            IterationOutcome::Assigned
        } else {
            IterationOutcome::Collision { blockers }
        };
        log.push(IterationRecord {
            cell,
            channel,
            value: rates.get(cell, channel),
            outcome,
        });
    }
    if let Some(cell) = assigned.iter().position(Option::is_none) {
        return Err(MatchingError::Deadlock { cell, log });
    }
    Ok(StableSolution {
        allocation: Allocation::new(assigned.into_iter().map(Option::unwrap).collect()),
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    /// `cell` prefers `channel` and no assigned neighbor there outranks it.
    Blocking { cell: usize, channel: usize },
}

impl Stability {
    pub fn is_stable(&self) -> bool {
        matches!(self, Stability::Stable)
    }
}

/// Checks assignment validity, interference feasibility and stability.
pub fn is_stable(
    alloc: &Allocation,
    rates: &RateMatrix,
    graph: &InterferenceGraph,
) -> Result<Stability, MatchingError> {
    check_dims(rates, graph)?;
    check_feasible(alloc, rates.channels(), graph)?;
    Ok(stability_unchecked(alloc, rates, graph))
}

fn check_feasible(
    alloc: &Allocation,
    channels: usize,
    graph: &InterferenceGraph,
) -> Result<(), MatchingError> {
    if alloc.len() != graph.cell_count() {
        return Err(MatchingError::InvalidAllocation(format!(
            "{} cells assigned, expected {}",
            alloc.len(),
            graph.cell_count()
        )));
    }
    if let Some(cell) = alloc.as_slice().iter().position(|&s| s >= channels) {
        return Err(MatchingError::InvalidAllocation(format!(
            "cell {cell} assigned to channel {} of {channels}",
            alloc.channel_of(cell)
        )));
    }
    for &(a, b) in graph.edges() {
        if alloc.channel_of(a) == alloc.channel_of(b) {
            return Err(MatchingError::InvalidAllocation(format!(
                "neighbors {a} and {b} share channel {}",
                alloc.channel_of(a)
            )));
        }
    }
    Ok(())
}

fn stability_unchecked(
    alloc: &Allocation,
    rates: &RateMatrix,
    graph: &InterferenceGraph,
) -> Stability {
    for cell in 0..rates.cells() {
        let current = rates.get(cell, alloc.channel_of(cell));
        for channel in 0..rates.channels() {
            let wanted = rates.get(cell, channel);
            if wanted <= current {
                continue;
            }
            let blocked = graph
                .neighbors(cell)
                .iter()
                .any(|&q| alloc.channel_of(q) == channel && rates.get(q, channel) > wanted);
            if !blocked {
                return Stability::Blocking { cell, channel };
            }
        }
    }
    Stability::Stable
}

/// Every stable allocation, by exhaustive search over all interference-free
/// maps.
pub fn enumerate_stable(
    rates: &RateMatrix,
    graph: &InterferenceGraph,
) -> Result<Vec<Allocation>, MatchingError> {
    check_dims(rates, graph)?;
    let (cells, channels) = (rates.cells(), rates.channels());
    if (channels as f64).powi(cells as i32) > ENUMERATION_LIMIT {
        return Err(MatchingError::InstanceTooLarge { cells, channels });
    }
    let mut found = Vec::new();
    if channels == 0 {
        return Ok(found);
    }
    let mut current = vec![0usize; cells];
    enumerate_from(0, &mut current, rates, graph, &mut found);
    Ok(found)
}

fn enumerate_from(
    cell: usize,
    current: &mut Vec<usize>,
    rates: &RateMatrix,
    graph: &InterferenceGraph,
    found: &mut Vec<Allocation>,
) {
    if cell == current.len() {
        let alloc = Allocation::new(current.clone());
        if stability_unchecked(&alloc, rates, graph).is_stable() {
            found.push(alloc);
        }
        return;
    }
    for channel in 0..rates.channels() {
        // Maps that put two neighbors on one channel violate feasibility.
        if graph
            .neighbors(cell)
            .iter()
            .any(|&q| q < cell && current[q] == channel)
        {
            continue;
        }
        current[cell] = channel;
        enumerate_from(cell + 1, current, rates, graph, found);
    }
}
