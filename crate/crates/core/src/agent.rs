//! Per-cell learning state machine.
//!
//! Each cell keeps, for every channel, the samples gathered during
//! estimation epochs, the number of exploration epochs run, and the last
//! observed state (the anchor the next recovery epoch must return to).
//! From its estimates and its collision registry it derives an exploration
//! coefficient per channel; a channel needs exploring at slot `t` while
//!
//! ```text
//! samples < max(coefficient, 2 / I) * ln t
//! ```
//!
//! An exploration phase is a recovery epoch (wait until the chain revisits
//! the anchor state; those samples are discarded) followed by an estimation
//! epoch of `4^(epochs - 1)` counted samples. The recovery-exit sample is
//! counted too.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("channel {0} initialized twice")]
    DoubleInit(usize),
    #[error("channel {0} has no samples yet")]
    NotInitialized(usize),
    #[error("operation requires phase {expected}, agent is in {found:?}")]
    WrongPhase {
        expected: &'static str,
        found: Phase,
    },
    #[error("cell {neighbor} is not a neighbor of cell {cell}")]
    NotANeighbor { cell: usize, neighbor: usize },
    #[error("channel {channel} out of range")]
    ChannelOutOfRange { channel: usize },
    #[error("recovery on channel {channel} exceeded {slots} slots")]
    RecoveryTimeout { channel: usize, slots: u64 },
    #[error("invalid agent parameters: {0}")]
    InvalidParams(String),
}

/// Tuning shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    /// Scale of the exploration coefficients (`4 * kappa / gap^2`).
    pub kappa: f64,
    /// Concentration constant `I`; every channel gets at least
    /// `(2 / I) * ln t` samples.
    pub concentration_rate: f64,
    /// Slack subtracted from squared estimate gaps.
    pub epsilon: f64,
    /// Lower bound on the (slack-adjusted) squared gap in a coefficient's
    /// denominator.
    pub gap_floor: f64,
    /// Optional cap on a single recovery epoch.
    pub recovery_cap: Option<u64>,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            concentration_rate: 0.05,
            epsilon: 0.0,
            gap_floor: 1e-6,
            recovery_cap: None,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |what: &str| Err(AgentError::InvalidParams(what.to_string()));
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return bad("kappa must be positive");
        }
        if !(self.concentration_rate.is_finite() && self.concentration_rate > 0.0) {
            return bad("concentration rate must be positive");
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be nonnegative");
        }
        if !(self.gap_floor.is_finite() && self.gap_floor > 0.0) {
            return bad("gap floor must be positive");
        }
        if self.recovery_cap == Some(0) {
            return bad("recovery cap must be positive");
        }
        Ok(())
    }

    /// `2 / I`.
    pub fn sample_floor(&self) -> f64 {
        2.0 / self.concentration_rate
    }

    fn coefficient(&self, squared_gap: f64) -> f64 {
        4.0 * self.kappa / self.gap_floor.max(squared_gap - self.epsilon)
    }
}

/// Per-channel sample bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// Samples counted toward the estimate.
    pub ee_samples: u64,
    /// Sum of counted sample rates.
    pub ee_sum: f64,
    /// Exploration epoch counter; 1 before initialization, 2 after.
    pub epoch_count: u32,
    /// Last state observed at the end of the previous epoch.
    pub anchor: Option<usize>,
    pub estimate: f64,
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            ee_samples: 0,
            ee_sum: 0.0,
            epoch_count: 1,
            anchor: None,
            estimate: 0.0,
        }
    }
}

impl ChannelStats {
    fn record(&mut self, rate: f64) {
        self.ee_samples += 1;
        self.ee_sum += rate;
        self.estimate = self.ee_sum / self.ee_samples as f64;
    }

    /// Length of the next estimation epoch.
    pub fn estimation_length(&self) -> u64 {
        4u64.pow(self.epoch_count - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExploreStage {
    Recovery { slots: u64 },
    Estimation { remaining: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Explore { channel: usize, stage: ExploreStage },
    AwaitInterrupt,
    Allocate,
    Exploit { channel: usize },
}

/// Allocation-protocol view held by one cell.
#[derive(Debug, Clone, Default, PartialEq)]
struct Bidding {
    eliminated: Vec<bool>,
    assigned: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    cell: usize,
    neighbors: Vec<usize>,
    params: AgentParams,
    channels: Vec<ChannelStats>,
    /// Collision registry: per channel, neighbor id -> last announced estimate.
    registry: Vec<BTreeMap<usize, f64>>,
    exploitation_count: u32,
    phase: Phase,
    assignment: Option<usize>,
    bidding: Bidding,
    // Cached max(coefficient, 2/I) per channel and min over channels of
    // samples / that value; refreshed whenever estimates or registries move.
    thresholds: Vec<f64>,
    min_ratio: f64,
}

impl AgentState {
    pub fn new(
        cell: usize,
        channel_count: usize,
        neighbors: Vec<usize>,
        params: AgentParams,
    ) -> Result<Self, AgentError> {
        params.validate()?;
        if neighbors.contains(&cell) {
            return Err(AgentError::NotANeighbor {
                cell,
                neighbor: cell,
            });
        }
        Ok(Self {
            cell,
            neighbors,
            params,
            channels: vec![ChannelStats::default(); channel_count],
            registry: vec![BTreeMap::new(); channel_count],
            exploitation_count: 0,
            phase: Phase::Init,
            assignment: None,
            bidding: Bidding::default(),
            thresholds: vec![f64::INFINITY; channel_count],
            min_ratio: 0.0,
        })
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn degree(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self) -> &[usize] {
        &self.neighbors
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn stats(&self, channel: usize) -> &ChannelStats {
        &self.channels[channel]
    }

    pub fn estimate(&self, channel: usize) -> f64 {
        self.channels[channel].estimate
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.estimate).collect()
    }

    pub fn registry(&self, channel: usize) -> &BTreeMap<usize, f64> {
        &self.registry[channel]
    }

    pub fn exploitation_count(&self) -> u32 {
        self.exploitation_count
    }

    /// Channel obtained in the last allocation phase.
    pub fn assignment(&self) -> Option<usize> {
        self.assignment
    }

    pub fn is_initialized(&self) -> bool {
        self.channels.iter().all(|c| c.ee_samples > 0)
    }

    fn check_channel(&self, channel: usize) -> Result<(), AgentError> {
        if channel >= self.channels.len() {
            return Err(AgentError::ChannelOutOfRange { channel });
        }
        Ok(())
    }

    /// Records the single initialization sample of `channel`.
    pub fn init_sample(&mut self, channel: usize, state: usize, rate: f64) -> Result<(), AgentError> {
        self.check_channel(channel)?;
        if self.phase != Phase::Init {
            return Err(AgentError::WrongPhase {
                expected: "Init",
                found: self.phase,
            });
        }
        let stats = &mut self.channels[channel];
        if stats.ee_samples > 0 {
            return Err(AgentError::DoubleInit(channel));
        }
        stats.record(rate);
        stats.epoch_count += 1;
        stats.anchor = Some(state);
        if self.is_initialized() {
            self.phase = Phase::AwaitInterrupt;
            self.refresh();
        }
        Ok(())
    }

    /// Indices of the `D + 1` largest estimates (ties to the lower channel).
    pub fn best_channels(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.channels.len()).collect();
        order.sort_by(|&a, &b| {
            self.estimate(b)
                .total_cmp(&self.estimate(a))
                .then(a.cmp(&b))
        });
        order.truncate(self.degree() + 1);
        order
    }

    /// Row coefficient: separation of `channel` from the other channels of
    /// this cell. For one of the `D + 1` best channels the gap is to the
    /// nearest other estimate; otherwise it is to the worst of the best.
    pub fn estimated_row_coefficient(&self, channel: usize) -> Result<f64, AgentError> {
        self.check_channel(channel)?;
        if let Some(c) = self.channels.iter().position(|c| c.ee_samples == 0) {
            return Err(AgentError::NotInitialized(c));
        }
        Ok(self.row_coefficients()[channel])
    }

    fn row_coefficients(&self) -> Vec<f64> {
        let n = self.channels.len();
        if n < 2 {
            return vec![0.0; n];
        }
        let best = self.best_channels();
        let mut in_best = vec![false; n];
        best.iter().for_each(|&s| in_best[s] = true);
        let cutoff = best
            .iter()
            .map(|&s| self.estimate(s))
            .fold(f64::INFINITY, f64::min);
        // Nearest other estimate is adjacent in sorted order.
        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by(|&a, &b| self.estimate(a).total_cmp(&self.estimate(b)));
        let mut nearest = vec![f64::INFINITY; n];
        for w in sorted.windows(2) {
            let d = (self.estimate(w[0]) - self.estimate(w[1])).powi(2);
            nearest[w[0]] = nearest[w[0]].min(d);
            nearest[w[1]] = nearest[w[1]].min(d);
        }
        (0..n)
            .map(|s| {
                let gap = if in_best[s] {
                    nearest[s]
                } else {
                    (self.estimate(s) - cutoff).powi(2)
                };
                self.params.coefficient(gap)
            })
            .collect()
    }

    /// Column coefficient: separation from neighbors seen contending for the
    /// same channel. Zero while the registry is empty.
    pub fn estimated_column_coefficient(&self, channel: usize) -> f64 {
        let own = self.estimate(channel);
        self.registry[channel]
            .values()
            .map(|&theirs| (own - theirs).powi(2))
            .min_by(f64::total_cmp)
            .map_or(0.0, |gap| self.params.coefficient(gap))
    }

    /// Combined coefficient `max(row, column)`.
    pub fn exploration_coefficient(&self, channel: usize) -> Result<f64, AgentError> {
        Ok(self
            .estimated_row_coefficient(channel)?
            .max(self.estimated_column_coefficient(channel)))
    }

    /// `max(coefficient, 2 / I) * ln t`.
    pub fn exploration_threshold(&self, channel: usize, t: u64) -> Result<f64, AgentError> {
        let c = self.exploration_coefficient(channel)?;
        Ok(c.max(self.params.sample_floor()) * ln(t))
    }

    /// Whether `channel` is under-sampled at slot `t`.
    pub fn exploration_needed(&self, channel: usize, t: u64) -> bool {
        if !self.is_initialized() || channel >= self.channels.len() {
            return false;
        }
        (self.channels[channel].ee_samples as f64) < self.thresholds[channel] * ln(t)
    }

    /// Lowest-index channel needing exploration at slot `t`.
    pub fn next_exploration(&self, t: u64) -> Option<usize> {
        if !self.is_initialized() {
            return None;
        }
        let log_t = ln(t);
        // samples < c * ln t for some channel requires ln t > min(samples / c).
        if log_t * (1.0 + 1e-9) < self.min_ratio {
            return None;
        }
        (0..self.channels.len()).find(|&s| (self.channels[s].ee_samples as f64) < self.thresholds[s] * log_t)
    }

    fn refresh(&mut self) {
        if !self.is_initialized() {
            return;
        }
        let floor = self.params.sample_floor();
        let rows = self.row_coefficients();
        self.thresholds = (0..self.channels.len())
            .map(|s| rows[s].max(self.estimated_column_coefficient(s)).max(floor))
            .collect();
        self.min_ratio = self
            .channels
            .iter()
            .zip(&self.thresholds)
            .map(|(c, th)| c.ee_samples as f64 / th)
            .fold(f64::INFINITY, f64::min);
    }

    /// Enters an exploration phase on `channel`, starting with recovery.
    pub fn begin_exploration(&mut self, channel: usize) -> Result<(), AgentError> {
        self.check_channel(channel)?;
        if !self.is_initialized() {
            return Err(AgentError::NotInitialized(channel));
        }
        match self.phase {
            Phase::AwaitInterrupt | Phase::Exploit { .. } => {
                self.phase = Phase::Explore {
                    channel,
                    stage: ExploreStage::Recovery { slots: 0 },
                };
                Ok(())
            }
            found => Err(AgentError::WrongPhase {
                expected: "AwaitInterrupt or Exploit",
                found,
            }),
        }
    }

    /// One recovery slot. Returns `true` when the observed state equals the
    /// anchor; that observation is counted and estimation starts.
    pub fn run_recovery_step(&mut self, state: usize, rate: f64) -> Result<bool, AgentError> {
        let (channel, slots) = match self.phase {
            Phase::Explore {
                channel,
                stage: ExploreStage::Recovery { slots },
            } => (channel, slots),
            found => {
                return Err(AgentError::WrongPhase {
                    expected: "Explore/Recovery",
                    found,
                })
            }
        };
        let stats = &mut self.channels[channel];
        if stats.anchor == Some(state) {
            stats.record(rate);
            self.phase = Phase::Explore {
                channel,
                stage: ExploreStage::Estimation {
                    remaining: stats.estimation_length(),
                },
            };
            return Ok(true);
        }
        let slots = slots + 1;
        if let Some(cap) = self.params.recovery_cap {
            if slots >= cap {
                return Err(AgentError::RecoveryTimeout { channel, slots });
            }
        }
        self.phase = Phase::Explore {
            channel,
            stage: ExploreStage::Recovery { slots },
        };
        Ok(false)
    }

    /// One estimation slot. Returns `true` when the epoch completes, at which
    /// point the epoch counter advances, the anchor moves to `state`, and the
    /// agent goes back to waiting.
    pub fn run_estimation_step(&mut self, state: usize, rate: f64) -> Result<bool, AgentError> {
        let (channel, remaining) = match self.phase {
            Phase::Explore {
                channel,
                stage: ExploreStage::Estimation { remaining },
            } => (channel, remaining),
            found => {
                return Err(AgentError::WrongPhase {
                    expected: "Explore/Estimation",
                    found,
                })
            }
        };
        let stats = &mut self.channels[channel];
        stats.record(rate);
        if remaining > 1 {
            self.phase = Phase::Explore {
                channel,
                stage: ExploreStage::Estimation {
                    remaining: remaining - 1,
                },
            };
            return Ok(false);
        }
        stats.epoch_count += 1;
        stats.anchor = Some(state);
        self.phase = Phase::AwaitInterrupt;
        self.refresh();
        Ok(true)
    }

    /// Remembers that `neighbor`, announcing `estimate`, contended for
    /// `channel`. Later announcements overwrite earlier ones.
    pub fn record_collision(
        &mut self,
        channel: usize,
        neighbor: usize,
        estimate: f64,
    ) -> Result<(), AgentError> {
        self.check_channel(channel)?;
        if !self.neighbors.contains(&neighbor) {
            return Err(AgentError::NotANeighbor {
                cell: self.cell,
                neighbor,
            });
        }
        self.registry[channel].insert(neighbor, estimate);
        self.refresh();
        Ok(())
    }

    /// Starts an allocation phase with every channel available.
    pub fn begin_allocation(&mut self) -> Result<(), AgentError> {
        if self.phase != Phase::AwaitInterrupt {
            return Err(AgentError::WrongPhase {
                expected: "AwaitInterrupt",
                found: self.phase,
            });
        }
        self.phase = Phase::Allocate;
        self.bidding = Bidding {
            eliminated: vec![false; self.channels.len()],
            assigned: None,
        };
        Ok(())
    }

    /// Best channel this unassigned cell can still try, with its estimate.
    pub fn allocation_bid(&self) -> Option<(usize, f64)> {
        if self.phase != Phase::Allocate || self.bidding.assigned.is_some() {
            return None;
        }
        (0..self.channels.len())
            .filter(|&s| !self.bidding.eliminated[s])
            .map(|s| (s, self.estimate(s)))
            .fold(None, |best: Option<(usize, f64)>, (s, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((s, v)),
            })
    }

    /// Whether the cell still lacks a channel in the running allocation.
    pub fn is_bidding(&self) -> bool {
        self.phase == Phase::Allocate && self.bidding.assigned.is_none()
    }

    pub fn allocated_channel(&self) -> Option<usize> {
        self.bidding.assigned
    }

    /// Result of an attempt on `channel`: `blockers` are the assigned
    /// neighbors sensed there, with their announced estimates. With no
    /// blockers the cell takes the channel; otherwise it drops the channel
    /// from its candidates and registers every blocker.
    pub fn on_attempt(&mut self, channel: usize, blockers: &[(usize, f64)]) -> Result<bool, AgentError> {
        self.check_channel(channel)?;
        if !self.is_bidding() {
            return Err(AgentError::WrongPhase {
                expected: "Allocate (unassigned)",
                found: self.phase,
            });
        }
        if blockers.is_empty() {
            self.bidding.assigned = Some(channel);
            return Ok(true);
        }
        self.bidding.eliminated[channel] = true;
        for &(q, estimate) in blockers {
            self.record_collision(channel, q, estimate)?;
        }
        Ok(false)
    }

    /// Closes the allocation phase and starts exploiting the assigned
    /// channel.
    pub fn begin_exploitation(&mut self) -> Result<usize, AgentError> {
        match (self.phase, self.bidding.assigned) {
            (Phase::Allocate, Some(channel)) => {
                self.assignment = Some(channel);
                self.phase = Phase::Exploit { channel };
                Ok(channel)
            }
            (found, _) => Err(AgentError::WrongPhase {
                expected: "Allocate (assigned)",
                found,
            }),
        }
    }

    /// Length of the upcoming exploitation phase, `2 * 4^(completed)`.
    pub fn exploitation_length(&self) -> u64 {
        2 * 4u64.saturating_pow(self.exploitation_count)
    }

    pub fn complete_exploitation(&mut self) {
        self.exploitation_count += 1;
    }

    /// Leaves an interrupted or completed exploitation phase.
    pub fn stop_exploiting(&mut self) {
        if let Phase::Exploit { .. } = self.phase {
            self.phase = Phase::AwaitInterrupt;
        }
    }
}

fn ln(t: u64) -> f64 {
    if t == 0 {
        0.0
    } else {
        (t as f64).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(kappa: f64) -> AgentParams {
        AgentParams {
            kappa,
            concentration_rate: 0.5,
            epsilon: 0.0,
            gap_floor: 1e-6,
            recovery_cap: None,
        }
    }

    fn initialized(estimates: &[f64], degree: usize, kappa: f64) -> AgentState {
        let neighbors = (100..100 + degree).collect();
        let mut a = AgentState::new(0, estimates.len(), neighbors, params(kappa)).unwrap();
        for (s, &r) in estimates.iter().enumerate() {
            a.init_sample(s, 0, r).unwrap();
        }
        a
    }

    #[test]
    fn init_sample_bookkeeping() {
        let mut a = AgentState::new(0, 3, vec![], params(1.0)).unwrap();
        a.init_sample(2, 4, 35.0).unwrap();
        let st = a.stats(2);
        assert_eq!(st.ee_samples, 1);
        assert_eq!(st.estimate, 35.0);
        assert_eq!(st.epoch_count, 2);
        assert_eq!(st.anchor, Some(4));
        assert_eq!(a.phase(), Phase::Init);
        assert_eq!(a.init_sample(2, 0, 1.0), Err(AgentError::DoubleInit(2)));
        a.init_sample(0, 0, 0.0).unwrap();
        assert_eq!(a.estimate(0), 0.0);
        a.init_sample(1, 0, 5.0).unwrap();
        assert_eq!(a.phase(), Phase::AwaitInterrupt);
        assert!(matches!(
            a.init_sample(1, 0, 5.0),
            Err(AgentError::WrongPhase { .. })
        ));
    }

    #[test]
    fn row_coefficients() {
        let a = initialized(&[10.0, 20.0], 0, 1.0);
        assert_eq!(a.best_channels(), vec![1]);
        assert!((a.estimated_row_coefficient(1).unwrap() - 0.04).abs() < 1e-15);
        assert!((a.estimated_row_coefficient(0).unwrap() - 0.04).abs() < 1e-15);

        let a = initialized(&[7.0, 7.0], 0, 1.0);
        assert_eq!(a.estimated_row_coefficient(0).unwrap(), 4.0 / 1e-6);

        let a = initialized(&[1.0, 2.0, 3.0], 1, 2.0);
        assert_eq!(a.best_channels(), vec![2, 1]);
        assert_eq!(a.estimated_row_coefficient(0).unwrap(), 8.0 / 1.0);
        // ch2 in the best set: nearest other estimate is 2 (gap 1).
        assert_eq!(a.estimated_row_coefficient(2).unwrap(), 8.0);

        let fresh = AgentState::new(0, 2, vec![], params(1.0)).unwrap();
        assert_eq!(
            fresh.estimated_row_coefficient(0),
            Err(AgentError::NotInitialized(0))
        );
    }

    #[test]
    fn row_coefficient_matches_brute_force() {
        let est = [12.0, 3.5, 40.0, 39.0, 18.0, 3.0];
        for degree in 0..6 {
            let a = initialized(&est, degree, 1.5);
            let best = a.best_channels();
            let cutoff = best.iter().map(|&s| est[s]).fold(f64::INFINITY, f64::min);
            for s in 0..est.len() {
                let gap = if best.contains(&s) {
                    (0..est.len())
                        .filter(|&p| p != s)
                        .map(|p| (est[s] - est[p]).powi(2))
                        .fold(f64::INFINITY, f64::min)
                } else {
                    (est[s] - cutoff).powi(2)
                };
                let expected = 6.0 / gap.max(1e-6);
                assert!((a.estimated_row_coefficient(s).unwrap() - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn epsilon_slack_activates_floor() {
        let mut p = params(1.0);
        p.epsilon = 150.0;
        let mut a = AgentState::new(0, 2, vec![], p).unwrap();
        a.init_sample(0, 0, 10.0).unwrap();
        a.init_sample(1, 0, 20.0).unwrap();
        assert_eq!(a.estimated_row_coefficient(0).unwrap(), 4.0 / 1e-6);
    }

    #[test]
    fn column_coefficients() {
        let mut a = AgentState::new(0, 1, vec![7, 8], params(1.0)).unwrap();
        a.init_sample(0, 0, 60.0).unwrap();
        assert_eq!(a.estimated_column_coefficient(0), 0.0);
        a.record_collision(0, 7, 50.0).unwrap();
        assert!((a.estimated_column_coefficient(0) - 0.04).abs() < 1e-15);
        a.record_collision(0, 8, 59.0).unwrap();
        assert!((a.estimated_column_coefficient(0) - 4.0).abs() < 1e-12);
        // Latest announcement wins.
        a.record_collision(0, 8, 40.0).unwrap();
        assert_eq!(a.registry(0).get(&8), Some(&40.0));
        assert!((a.estimated_column_coefficient(0) - 0.04).abs() < 1e-15);
        assert_eq!(
            a.record_collision(0, 3, 1.0),
            Err(AgentError::NotANeighbor {
                cell: 0,
                neighbor: 3
            })
        );
    }

    #[test]
    fn exploration_condition() {
        let a = initialized(&[10.0, 20.0], 0, 1.0);
        // 2/I = 4 dominates 0.04.
        assert!(!a.exploration_needed(0, 1));
        assert_eq!(a.next_exploration(1), None);
        let th = a.exploration_threshold(0, 3).unwrap();
        assert!((th - 4.0 * 3f64.ln()).abs() < 1e-12);
        assert!(a.exploration_needed(0, 3));
        assert_eq!(a.next_exploration(3), Some(0));
        // 1 < 4 ln t holds from t = 2 on.
        assert!(a.exploration_needed(1, 2));
    }

    #[test]
    fn exploration_condition_full_case() {
        // Concentration constant from kappa = 181.44, epsilon = 1,
        // per-chain rate sum 1: I = 7 / (48 * 9 * 181.44).
        let kappa = 181.44;
        let i = 7.0 / (48.0 * 9.0 * kappa);
        let p = AgentParams {
            kappa,
            concentration_rate: i,
            epsilon: 0.0,
            gap_floor: 1e-6,
            recovery_cap: None,
        };
        let mut a = AgentState::new(0, 2, vec![], p).unwrap();
        a.init_sample(0, 0, 0.25).unwrap();
        a.init_sample(1, 0, 0.75).unwrap();
        // Row coefficient 4 * 181.44 / 0.25 = 2903.04 < 2 / I = 22394.88...
        let floor = 2.0 / i;
        assert!((floor - 2.0 * 48.0 * 9.0 * kappa / 7.0).abs() < 1e-6);
        assert!((a.exploration_coefficient(0).unwrap() - 2903.04).abs() < 1e-9);
        let t = 1000;
        let expected = floor * (t as f64).ln();
        assert!((a.exploration_threshold(0, t).unwrap() - expected).abs() < 1e-6);
        assert!(a.exploration_needed(0, t));
    }

    #[test]
    fn recovery_and_estimation() {
        let mut a = initialized(&[5.0], 0, 1.0);
        a.init_sample(0, 0, 0.0).unwrap_err();
        assert_eq!(a.stats(0).anchor, Some(0));
        a.begin_exploration(0).unwrap();
        // Wrong-state observations are not counted.
        assert!(!a.run_recovery_step(4, 100.0).unwrap());
        assert_eq!(a.stats(0).ee_samples, 1);
        assert!(a.run_recovery_step(0, 7.0).unwrap());
        assert_eq!(a.stats(0).ee_samples, 2);
        assert!(matches!(
            a.run_recovery_step(0, 7.0),
            Err(AgentError::WrongPhase { .. })
        ));
        // N = 2: estimation epoch of 4 slots.
        for i in 0..4 {
            let done = a.run_estimation_step(3, 7.0).unwrap();
            assert_eq!(done, i == 3);
        }
        let st = a.stats(0);
        assert_eq!(st.ee_samples, 6);
        assert_eq!(st.epoch_count, 3);
        assert_eq!(st.anchor, Some(3));
        assert!((st.estimate - (5.0 + 5.0 * 7.0) / 6.0).abs() < 1e-12);
        assert_eq!(a.phase(), Phase::AwaitInterrupt);
    }

    #[test]
    fn recovery_cap() {
        let mut p = params(1.0);
        p.recovery_cap = Some(3);
        let mut a = AgentState::new(0, 1, vec![], p).unwrap();
        a.init_sample(0, 1, 1.0).unwrap();
        a.begin_exploration(0).unwrap();
        a.run_recovery_step(0, 0.0).unwrap();
        a.run_recovery_step(0, 0.0).unwrap();
        assert_eq!(
            a.run_recovery_step(0, 0.0),
            Err(AgentError::RecoveryTimeout {
                channel: 0,
                slots: 3
            })
        );
    }

    /// Two-state flip-with-stay chain driven deterministically: from the
    /// anchor's complement, recovery takes exactly one extra slot.
    #[test]
    fn recovery_length_on_alternating_path() {
        let mut a = AgentState::new(0, 1, vec![], params(1.0)).unwrap();
        a.init_sample(0, 0, 1.0).unwrap();
        a.begin_exploration(0).unwrap();
        let path = [1usize, 0, 1, 0];
        let mut slots = 0;
        for &s in &path {
            slots += 1;
            if a.run_recovery_step(s, s as f64).unwrap() {
                break;
            }
        }
        assert_eq!(slots, 2);
    }

    #[test]
    fn sample_counts_after_epochs() {
        let mut a = AgentState::new(0, 1, vec![], params(1.0)).unwrap();
        a.init_sample(0, 0, 2.0).unwrap();
        let mut expected = 1u64;
        for k in 1..=5u32 {
            a.begin_exploration(0).unwrap();
            assert!(a.run_recovery_step(0, 2.0).unwrap());
            while !a.run_estimation_step(0, 2.0).unwrap() {}
            expected += 1 + 4u64.pow(k);
            assert_eq!(a.stats(0).ee_samples, expected);
            assert_eq!(a.estimate(0), 2.0);
        }
    }

    #[test]
    fn allocation_side() {
        let mut a = AgentState::new(0, 3, vec![1, 2], params(1.0)).unwrap();
        for (s, r) in [30.0, 50.0, 40.0].into_iter().enumerate() {
            a.init_sample(s, 0, r).unwrap();
        }
        a.begin_allocation().unwrap();
        assert_eq!(a.allocation_bid(), Some((1, 50.0)));
        assert!(!a.on_attempt(1, &[(2, 60.0)]).unwrap());
        assert_eq!(a.registry(1).get(&2), Some(&60.0));
        assert_eq!(a.allocation_bid(), Some((2, 40.0)));
        assert!(a.on_attempt(2, &[]).unwrap());
        assert_eq!(a.allocation_bid(), None);
        assert_eq!(a.begin_exploitation().unwrap(), 2);
        assert_eq!(a.phase(), Phase::Exploit { channel: 2 });
        assert_eq!(a.exploitation_length(), 2);
        a.complete_exploitation();
        assert_eq!(a.exploitation_length(), 8);
    }

    proptest! {
        #[test]
        fn estimate_consistency(ops in proptest::collection::vec((0usize..3, 0usize..4, 0.0f64..100.0), 1..200)) {
            let mut a = AgentState::new(0, 3, vec![], params(1.0)).unwrap();
            for s in 0..3 {
                a.init_sample(s, s, 10.0 * s as f64).unwrap();
            }
            let mut prev = [1u64; 3];
            for (ch, state, rate) in ops {
                match a.phase() {
                    Phase::AwaitInterrupt => a.begin_exploration(ch).unwrap(),
                    Phase::Explore { stage: ExploreStage::Recovery { .. }, .. } => {
                        a.run_recovery_step(state, rate).unwrap();
                    }
                    Phase::Explore { .. } => {
                        a.run_estimation_step(state, rate).unwrap();
                    }
                    _ => unreachable!(),
                }
                for s in 0..3 {
                    let st = a.stats(s);
                    prop_assert!(st.ee_samples >= prev[s]);
                    prev[s] = st.ee_samples;
                    prop_assert!((st.estimate * st.ee_samples as f64 - st.ee_sum).abs() <= 1e-9 * st.ee_sum.max(1.0));
                }
            }
        }
    }
}
