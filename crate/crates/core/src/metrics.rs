//! Regret traces, system constants and the analytical regret bound.

use std::io::{self, Write};

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::channel::{ChannelError, ChannelMatrix, ChannelModel};
use crate::engine::{OutcomeSink, SlotOutcome};
use crate::matching::{Allocation, RateMatrix};
use crate::topology::InterferenceGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("epsilon must be positive, got {0}")]
    EpsilonNonpositive(f64),
    #[error("eigenvalues of chain ({cell}, {channel}) could not be computed")]
    EigensolverFailure { cell: usize, channel: usize },
    #[error("mean gaps are degenerate: {0}")]
    DegenerateGaps(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("bound needs t >= 2, got {0}")]
    TimeTooSmall(u64),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// `28 C^2 R^2 pi^2 / lambda_bar`.
pub fn kappa_from(c_max: f64, rate_sum_max: f64, pi_hat_max: f64, lambda_bar_min: f64) -> f64 {
    28.0 * c_max.powi(2) * rate_sum_max.powi(2) * pi_hat_max.powi(2) / lambda_bar_min
}

/// `7 eps^2 / (48 (R + 2)^2 kappa)`.
pub fn concentration_rate_from(epsilon: f64, rate_sum_max: f64, kappa: f64) -> f64 {
    7.0 * epsilon.powi(2) / (48.0 * (rate_sum_max + 2.0).powi(2) * kappa)
}

/// Second largest eigenvalue modulus of a transition matrix (0 for a
/// single state).
pub fn second_eigenvalue_modulus(transition: &[Vec<f64>]) -> Option<f64> {
    let n = transition.len();
    if n < 2 {
        return Some(0.0);
    }
    let m = DMatrix::from_fn(n, n, |i, j| transition[i][j]);
    let mut moduli: Vec<f64> = m.complex_eigenvalues().iter().map(|c| c.norm()).collect();
    if moduli.iter().any(|v| !v.is_finite()) {
        return None;
    }
    moduli.sort_by(|a, b| b.total_cmp(a));
    Some(moduli[1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairConstants {
    pub cell: usize,
    pub channel: usize,
    pub states: usize,
    pub mean: f64,
    pub pi_min: f64,
    pub lambda: f64,
    pub lambda_bar: f64,
    /// Largest mean hitting time between distinct states.
    pub hitting_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemConstants {
    pub pi_min: f64,
    pub pi_hat_max: f64,
    pub r_max: f64,
    /// Largest per-chain sum of state rates.
    pub rate_sum_max: f64,
    pub q_max: f64,
    pub c_max: usize,
    pub lambda_max: f64,
    pub lambda_bar_min: f64,
    pub kappa: f64,
    pub concentration_rate: f64,
    pub epsilon: f64,
    /// How the per-chain eigenvalue is taken.
    pub eigenvalue_convention: &'static str,
    pub pairs: Vec<PairConstants>,
}

impl SystemConstants {
    pub fn pair(&self, cell: usize, channel: usize, channels: usize) -> &PairConstants {
        &self.pairs[cell * channels + channel]
    }
}

fn pair_constants(cell: usize, channel: usize, model: &ChannelModel) -> Result<PairConstants, MetricsError> {
    let lambda = second_eigenvalue_modulus(model.transition())
        .ok_or(MetricsError::EigensolverFailure { cell, channel })?;
    Ok(PairConstants {
        cell,
        channel,
        states: model.state_count(),
        mean: model.mean_rate(),
        pi_min: model.stationary().iter().copied().fold(f64::INFINITY, f64::min),
        lambda,
        lambda_bar: 1.0 - lambda,
        hitting_max: model.mean_hitting_times()?.max,
    })
}

pub fn compute_constants(channels: &ChannelMatrix, epsilon: f64) -> Result<SystemConstants, MetricsError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(MetricsError::EpsilonNonpositive(epsilon));
    }
    let mut pairs = Vec::with_capacity(channels.models().len());
    let mut pi_hat_max = 0.0f64;
    let mut r_max = 0.0f64;
    let mut rate_sum_max = 0.0f64;
    let mut q_max = 0.0f64;
    let mut c_max = 0;
    for l in 0..channels.cells() {
        for s in 0..channels.channels() {
            let model = channels.get(l, s);
            let pair = pair_constants(l, s, model)?;
            let rate_sum: f64 = model.rates().iter().sum();
            for &p in model.stationary() {
                pi_hat_max = pi_hat_max.max(p.max(1.0 - p));
            }
            r_max = model.rates().iter().copied().fold(r_max, f64::max);
            rate_sum_max = rate_sum_max.max(rate_sum);
            q_max = q_max.max(rate_sum / pair.pi_min);
            c_max = c_max.max(model.state_count());
            pairs.push(pair);
        }
    }
    let pi_min = pairs.iter().map(|p| p.pi_min).fold(f64::INFINITY, f64::min);
    let lambda_max = pairs.iter().map(|p| p.lambda).fold(0.0, f64::max);
    let lambda_bar_min = 1.0 - lambda_max;
    let kappa = kappa_from(c_max as f64, rate_sum_max, pi_hat_max, lambda_bar_min);
    Ok(SystemConstants {
        pi_min,
        pi_hat_max,
        r_max,
        rate_sum_max,
        q_max,
        c_max,
        lambda_max,
        lambda_bar_min,
        kappa,
        concentration_rate: concentration_rate_from(epsilon, rate_sum_max, kappa),
        epsilon,
        eigenvalue_convention: "second largest eigenvalue modulus of P",
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceSample {
    pub t: u64,
    pub cumulative_realized: f64,
}

/// Cumulative realized sum rate sampled over time; regret is derived as
/// `t * oracle_value - cumulative_realized`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretTrace {
    pub replication: u64,
    pub oracle_value: f64,
    /// Always starts with `t = 0`.
    pub samples: Vec<TraceSample>,
}

impl RegretTrace {
    pub fn regret(&self, sample: &TraceSample) -> f64 {
        sample.t as f64 * self.oracle_value - sample.cumulative_realized
    }

    pub fn regrets(&self) -> Vec<(u64, f64)> {
        self.samples.iter().map(|s| (s.t, self.regret(s))).collect()
    }

    pub fn final_regret(&self) -> f64 {
        self.regret(self.samples.last().expect("trace has t = 0"))
    }
}

/// Streaming sink keeping every `stride`-th slot and the last one.
#[derive(Debug, Clone)]
pub struct RegretRecorder {
    stride: u64,
    horizon: u64,
    running: f64,
    trace: RegretTrace,
}

impl RegretRecorder {
    pub fn new(replication: u64, oracle_value: f64, stride: u64, horizon: u64) -> Self {
        Self {
            stride: stride.max(1),
            horizon,
            running: 0.0,
            trace: RegretTrace {
                replication,
                oracle_value,
                samples: vec![TraceSample {
                    t: 0,
                    cumulative_realized: 0.0,
                }],
            },
        }
    }

    pub fn into_trace(self) -> RegretTrace {
        self.trace
    }
}

impl OutcomeSink for RegretRecorder {
    fn record(&mut self, outcome: &SlotOutcome) {
        self.running += outcome.sum_realized();
        if outcome.t.is_multiple_of(self.stride) || outcome.t == self.horizon {
            self.trace.samples.push(TraceSample {
                t: outcome.t,
                cumulative_realized: self.running,
            });
        }
    }
}

/// Per-slot regret trace from a complete outcome stream.
pub fn regret_from_outcomes<'a>(
    outcomes: impl IntoIterator<Item = &'a SlotOutcome>,
    oracle: &Allocation,
    means: &RateMatrix,
) -> Result<RegretTrace, MetricsError> {
    if oracle.len() != means.cells() {
        return Err(MetricsError::LengthMismatch {
            expected: means.cells(),
            actual: oracle.len(),
        });
    }
    let mut recorder = RegretRecorder::new(0, oracle.value(means), 1, u64::MAX);
    for (i, outcome) in outcomes.into_iter().enumerate() {
        if outcome.cells.len() != means.cells() {
            return Err(MetricsError::LengthMismatch {
                expected: means.cells(),
                actual: outcome.cells.len(),
            });
        }
        if outcome.t != i as u64 + 1 {
            return Err(MetricsError::LengthMismatch {
                expected: i + 1,
                actual: outcome.t as usize,
            });
        }
        recorder.record(outcome);
    }
    Ok(recorder.into_trace())
}

/// One row of the aggregated output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateRow {
    pub t: u64,
    pub mean_regret: f64,
    /// Standard error of the mean regret across replications.
    pub stderr: f64,
    /// Mean sum rate over the window since the previous sample.
    pub mean_sum_rate: f64,
    pub bound: Option<f64>,
}

/// Averages traces sampled at identical slots, in the given order.
pub fn aggregate(traces: &[RegretTrace]) -> Result<Vec<AggregateRow>, MetricsError> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    for trace in traces {
        if trace.samples.len() != first.samples.len()
            || trace.samples.iter().zip(&first.samples).any(|(a, b)| a.t != b.t)
        {
            return Err(MetricsError::LengthMismatch {
                expected: first.samples.len(),
                actual: trace.samples.len(),
            });
        }
    }
    let n = traces.len() as f64;
    let rows = (0..first.samples.len())
        .map(|i| {
            let t = first.samples[i].t;
            let regrets: Vec<f64> = traces.iter().map(|tr| tr.regret(&tr.samples[i])).collect();
            let mean = regrets.iter().sum::<f64>() / n;
            let stderr = if traces.len() > 1 {
                let var = regrets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            let mean_sum_rate = if i == 0 {
                0.0
            } else {
                let dt = (t - first.samples[i - 1].t) as f64;
                traces
                    .iter()
                    .map(|tr| (tr.samples[i].cumulative_realized - tr.samples[i - 1].cumulative_realized) / dt)
                    .sum::<f64>()
                    / n
            };
            AggregateRow {
                t,
                mean_regret: mean,
                stderr,
                mean_sum_rate,
                bound: None,
            }
        })
        .collect();
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[AggregateRow], mut out: W) -> io::Result<()> {
    writeln!(out, "t,mean_regret,stderr,mean_sum_rate,bound")?;
    for row in rows {
        let bound = row.bound.map(|b| b.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            row.t, row.mean_regret, row.stderr, row.mean_sum_rate, bound
        )?;
    }
    Ok(())
}

/// Collision registries for the bound: `registries[cell * S + channel]`
/// lists the neighbors seen on that channel.
pub type Registries = Vec<Vec<usize>>;

/// Every neighbor registered on every channel.
pub fn worst_case_registries(graph: &InterferenceGraph, channels: usize) -> Registries {
    (0..graph.cell_count())
        .flat_map(|l| (0..channels).map(move |_| graph.neighbors(l).to_vec()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExplorationCoefficients {
    pub row: f64,
    pub column: f64,
    pub combined: f64,
}

/// Indices of the `count` largest entries of `row`, ties to the lower index.
fn top_channels(row: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

fn min_row_gap(row: &[f64], s: usize) -> f64 {
    (0..row.len())
        .filter(|&p| p != s)
        .map(|p| (row[s] - row[p]).powi(2))
        .fold(f64::INFINITY, f64::min)
}

fn min_column_gap(means: &RateMatrix, cell: usize, channel: usize, registry: &[usize]) -> f64 {
    registry
        .iter()
        .map(|&q| (means.get(cell, channel) - means.get(q, channel)).powi(2))
        .fold(f64::INFINITY, f64::min)
}

/// Coefficients from the true means. The column term is 0 when the
/// registry is empty.
pub fn true_exploration_coefficients(
    means: &RateMatrix,
    graph: &InterferenceGraph,
    registries: &Registries,
    kappa: f64,
) -> Result<Vec<ExplorationCoefficients>, MetricsError> {
    let channels = means.channels();
    if registries.len() != means.cells() * channels {
        return Err(MetricsError::LengthMismatch {
            expected: means.cells() * channels,
            actual: registries.len(),
        });
    }
    let mut out = Vec::with_capacity(registries.len());
    for l in 0..means.cells() {
        let row = means.row(l);
        let best = top_channels(row, graph.degree(l) + 1);
        let cutoff = best.iter().map(|&p| row[p]).fold(f64::INFINITY, f64::min);
        for s in 0..channels {
            let row_gap = if best.contains(&s) {
                min_row_gap(row, s)
            } else {
                (row[s] - cutoff).powi(2)
            };
            let column_gap = min_column_gap(means, l, s, &registries[l * channels + s]);
            if row_gap == 0.0 || column_gap == 0.0 {
                return Err(MetricsError::DegenerateGaps(format!(
                    "cell {l} channel {s} has an equal competing mean"
                )));
            }
            let row = if row_gap.is_finite() { 4.0 * kappa / row_gap } else { 0.0 };
            let column = if column_gap.is_finite() { 4.0 * kappa / column_gap } else { 0.0 };
            out.push(ExplorationCoefficients {
                row,
                column,
                combined: row.max(column),
            });
        }
    }
    Ok(out)
}

/// Smallest separation between means: over all channel pairs of a cell and
/// all registered neighbor pairs on a channel. `None` when nothing is
/// compared.
pub fn min_gap(means: &RateMatrix, registries: &Registries) -> Option<f64> {
    let channels = means.channels();
    let mut gap = f64::INFINITY;
    for l in 0..means.cells() {
        let row = means.row(l);
        for s in 0..channels {
            for p in s + 1..channels {
                gap = gap.min((row[s] - row[p]).abs());
            }
            for &q in &registries[l * channels + s] {
                gap = gap.min((row[s] - means.get(q, s)).abs());
            }
        }
    }
    gap.is_finite().then_some(gap)
}

/// The five terms of the regret bound at one `t`; the constant term is
/// not included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundTerms {
    pub exploration_transient: f64,
    pub exploration_suboptimality: f64,
    pub allocation_transient: f64,
    pub allocation_suboptimality: f64,
    pub exploitation: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.exploration_transient
            + self.exploration_suboptimality
            + self.allocation_transient
            + self.allocation_suboptimality
            + self.exploitation
    }
}

/// Inputs of the regret bound that do not depend on `t`.
#[derive(Debug, Clone)]
pub struct RegretBound {
    cells: usize,
    channels: usize,
    q_max: f64,
    c_max: f64,
    pi_min: f64,
    max_degree: usize,
    oracle_value: f64,
    /// Per pair: the effective exploration coefficient.
    effective: Vec<f64>,
    hitting_max: Vec<f64>,
    /// Per pair: `mu(l, P(l)) + sum of neighbors holding s - mu(l, s)`.
    suboptimality: Vec<f64>,
}

impl RegretBound {
    /// `kappa` and `concentration_rate` are the values the agents run with;
    /// `epsilon` is the analysis slack.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        constants: &SystemConstants,
        means: &RateMatrix,
        graph: &InterferenceGraph,
        oracle: &Allocation,
        registries: &Registries,
        kappa: f64,
        concentration_rate: f64,
        epsilon: f64,
    ) -> Result<Self, MetricsError> {
        let cells = means.cells();
        let channels = means.channels();
        if registries.len() != cells * channels || oracle.len() != cells || constants.pairs.len() != cells * channels {
            return Err(MetricsError::LengthMismatch {
                expected: cells * channels,
                actual: registries.len(),
            });
        }
        let delta = min_gap(means, registries);
        if delta == Some(0.0) {
            return Err(MetricsError::DegenerateGaps("two compared means are equal".into()));
        }
        let delta_sq = delta.map_or(f64::INFINITY, |d| d * d);
        let floor = 2.0 / concentration_rate;
        let fallback = 4.0 * kappa / delta_sq;

        let mut effective = Vec::with_capacity(cells * channels);
        let mut suboptimality = Vec::with_capacity(cells * channels);
        for l in 0..cells {
            let row = means.row(l);
            let best = top_channels(row, graph.degree(l) + 1);
            let own = means.get(l, oracle.channel_of(l));
            for s in 0..channels {
                let row_gap = min_row_gap(row, s);
                let column_gap = min_column_gap(means, l, s, &registries[l * channels + s]);
                let joint = row_gap.min(column_gap);
                let in_a = if best.contains(&s) {
                    joint - 2.0 * epsilon > delta_sq
                } else {
                    row_gap - 2.0 * epsilon > delta_sq
                };
                let e = if in_a {
                    let denom = joint - 2.0 * epsilon;
                    let e_max = if denom.is_infinite() {
                        0.0
                    } else if denom > 0.0 {
                        4.0 * kappa / denom
                    } else {
                        fallback
                    };
                    floor.max(e_max)
                } else {
                    floor.max(fallback)
                };
                effective.push(e);

                let holders: f64 = graph
                    .neighbors(l)
                    .iter()
                    .filter(|&&q| oracle.channel_of(q) == s)
                    .map(|&q| means.get(q, s))
                    .sum();
                suboptimality.push(own + holders - means.get(l, s));
            }
        }
        Ok(Self {
            cells,
            channels,
            q_max: constants.q_max,
            c_max: constants.c_max as f64,
            pi_min: constants.pi_min,
            max_degree: graph.max_degree(),
            oracle_value: oracle.value(means),
            effective,
            hitting_max: constants.pairs.iter().map(|p| p.hitting_max).collect(),
            suboptimality,
        })
    }

    pub fn effective_coefficients(&self) -> &[f64] {
        &self.effective
    }

    pub fn evaluate(&self, t: u64) -> Result<BoundTerms, MetricsError> {
        if t < 2 {
            return Err(MetricsError::TimeTooSmall(t));
        }
        let log_t = (t as f64).ln();
        let ls = (self.cells * self.channels) as f64;
        // Number of exploration epochs needed per pair.
        let epochs: Vec<f64> = self
            .effective
            .iter()
            .map(|e| ((3.0 * e * log_t + 1.0).log(4.0)).floor() + 1.0)
            .collect();
        let epoch_sum: f64 = epochs.iter().sum();

        let exploration_transient = self.q_max * epoch_sum;
        let exploration_suboptimality = (0..self.effective.len())
            .map(|i| {
                (4.0 * self.effective[i] * log_t + 1.0 + self.hitting_max[i] * epochs[i])
                    * self.suboptimality[i]
            })
            .sum();
        let allocation_transient = 2.0 * ls * self.q_max * epoch_sum;
        let allocation_suboptimality = 2.0 * ls * epoch_sum * self.oracle_value;
        let phases = (1.5 * t as f64 + 1.0).log(4.0).ceil();
        let exploitation = (self.cells as f64 * self.q_max
            + (ls * self.max_degree as f64 + ls) * 4.0 * self.c_max / self.pi_min * self.oracle_value)
            * phases;
        Ok(BoundTerms {
            exploration_transient,
            exploration_suboptimality,
            allocation_transient,
            allocation_suboptimality,
            exploitation,
        })
    }
}
