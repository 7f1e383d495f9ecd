//! Building channel matrices and graphs from instance specs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::InstanceSpec;
use smile_core::channel::{gilbert_elliott, rayleigh6_scaled, ChannelError, ChannelModel};
use smile_core::topology::TopologyError;
use smile_core::{ChannelMatrix, InterferenceGraph, RateMatrix};

const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("unknown instance kind {0:?}")]
    UnknownKind(String),
    #[error("instance kind {kind} needs field {field}")]
    MissingField { kind: String, field: &'static str },
    #[error("degenerate parameters: {0}")]
    DegenerateParams(String),
    #[error("bad shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub channels: ChannelMatrix,
    pub graph: InterferenceGraph,
    pub means: RateMatrix,
    pub warnings: Vec<String>,
}

impl Instance {
    fn new(channels: ChannelMatrix, graph: InterferenceGraph) -> Result<Self, InstanceError> {
        if channels.cells() != graph.cell_count() {
            return Err(InstanceError::Shape(format!(
                "{} cells of channels but {} in the graph",
                channels.cells(),
                graph.cell_count()
            )));
        }
        let mut warnings = Vec::new();
        let crowded = graph.crowded_cells(channels.channels());
        if !crowded.is_empty() {
            let cells: Vec<String> = crowded.iter().map(|c| (c + 1).to_string()).collect();
            warnings.push(format!(
                "cells {} have at least as many neighbors as channels; allocation may deadlock",
                cells.join(", ")
            ));
        }
        let means = channels.mean_rates();
        Ok(Self {
            channels,
            graph,
            means,
            warnings,
        })
    }
}

fn missing(kind: &str, field: &'static str) -> InstanceError {
    InstanceError::MissingField {
        kind: kind.to_string(),
        field,
    }
}

fn shape_of(matrix: &[Vec<f64>]) -> Result<(usize, usize), InstanceError> {
    let cells = matrix.len();
    let channels = matrix.first().map_or(0, Vec::len);
    if cells == 0 || channels == 0 || matrix.iter().any(|r| r.len() != channels) {
        return Err(InstanceError::Shape("matrix must be non-empty and rectangular".into()));
    }
    Ok((cells, channels))
}

/// Converts 1-based edge pairs.
fn graph_from_edges(cells: usize, edges: &[[usize; 2]]) -> Result<InterferenceGraph, InstanceError> {
    let mut zero_based = Vec::with_capacity(edges.len());
    for &[a, b] in edges {
        if a == 0 || b == 0 {
            return Err(InstanceError::Shape("edge endpoints are 1-based".into()));
        }
        zero_based.push((a - 1, b - 1));
    }
    Ok(InterferenceGraph::new(cells, zero_based)?)
}

fn build_graph(
    spec: &InstanceSpec,
    cells: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InterferenceGraph, InstanceError> {
    match (&spec.edges, spec.edge_probability) {
        (Some(_), Some(_)) => Err(InstanceError::DegenerateParams(
            "give either edges or edge_probability, not both".into(),
        )),
        (Some(edges), None) => graph_from_edges(cells, edges),
        (None, Some(p)) if (0.0..=1.0).contains(&p) => Ok(InterferenceGraph::erdos_renyi(cells, p, rng)),
        (None, Some(p)) => Err(InstanceError::DegenerateParams(format!(
            "edge probability {p} outside [0, 1]"
        ))),
        (None, None) => Ok(InterferenceGraph::empty(cells)),
    }
}

/// Draws a `cells x channels` matrix from `draw`, redrawing any entry
/// closer than `min_gap` to another entry of its row or to a neighbor's
/// entry on the same channel.
fn draw_separated(
    cells: usize,
    channels: usize,
    graph: &InterferenceGraph,
    min_gap: f64,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<Vec<Vec<f64>>, InstanceError> {
    let mut values = vec![vec![f64::NAN; channels]; cells];
    for l in 0..cells {
        for s in 0..channels {
            let mut accepted = None;
            for _ in 0..MAX_DRAWS {
                let v = draw(rng);
                let row_ok = values[l][..s].iter().all(|&o| (o - v).abs() >= min_gap);
                let column_ok = graph
                    .neighbors(l)
                    .iter()
                    .filter(|&&q| q < l)
                    .all(|&q| (values[q][s] - v).abs() >= min_gap);
                if row_ok && column_ok {
                    accepted = Some(v);
                    break;
                }
            }
            values[l][s] = accepted.ok_or_else(|| {
                InstanceError::DegenerateParams(format!(
                    "could not separate means by {min_gap} after {MAX_DRAWS} draws"
                ))
            })?;
        }
    }
    Ok(values)
}

fn range_sampler(range: [f64; 2]) -> Result<impl FnMut(&mut ChaCha8Rng) -> f64, InstanceError> {
    let [lo, hi] = range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
        return Err(InstanceError::DegenerateParams(format!(
            "range [{lo}, {hi}] must satisfy 0 < lo < hi"
        )));
    }
    Ok(move |rng: &mut ChaCha8Rng| rng.random_range(lo..hi))
}

fn ge_probabilities(spec: &InstanceSpec, kind: &str) -> Result<(f64, f64), InstanceError> {
    Ok((
        spec.p_stay_good.ok_or_else(|| missing(kind, "p_stay_good"))?,
        spec.p_stay_bad.ok_or_else(|| missing(kind, "p_stay_bad"))?,
    ))
}

/// Stationary probability of the good state.
fn ge_good_share(p_stay_good: f64, p_stay_bad: f64) -> f64 {
    (1.0 - p_stay_bad) / (2.0 - p_stay_good - p_stay_bad)
}

pub fn generate_instance(spec: &InstanceSpec, default_seed: u64) -> Result<Instance, InstanceError> {
    let kind = spec.kind.as_str();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(default_seed));
    match kind {
        "explicit" => {
            let chains = spec.chains.as_ref().ok_or_else(|| missing(kind, "chains"))?;
            let cells = spec.cells.ok_or_else(|| missing(kind, "cells"))?;
            let channels = spec.channels.ok_or_else(|| missing(kind, "channels"))?;
            let mut models: Vec<Option<ChannelModel>> = vec![None; cells * channels];
            for chain in chains {
                if chain.cell == 0 || chain.cell > cells || chain.channel == 0 || chain.channel > channels {
                    return Err(InstanceError::Shape(format!(
                        "chain ({}, {}) outside {cells} x {channels}",
                        chain.cell, chain.channel
                    )));
                }
                let slot = &mut models[(chain.cell - 1) * channels + chain.channel - 1];
                if slot.is_some() {
                    return Err(InstanceError::Shape(format!(
                        "chain ({}, {}) given twice",
                        chain.cell, chain.channel
                    )));
                }
                *slot = Some(ChannelModel::new(chain.rates.clone(), chain.transition.clone())?);
            }
            let models = models
                .into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| InstanceError::Shape("every (cell, channel) needs a chain".into()))?;
            let graph = build_graph(spec, cells, &mut rng)?;
            Instance::new(ChannelMatrix::new(cells, channels, models)?, graph)
        }
        "paper_rayleigh6_scaled" => {
            let means = spec.means.as_ref().ok_or_else(|| missing(kind, "means"))?;
            let (cells, channels) = shape_of(means)?;
            let graph = build_graph(spec, cells, &mut rng)?;
            let matrix = ChannelMatrix::from_fn(cells, channels, |l, s| rayleigh6_scaled(means[l][s]))?;
            Instance::new(matrix, graph)
        }
        "gilbert_elliott_ensemble" => {
            let (pg, pb) = ge_probabilities(spec, kind)?;
            let (good, graph) = match (&spec.good_rates, spec.good_rate_range) {
                (Some(rates), _) => {
                    let (cells, _) = shape_of(rates)?;
                    (rates.clone(), build_graph(spec, cells, &mut rng)?)
                }
                (None, Some(range)) => {
                    let cells = spec.cells.ok_or_else(|| missing(kind, "cells"))?;
                    let channels = spec.channels.ok_or_else(|| missing(kind, "channels"))?;
                    let graph = build_graph(spec, cells, &mut rng)?;
                    // Separation is enforced on the means, which scale the
                    // good rates by the same factor.
                    let share = ge_good_share(pg, pb);
                    let gap = spec.min_gap.unwrap_or(1e-9) / share;
                    let rates = draw_separated(cells, channels, &graph, gap, &mut rng, range_sampler(range)?)?;
                    (rates, graph)
                }
                (None, None) => return Err(missing(kind, "good_rates or good_rate_range")),
            };
            let (cells, channels) = shape_of(&good)?;
            let matrix = ChannelMatrix::from_fn(cells, channels, |l, s| gilbert_elliott(pg, pb, good[l][s]))?;
            Instance::new(matrix, graph)
        }
        "random" => {
            let cells = spec.cells.ok_or_else(|| missing(kind, "cells"))?;
            let channels = spec.channels.ok_or_else(|| missing(kind, "channels"))?;
            let range = spec.mean_range.ok_or_else(|| missing(kind, "mean_range"))?;
            if cells == 0 || channels == 0 {
                return Err(InstanceError::DegenerateParams("cells and channels must be positive".into()));
            }
            let graph = build_graph(spec, cells, &mut rng)?;
            let min_gap = spec.min_gap.unwrap_or(1e-9);
            let means = draw_separated(cells, channels, &graph, min_gap, &mut rng, range_sampler(range)?)?;
            let matrix = match spec.chain.as_deref().unwrap_or("rayleigh6") {
                "rayleigh6" => ChannelMatrix::from_fn(cells, channels, |l, s| rayleigh6_scaled(means[l][s]))?,
                "gilbert_elliott" => {
                    let (pg, pb) = ge_probabilities(spec, kind)?;
                    let share = ge_good_share(pg, pb);
                    ChannelMatrix::from_fn(cells, channels, |l, s| gilbert_elliott(pg, pb, means[l][s] / share))?
                }
                other => {
                    return Err(InstanceError::DegenerateParams(format!("unknown chain family {other:?}")))
                }
            };
            Instance::new(matrix, graph)
        }
        other => Err(InstanceError::UnknownKind(other.to_string())),
    }
}
