//! Replication management and artifact output.

use std::env;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ExperimentConfig, LoadedConfig, Setting};
use crate::error::CliError;
use crate::instance::{generate_instance, Instance, InstanceError};
use smile_core::agent::{AgentParams, AgentState};
use smile_core::engine::{run, run_allocation_protocol, EngineConfig, OutcomeSink, Policy, RunSummary, SlotOutcome};
use smile_core::matching::{enumerate_stable, solve_stable, StableSolution};
use smile_core::metrics::{
    aggregate, compute_constants, min_gap, worst_case_registries, write_csv, AggregateRow, RegretBound,
    RegretRecorder, SystemConstants,
};
use smile_core::Allocation;

pub const OUTPUT_DIR_ENV: &str = "SMILE_OUTPUT_DIR";

/// Everything fixed before the first replication starts.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub instance: Instance,
    pub constants: SystemConstants,
    pub params: AgentParams,
    pub oracle: StableSolution,
    pub bound: Option<RegretBound>,
    pub seeds: Vec<u64>,
    pub policies: Vec<Policy>,
    pub warnings: Vec<String>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, CliError> {
    let instance = generate_instance(&config.instance, config.run.seed)?;
    let mut warnings = instance.warnings.clone();
    let channel_count = instance.channels.channels();
    if config.run.horizon < channel_count as u64 {
        return Err(CliError::Config(format!(
            "horizon {} is shorter than the {channel_count} initialization slots",
            config.run.horizon
        )));
    }
    let constants = compute_constants(&instance.channels, config.analysis.epsilon)
        .map_err(|e| InstanceError::DegenerateParams(e.to_string()))?;
    let oracle = solve_stable(&instance.means, &instance.graph)
        .map_err(|e| InstanceError::DegenerateParams(format!("no stable oracle: {e}")))?;
    let registries = worst_case_registries(&instance.graph, channel_count);

    let delta_sq = match config.agent.delta_sq {
        Setting::Value(v) => v,
        Setting::Auto(_) => match min_gap(&instance.means, &registries) {
            Some(g) if g > 0.0 => g * g,
            Some(_) => {
                return Err(InstanceError::DegenerateParams(
                    "two compared means are equal; set agent.delta_sq explicitly".into(),
                )
                .into())
            }
            None => 1.0,
        },
    };
    let params = AgentParams {
        kappa: match config.agent.kappa {
            Setting::Value(v) => v,
            Setting::Auto(_) => constants.kappa,
        },
        concentration_rate: match config.agent.concentration_rate {
            Setting::Value(v) => v,
            Setting::Auto(_) => constants.concentration_rate,
        },
        epsilon: config.agent.epsilon,
        gap_floor: delta_sq,
        recovery_cap: config.agent.recovery_cap,
    };
    params
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let bound = if config.analysis.bound {
        match RegretBound::new(
            &constants,
            &instance.means,
            &instance.graph,
            &oracle.allocation,
            &registries,
            params.kappa,
            params.concentration_rate,
            params.epsilon,
        ) {
            Ok(b) => Some(b),
            Err(e) => {
                warnings.push(format!("regret bound unavailable: {e}"));
                None
            }
        }
    } else {
        None
    };

    Ok(Prepared {
        seeds: config.seeds(),
        policies: config.policies()?,
        config: config.clone(),
        instance,
        constants,
        params,
        oracle,
        bound,
        warnings,
    })
}

/// Mean realized sum rate over slots `from..`.
#[derive(Debug, Default)]
struct TailRate {
    from: u64,
    sum: f64,
    slots: u64,
}

impl OutcomeSink for TailRate {
    fn record(&mut self, outcome: &SlotOutcome) {
        if outcome.t >= self.from {
            self.sum += outcome.sum_realized();
            self.slots += 1;
        }
    }
}

impl TailRate {
    fn rate(&self) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.sum / self.slots as f64
        }
    }
}

/// Per-slot CSV rows: t, cell, channel, r, x, phase (cells and channels
/// 1-based, channel empty when silent).
pub struct RawCsvSink<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> RawCsvSink<W> {
    pub fn new(mut out: W) -> Self {
        let error = writeln!(out, "t,cell,channel,r,x,phase").err();
        Self { out, error }
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()
    }
}

impl<W: Write> OutcomeSink for RawCsvSink<W> {
    fn record(&mut self, outcome: &SlotOutcome) {
        if self.error.is_some() {
            return;
        }
        for (l, cell) in outcome.cells.iter().enumerate() {
            let channel = cell.channel.map(|s| (s + 1).to_string()).unwrap_or_default();
            if let Err(e) = writeln!(
                self.out,
                "{},{},{},{},{},{}",
                outcome.t,
                l + 1,
                channel,
                cell.rate,
                cell.realized,
                cell.phase.as_str()
            ) {
                self.error = Some(e);
                return;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyResult {
    pub policy: Policy,
    pub rows: Vec<AggregateRow>,
    pub final_regrets: Vec<f64>,
    /// Per replication: mean sum rate over the last tenth of the horizon.
    pub tail_rates: Vec<f64>,
    pub summaries: Vec<RunSummary>,
}

impl PolicyResult {
    pub fn mean_tail_rate(&self) -> f64 {
        self.tail_rates.iter().sum::<f64>() / self.tail_rates.len() as f64
    }

    pub fn mean_final_regret(&self) -> f64 {
        self.final_regrets.iter().sum::<f64>() / self.final_regrets.len() as f64
    }

    /// Replications whose last allocation phase returned `oracle`.
    pub fn converged(&self, oracle: &Allocation) -> usize {
        self.summaries
            .iter()
            .filter(|s| s.allocations.last().is_some_and(|a| &a.allocation == oracle))
            .count()
    }
}

/// Runs every replication of `policy` (in parallel on the current rayon
/// pool) and aggregates in replication order.
pub fn run_policy(prepared: &Prepared, policy: Policy, raw: Option<&Path>) -> Result<PolicyResult, CliError> {
    let horizon = prepared.config.run.horizon;
    let stride = prepared.config.stride();
    let oracle_value = prepared.oracle.allocation.value(&prepared.instance.means);
    let tail_from = horizon - horizon / 10 + 1;
    let outcomes: Vec<_> = prepared
        .seeds
        .par_iter()
        .enumerate()
        .map(|(r, &seed)| -> Result<_, CliError> {
            let raw_sink = match raw {
                Some(path) if r == 0 => Some(RawCsvSink::new(BufWriter::new(File::create(path)?))),
                _ => None,
            };
            let mut sink = (
                (
                    RegretRecorder::new(r as u64, oracle_value, stride, horizon),
                    TailRate {
                        from: tail_from,
                        ..Default::default()
                    },
                ),
                raw_sink,
            );
            let config = EngineConfig {
                horizon,
                channels: &prepared.instance.channels,
                graph: &prepared.instance.graph,
                params: prepared.params,
                seed,
                policy,
            };
            let summary = run(config, &mut sink).map_err(|e| CliError::Runtime(e.to_string()))?;
            let ((recorder, tail), raw_sink) = sink;
            if let Some(raw_sink) = raw_sink {
                raw_sink.finish()?;
            }
            Ok((recorder.into_trace(), tail.rate(), summary))
        })
        .collect::<Result<_, _>>()?;

    let mut traces = Vec::with_capacity(outcomes.len());
    let mut tail_rates = Vec::with_capacity(outcomes.len());
    let mut summaries = Vec::with_capacity(outcomes.len());
    for (trace, tail, summary) in outcomes {
        traces.push(trace);
        tail_rates.push(tail);
        summaries.push(summary);
    }
    let final_regrets = traces.iter().map(|t| t.final_regret()).collect();
    let mut rows = aggregate(&traces).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(bound) = &prepared.bound {
        for row in rows.iter_mut().filter(|r| r.t >= 2) {
            row.bound = Some(bound.evaluate(row.t).map_err(|e| CliError::Runtime(e.to_string()))?.total());
        }
    }
    Ok(PolicyResult {
        policy,
        rows,
        final_regrets,
        tail_rates,
        summaries,
    })
}

pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub prepared: Prepared,
    pub results: Vec<PolicyResult>,
}

/// Output directory: explicit override, then the environment, then the
/// config, then `out/<name>`.
pub fn output_dir(config: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| config.run.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name))
}

pub fn run_experiment(
    loaded: &LoadedConfig,
    explicit_output: Option<&Path>,
    jobs: Option<usize>,
) -> Result<ExperimentReport, CliError> {
    let prepared = prepare(&loaded.config)?;
    let out = output_dir(&loaded.config, explicit_output);
    fs::create_dir_all(&out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        builder = builder.num_threads(jobs);
    }
    let pool = builder.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let results = pool.install(|| {
        prepared
            .policies
            .iter()
            .map(|&policy| {
                let raw = prepared
                    .config
                    .run
                    .raw_dump
                    .then(|| out.join(format!("raw_{}.csv", policy.name())));
                run_policy(&prepared, policy, raw.as_deref())
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    write_outputs(loaded, &prepared, &results, &out)?;
    Ok(ExperimentReport {
        output_dir: out,
        prepared,
        results,
    })
}

fn one_based(allocation: &Allocation) -> Vec<[usize; 2]> {
    allocation
        .as_slice()
        .iter()
        .enumerate()
        .map(|(l, &s)| [l + 1, s + 1])
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_outputs(
    loaded: &LoadedConfig,
    prepared: &Prepared,
    results: &[PolicyResult],
    out: &Path,
) -> Result<(), CliError> {
    for result in results {
        let file = File::create(out.join(format!("regret_{}.csv", result.policy.name())))?;
        let mut writer = BufWriter::new(file);
        write_csv(&result.rows, &mut writer)?;
        writer.flush()?;
    }

    write_json(
        &out.join("constants.json"),
        &json!({
            "constants": prepared.constants,
            "agent": prepared.params,
            "bound_note": "the constant term of the bound is omitted (reported as 0); collision registries are taken as all neighbors",
        }),
    )?;

    let means = &prepared.instance.means;
    write_json(
        &out.join("oracle.json"),
        &json!({
            "allocation": one_based(&prepared.oracle.allocation),
            "sum_rate": prepared.oracle.allocation.value(means),
            "iterations": prepared.oracle.iterations(),
            "collision_iterations": prepared.oracle.collision_iterations(),
            "slots": prepared.oracle.slots(),
        }),
    )?;

    let oracle = &prepared.oracle.allocation;
    let summaries: serde_json::Map<String, serde_json::Value> = results
        .iter()
        .map(|r| {
            let mut entry = json!({
                "final_mean_regret": r.mean_final_regret(),
                "final_stderr": r.rows.last().map_or(0.0, |row| row.stderr),
                "tail_mean_sum_rate": r.mean_tail_rate(),
            });
            if r.policy == Policy::Smile {
                entry["converged_replications"] = json!(r.converged(oracle));
            }
            (r.policy.name().to_string(), entry)
        })
        .collect();
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    write_json(
        &out.join("manifest.json"),
        &json!({
            "name": prepared.config.name,
            "schema": prepared.config.schema,
            "version": env!("CARGO_PKG_VERSION"),
            "config_path": loaded.path.display().to_string(),
            "config_sha256": loaded.sha256,
            "horizon": prepared.config.run.horizon,
            "stride": prepared.config.stride(),
            "replications": prepared.seeds.len(),
            "seeds": prepared.seeds,
            "policies": prepared.policies.iter().map(|p| p.name()).collect::<Vec<_>>(),
            "cells": means.cells(),
            "channels": means.channels(),
            "edges": prepared.instance.graph.edges().iter().map(|&(a, b)| [a + 1, b + 1]).collect::<Vec<_>>(),
            "warnings": prepared.warnings,
            "results": summaries,
            "created_unix": created,
        }),
    )?;

    if prepared.config.run.plot_script {
        fs::write(out.join("plot.gp"), plot_script(&prepared.policies))?;
    }
    Ok(())
}

fn plot_script(policies: &[Policy]) -> String {
    let mut s = String::from(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 't'\n\nset terminal pngcairo size 900,600\n",
    );
    let series = |column: u32| -> String {
        policies
            .iter()
            .map(|p| format!("'regret_{0}.csv' using 1:{column} with lines title '{0}'", p.name()))
            .collect::<Vec<_>>()
            .join(", \\\n     ")
    };
    s += &format!("set output 'regret.png'\nset ylabel 'mean regret'\nplot {}\n\n", series(2));
    s += &format!("set output 'sum_rate.png'\nset ylabel 'mean sum rate'\nplot {}\n", series(4));
    s
}

/// One allocation phase on the true means, run through the cell-side
/// protocol.
pub fn allocation_dry_run(instance: &Instance, params: AgentParams) -> Result<StableSolution, CliError> {
    let means = &instance.means;
    let mut agents = (0..means.cells())
        .map(|l| {
            let mut agent = AgentState::new(l, means.channels(), instance.graph.neighbors(l).to_vec(), params)?;
            for s in 0..means.channels() {
                agent.init_sample(s, 0, means.get(l, s))?;
            }
            Ok(agent)
        })
        .collect::<Result<Vec<_>, smile_core::agent::AgentError>>()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    run_allocation_protocol(&mut agents, &instance.graph).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Human-readable iteration log, 1-based.
pub fn format_allocation(solution: &StableSolution) -> String {
    use smile_core::matching::IterationOutcome;
    let mut s = String::new();
    for (i, record) in solution.log.iter().enumerate() {
        let outcome = match &record.outcome {
            IterationOutcome::Assigned => "assigned".to_string(),
            IterationOutcome::Collision { blockers } => {
                let cells: Vec<String> = blockers.iter().map(|b| (b + 1).to_string()).collect();
                format!("collision with cell {}", cells.join(", "))
            }
        };
        s += &format!(
            "iteration {}: cell {} -> channel {} ({}) {}\n",
            i + 1,
            record.cell + 1,
            record.channel + 1,
            record.value,
            outcome
        );
    }
    let collisions: Vec<String> = solution.collision_iterations().iter().map(|i| i.to_string()).collect();
    let pairs: Vec<String> = one_based(&solution.allocation)
        .iter()
        .map(|[l, s]| format!("{l}->{s}"))
        .collect();
    s += &format!("iterations: {}\n", solution.iterations());
    s += &format!("collision iterations: {}\n", collisions.join(", "));
    s += &format!("slots: {}\n", solution.slots());
    s += &format!("allocation: {}\n", pairs.join(", "));
    s
}

/// Every stable allocation of the true means, 1-based, with sum rates.
pub fn enumerate_report(instance: &Instance) -> Result<String, CliError> {
    let all = enumerate_stable(&instance.means, &instance.graph).map_err(|e| CliError::Runtime(e.to_string()))?;
    let oracle = solve_stable(&instance.means, &instance.graph).ok().map(|s| s.allocation);
    let mut s = format!("stable allocations: {}\n", all.len());
    for alloc in &all {
        let pairs: Vec<String> = one_based(alloc).iter().map(|[l, c]| format!("{l}->{c}")).collect();
        let mark = if Some(alloc) == oracle.as_ref() { " (greedy)" } else { "" };
        s += &format!("{}  sum {}{}\n", pairs.join(", "), alloc.value(&instance.means), mark);
    }
    Ok(s)
}
