//! Slotted simulation kernel.
//!
//! Every slot all `L x S` chains advance once, whatever the cells do. The
//! chain stream and the policy stream are separate ChaCha8 streams derived
//! from the replication seed, so chain trajectories depend only on the
//! models and the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::agent::{AgentError, AgentParams, AgentState, ExploreStage, Phase};
use crate::channel::{ChainState, ChannelMatrix};
use crate::matching::{
    solve_stable, Allocation, IterationOutcome, IterationRecord, MatchingError, RateMatrix,
    StableSolution,
};
use crate::topology::InterferenceGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("horizon must be positive")]
    HorizonZero,
    #[error("horizon {horizon} is shorter than the {channels} initialization slots")]
    HorizonTooShort { horizon: u64, channels: usize },
    #[error("channel matrix has {channels} cells but the graph has {graph}")]
    DimensionMismatch { channels: usize, graph: usize },
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Policy {
    Smile,
    /// Every cell always on its channel in the stable allocation of the true
    /// means.
    Oracle,
    /// Uniform independent channel choice per cell per slot.
    Random,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Smile => "smile",
            Policy::Oracle => "oracle",
            Policy::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PhaseTag {
    Init,
    Recovery,
    Estimation,
    Waiting,
    Allocation,
    Exploitation,
    Oracle,
    Random,
}

impl PhaseTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseTag::Init => "init",
            PhaseTag::Recovery => "recovery",
            PhaseTag::Estimation => "estimation",
            PhaseTag::Waiting => "waiting",
            PhaseTag::Allocation => "allocation",
            PhaseTag::Exploitation => "exploitation",
            PhaseTag::Oracle => "oracle",
            PhaseTag::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellOutcome {
    pub channel: Option<usize>,
    /// Emitted rate of the chosen channel (0 when silent).
    pub rate: f64,
    /// Realized rate: `rate`, or 0 on collision.
    pub realized: f64,
    pub phase: PhaseTag,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotOutcome {
    /// 1-based slot index.
    pub t: u64,
    pub cells: Vec<CellOutcome>,
}

impl SlotOutcome {
    pub fn sum_realized(&self) -> f64 {
        self.cells.iter().map(|c| c.realized).sum()
    }
}

/// Consumer of the per-slot stream.
pub trait OutcomeSink {
    fn record(&mut self, outcome: &SlotOutcome);

    /// Chain positions after this slot's transition.
    fn record_chains(&mut self, _t: u64, _chains: &[ChainState]) {}
}

impl OutcomeSink for Vec<SlotOutcome> {
    fn record(&mut self, outcome: &SlotOutcome) {
        self.push(outcome.clone());
    }
}

impl<A: OutcomeSink, B: OutcomeSink> OutcomeSink for (A, B) {
    fn record(&mut self, outcome: &SlotOutcome) {
        self.0.record(outcome);
        self.1.record(outcome);
    }

    fn record_chains(&mut self, t: u64, chains: &[ChainState]) {
        self.0.record_chains(t, chains);
        self.1.record_chains(t, chains);
    }
}

impl<S: OutcomeSink> OutcomeSink for Option<S> {
    fn record(&mut self, outcome: &SlotOutcome) {
        if let Some(sink) = self {
            sink.record(outcome);
        }
    }

    fn record_chains(&mut self, t: u64, chains: &[ChainState]) {
        if let Some(sink) = self {
            sink.record_chains(t, chains);
        }
    }
}

/// Discards everything.
pub struct NullSink;

impl OutcomeSink for NullSink {
    fn record(&mut self, _outcome: &SlotOutcome) {}
}

#[derive(Debug, Clone)]
pub struct EngineConfig<'a> {
    pub horizon: u64,
    pub channels: &'a ChannelMatrix,
    pub graph: &'a InterferenceGraph,
    pub params: AgentParams,
    pub seed: u64,
    pub policy: Policy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationEvent {
    /// First slot of the phase.
    pub start: u64,
    pub iterations: usize,
    pub slots: u64,
    pub allocation: Allocation,
}

/// Global slot counts per mode; they add up to the horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ModeSlots {
    pub init: u64,
    /// Slots where some cell explored or waited.
    pub exploration: u64,
    pub allocation: u64,
    pub exploitation: u64,
    /// Oracle or random policy slots.
    pub fixed: u64,
}

impl ModeSlots {
    pub fn total(&self) -> u64 {
        self.init + self.exploration + self.allocation + self.exploitation + self.fixed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub slots: u64,
    pub mode_slots: ModeSlots,
    pub allocations: Vec<AllocationEvent>,
    pub completed_exploitations: u32,
    pub interrupted_exploitations: u32,
    /// Final estimate matrix (SMILE only).
    pub estimates: Option<RateMatrix>,
}

/// Realized rates for one slot. A cell choosing `s` gets `rates(l, s)`
/// unless a neighbor also chose `s`; silent cells get 0.
pub fn resolve_slot(
    choices: &[Option<usize>],
    rates: &RateMatrix,
    graph: &InterferenceGraph,
) -> Vec<f64> {
    choices
        .iter()
        .enumerate()
        .map(|(l, choice)| match choice {
            Some(s) if !collides(l, *s, choices, graph) => rates.get(l, *s),
            _ => 0.0,
        })
        .collect()
}

fn collides(cell: usize, channel: usize, choices: &[Option<usize>], graph: &InterferenceGraph) -> bool {
    graph
        .neighbors(cell)
        .iter()
        .any(|&q| choices[q] == Some(channel))
}

/// Runs the allocation protocol among `agents`: every unassigned cell bids
/// its best remaining channel, the highest bid contends, and the contender
/// either takes the channel or, when assigned neighbors already hold it,
/// drops it. Both sides of a collision register each other.
pub fn run_allocation_protocol(
    agents: &mut [AgentState],
    graph: &InterferenceGraph,
) -> Result<StableSolution, EngineError> {
    for agent in agents.iter_mut() {
        agent.begin_allocation()?;
    }
    let mut assigned: Vec<Option<usize>> = vec![None; agents.len()];
    let mut log = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for (l, agent) in agents.iter().enumerate() {
            if !agent.is_bidding() {
                continue;
            }
            let Some((s, v)) = agent.allocation_bid() else {
                return Err(MatchingError::Deadlock { cell: l, log }.into());
            };
            if best.is_none_or(|(_, _, bv)| v.total_cmp(&bv).is_gt()) {
                best = Some((l, s, v));
            }
        }
        let Some((cell, channel, value)) = best else {
            break;
        };
        let blockers: Vec<usize> = graph
            .neighbors(cell)
            .iter()
            .copied()
            .filter(|&q| assigned[q] == Some(channel))
            .collect();
        let announced: Vec<(usize, f64)> = blockers
            .iter()
            .map(|&q| (q, agents[q].estimate(channel)))
            .collect();
        agents[cell].on_attempt(channel, &announced)?;
        let outcome = if blockers.is_empty() {
            assigned[cell] = Some(channel);
            IterationOutcome::Assigned
        } else {
            for &q in &blockers {
                agents[q].record_collision(channel, cell, value)?;
            }
            IterationOutcome::Collision { blockers }
        };
        log.push(IterationRecord {
            cell,
            channel,
            value,
            outcome,
        });
    }
    let allocation = Allocation::new(assigned.into_iter().map(|a| a.expect("all assigned")).collect());
    Ok(StableSolution { allocation, log })
}

#[derive(Debug, Clone)]
struct AllocationPlay {
    log: Vec<IterationRecord>,
    index: usize,
    repeat: bool,
    holders: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
enum Mode {
    Init,
    Cycle,
    Allocation(AllocationPlay),
    Exploitation { remaining: u64 },
    Fixed,
}

pub struct Engine<'a> {
    config: EngineConfig<'a>,
    t: u64,
    chains: Vec<ChainState>,
    chain_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    agents: Vec<AgentState>,
    oracle: Option<Allocation>,
    mode: Mode,
    outcome: SlotOutcome,
    summary: RunSummary,
}

impl<'a> Engine<'a> {
    pub fn new(config: EngineConfig<'a>) -> Result<Self, EngineError> {
        let channels = config.channels;
        let graph = config.graph;
        if config.horizon == 0 {
            return Err(EngineError::HorizonZero);
        }
        if config.horizon < channels.channels() as u64 {
            return Err(EngineError::HorizonTooShort {
                horizon: config.horizon,
                channels: channels.channels(),
            });
        }
        if channels.cells() != graph.cell_count() {
            return Err(EngineError::DimensionMismatch {
                channels: channels.cells(),
                graph: graph.cell_count(),
            });
        }
        config.params.validate()?;
        let mut chain_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut policy_rng = ChaCha8Rng::seed_from_u64(config.seed);
        policy_rng.set_stream(1);
        let mut chains = Vec::with_capacity(channels.models().len());
        for l in 0..channels.cells() {
            for s in 0..channels.channels() {
                chains.push(ChainState::stationary(l, s, channels.get(l, s), &mut chain_rng));
            }
        }
        let (agents, oracle, mode) = match config.policy {
            Policy::Smile => {
                let agents = (0..channels.cells())
                    .map(|l| {
                        AgentState::new(l, channels.channels(), graph.neighbors(l).to_vec(), config.params)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (agents, None, Mode::Init)
            }
            Policy::Oracle => {
                let solution = solve_stable(&channels.mean_rates(), graph)?;
                (Vec::new(), Some(solution.allocation), Mode::Fixed)
            }
            Policy::Random => (Vec::new(), None, Mode::Fixed),
        };
        let idle = CellOutcome {
            channel: None,
            rate: 0.0,
            realized: 0.0,
            phase: PhaseTag::Waiting,
        };
        Ok(Self {
            config,
            t: 0,
            chains,
            chain_rng,
            policy_rng,
            agents,
            oracle,
            mode,
            outcome: SlotOutcome {
                t: 0,
                cells: vec![idle; channels.cells()],
            },
            summary: RunSummary {
                slots: 0,
                mode_slots: ModeSlots::default(),
                allocations: Vec::new(),
                completed_exploitations: 0,
                interrupted_exploitations: 0,
                estimates: None,
            },
        })
    }

    pub fn slot(&self) -> u64 {
        self.t
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.config.horizon
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn chains(&self) -> &[ChainState] {
        &self.chains
    }

    fn chain_index(&self, cell: usize, channel: usize) -> usize {
        cell * self.config.channels.channels() + channel
    }

    fn observe(&self, cell: usize, channel: usize) -> (usize, f64) {
        let state = self.chains[self.chain_index(cell, channel)].state;
        (state, self.config.channels.get(cell, channel).rate(state))
    }

    /// Plays one slot.
    pub fn step<S: OutcomeSink + ?Sized>(&mut self, sink: &mut S) -> Result<(), EngineError> {
        self.t += 1;
        let t = self.t;
        for (chain, model) in self.chains.iter_mut().zip(self.config.channels.models()) {
            chain.step(model, &mut self.chain_rng);
        }
        sink.record_chains(t, &self.chains);

        match self.config.policy {
            Policy::Oracle => {
                let oracle = self.oracle.as_ref().expect("oracle allocation");
                for (l, cell) in self.outcome.cells.iter_mut().enumerate() {
                    cell.channel = Some(oracle.channel_of(l));
                    cell.phase = PhaseTag::Oracle;
                }
                self.summary.mode_slots.fixed += 1;
            }
            Policy::Random => {
                let channel_count = self.config.channels.channels();
                for cell in self.outcome.cells.iter_mut() {
                    cell.channel = Some(self.policy_rng.random_range(0..channel_count));
                    cell.phase = PhaseTag::Random;
                }
                self.summary.mode_slots.fixed += 1;
            }
            Policy::Smile => self.smile_slot(t)?,
        }

        self.resolve();
        self.outcome.t = t;
        self.summary.slots = t;
        sink.record(&self.outcome);
        Ok(())
    }

    fn resolve(&mut self) {
        let graph = self.config.graph;
        let channels = self.config.channels;
        let choices: Vec<Option<usize>> = self.outcome.cells.iter().map(|c| c.channel).collect();
        for l in 0..choices.len() {
            let (rate, realized) = match choices[l] {
                Some(s) => {
                    let state = self.chains[l * channels.channels() + s].state;
                    let rate = channels.get(l, s).rate(state);
                    let realized = if collides(l, s, &choices, graph) { 0.0 } else { rate };
                    (rate, realized)
                }
                None => (0.0, 0.0),
            };
            let cell = &mut self.outcome.cells[l];
            cell.rate = rate;
            cell.realized = realized;
        }
    }

    fn smile_slot(&mut self, t: u64) -> Result<(), EngineError> {
        match &mut self.mode {
            Mode::Init => {
                let s = (t - 1) as usize;
                for l in 0..self.agents.len() {
                    let (state, rate) = self.observe(l, s);
                    self.agents[l].init_sample(s, state, rate)?;
                    let cell = &mut self.outcome.cells[l];
                    cell.channel = Some(s);
                    cell.phase = PhaseTag::Init;
                }
                if s + 1 == self.config.channels.channels() {
                    self.mode = Mode::Cycle;
                }
                self.summary.mode_slots.init += 1;
                Ok(())
            }
            Mode::Exploitation { remaining } => {
                let interrupt = self.agents.iter().any(|a| a.next_exploration(t).is_some());
                if interrupt {
                    for agent in &mut self.agents {
                        agent.stop_exploiting();
                    }
                    self.summary.interrupted_exploitations += 1;
                    self.mode = Mode::Cycle;
                    return self.cycle_slot(t);
                }
                *remaining -= 1;
                let done = *remaining == 0;
                for (cell, agent) in self.outcome.cells.iter_mut().zip(&self.agents) {
                    cell.channel = agent.assignment();
                    cell.phase = PhaseTag::Exploitation;
                }
                if done {
                    for agent in &mut self.agents {
                        agent.complete_exploitation();
                        agent.stop_exploiting();
                    }
                    self.summary.completed_exploitations += 1;
                    self.mode = Mode::Cycle;
                }
                self.summary.mode_slots.exploitation += 1;
                Ok(())
            }
            Mode::Allocation(_) => self.allocation_slot(),
            Mode::Cycle => self.cycle_slot(t),
            Mode::Fixed => unreachable!("fixed mode outside oracle/random policy"),
        }
    }

    fn cycle_slot(&mut self, t: u64) -> Result<(), EngineError> {
        for agent in &mut self.agents {
            if agent.phase() == Phase::AwaitInterrupt {
                if let Some(s) = agent.next_exploration(t) {
                    agent.begin_exploration(s)?;
                }
            }
        }
        if self.agents.iter().all(|a| a.phase() == Phase::AwaitInterrupt) {
            let solution = run_allocation_protocol(&mut self.agents, self.config.graph)?;
            self.summary.allocations.push(AllocationEvent {
                start: t,
                iterations: solution.iterations(),
                slots: solution.slots(),
                allocation: solution.allocation.clone(),
            });
            self.mode = Mode::Allocation(AllocationPlay {
                log: solution.log,
                index: 0,
                repeat: false,
                holders: vec![None; self.agents.len()],
            });
            return self.allocation_slot();
        }
        for l in 0..self.agents.len() {
            let phase = self.agents[l].phase();
            let cell = &mut self.outcome.cells[l];
            match phase {
                Phase::Explore { channel, stage } => {
                    cell.channel = Some(channel);
                    let (state, rate) = self.observe(l, channel);
                    match stage {
                        ExploreStage::Recovery { .. } => {
                            self.outcome.cells[l].phase = PhaseTag::Recovery;
                            self.agents[l].run_recovery_step(state, rate)?;
                        }
                        ExploreStage::Estimation { .. } => {
                            self.outcome.cells[l].phase = PhaseTag::Estimation;
                            self.agents[l].run_estimation_step(state, rate)?;
                        }
                    }
                }
                _ => {
                    cell.channel = self.agents[l].assignment();
                    cell.phase = PhaseTag::Waiting;
                }
            }
        }
        self.summary.mode_slots.exploration += 1;
        Ok(())
    }

    fn allocation_slot(&mut self) -> Result<(), EngineError> {
        let Mode::Allocation(play) = &mut self.mode else {
            unreachable!("allocation slot outside allocation mode");
        };
        let record = &play.log[play.index];
        for (l, cell) in self.outcome.cells.iter_mut().enumerate() {
            cell.channel = play.holders[l];
            cell.phase = PhaseTag::Allocation;
        }
        self.outcome.cells[record.cell].channel = Some(record.channel);
        if record.is_collision() && !play.repeat {
            play.repeat = true;
        } else {
            if !record.is_collision() {
                play.holders[record.cell] = Some(record.channel);
            }
            play.index += 1;
            play.repeat = false;
        }
        self.summary.mode_slots.allocation += 1;
        if play.index == play.log.len() {
            for agent in &mut self.agents {
                agent.begin_exploitation()?;
            }
            let remaining = self.agents.first().map_or(1, |a| a.exploitation_length());
            self.mode = Mode::Exploitation { remaining };
        }
        Ok(())
    }

    /// Plays the remaining horizon.
    pub fn run_to_end<S: OutcomeSink + ?Sized>(mut self, sink: &mut S) -> Result<RunSummary, EngineError> {
        while !self.is_finished() {
            self.step(sink)?;
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> RunSummary {
        if self.config.policy == Policy::Smile {
            let agents = &self.agents;
            self.summary.estimates = Some(RateMatrix::from_fn(
                agents.len(),
                self.config.channels.channels(),
                |l, s| agents[l].estimate(s),
            ));
        }
        self.summary
    }
}

/// Runs one replication to the horizon.
pub fn run<S: OutcomeSink + ?Sized>(config: EngineConfig<'_>, sink: &mut S) -> Result<RunSummary, EngineError> {
    Engine::new(config)?.run_to_end(sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{gilbert_elliott, rayleigh6_scaled, ChannelModel};
    use crate::matching::solve_stable;
    use proptest::prelude::*;
    use rand::Rng;

    fn three_by_five_means() -> Vec<Vec<f64>> {
        vec![
            vec![45.0, 10.0, 35.0, 25.0, 80.0],
            vec![30.0, 45.0, 20.0, 75.0, 90.0],
            vec![55.0, 5.0, 70.0, 15.0, 45.0],
        ]
    }

    fn three_by_five() -> (ChannelMatrix, InterferenceGraph) {
        let means = three_by_five_means();
        let channels = ChannelMatrix::from_fn(3, 5, |l, s| rayleigh6_scaled(means[l][s])).unwrap();
        (channels, InterferenceGraph::new(3, [(0, 1)]).unwrap())
    }

    fn params() -> AgentParams {
        AgentParams {
            kappa: 1e-3,
            concentration_rate: 0.1,
            epsilon: 0.0,
            gap_floor: 1e-6,
            recovery_cap: Some(1_000_000),
        }
    }

    fn config<'a>(
        channels: &'a ChannelMatrix,
        graph: &'a InterferenceGraph,
        policy: Policy,
        horizon: u64,
        seed: u64,
    ) -> EngineConfig<'a> {
        EngineConfig {
            horizon,
            channels,
            graph,
            params: params(),
            seed,
            policy,
        }
    }

    #[test]
    fn resolve_slot_rules() {
        let rates = RateMatrix::from_fn(5, 3, |l, s| (10 * l + s + 1) as f64);
        let fig2 = InterferenceGraph::new(5, [(0, 1), (0, 2), (0, 3), (2, 3)]).unwrap();
        let x = resolve_slot(&[Some(2), Some(2), None, None, None], &rates, &fig2);
        assert_eq!(x, vec![0.0; 5]);
        // Cells 3 and 5 (0-based 2 and 4) are not adjacent and share channel 2.
        let x = resolve_slot(&[None, None, Some(1), None, Some(1)], &rates, &fig2);
        assert_eq!(x, vec![0.0, 0.0, 22.0, 0.0, 42.0]);
        let x = resolve_slot(&[Some(0), Some(1), Some(2), None, None], &rates, &fig2);
        assert_eq!(x, vec![1.0, 12.0, 23.0, 0.0, 0.0]);
    }

    fn agents_with(rates: &RateMatrix, graph: &InterferenceGraph) -> Vec<AgentState> {
        (0..rates.cells())
            .map(|l| {
                let mut a = AgentState::new(l, rates.channels(), graph.neighbors(l).to_vec(), params()).unwrap();
                for s in 0..rates.channels() {
                    a.init_sample(s, 0, rates.get(l, s)).unwrap();
                }
                a
            })
            .collect()
    }

    #[test]
    fn protocol_walkthrough() {
        let rates = RateMatrix::from_rows(&[
            vec![60.0, 40.0, 50.0],
            vec![30.0, 20.0, 75.0],
            vec![58.0, 55.0, 80.0],
            vec![10.0, 15.0, 90.0],
            vec![35.0, 70.0, 25.0],
        ])
        .unwrap();
        let graph = InterferenceGraph::new(5, [(0, 1), (0, 2), (0, 3), (2, 3)]).unwrap();
        let mut agents = agents_with(&rates, &graph);
        let run = run_allocation_protocol(&mut agents, &graph).unwrap();
        assert_eq!(run.allocation.as_slice(), &[0, 2, 1, 2, 1]);
        assert_eq!(run.iterations(), 7);
        assert_eq!(run.slots(), 9);
        assert_eq!(run.collision_iterations(), vec![2, 6]);
        // Cell 3 collided with cell 4 on channel 3; both sides registered.
        assert_eq!(agents[2].registry(2).get(&3), Some(&90.0));
        assert_eq!(agents[3].registry(2).get(&2), Some(&80.0));
        // Cell 1 collided with cell 3 on channel 1.
        assert_eq!(agents[0].registry(0).get(&2), Some(&58.0));
        assert_eq!(agents[2].registry(0).get(&0), Some(&60.0));
    }

    #[test]
    fn protocol_trivial_cases() {
        let rates = RateMatrix::from_rows(&[vec![3.0, 9.0, 4.0]]).unwrap();
        let graph = InterferenceGraph::empty(1);
        let mut agents = agents_with(&rates, &graph);
        let run = run_allocation_protocol(&mut agents, &graph).unwrap();
        assert_eq!(run.allocation.as_slice(), &[1]);
        assert_eq!(run.slots(), 1);

        let rates = RateMatrix::from_fn(4, 2, |l, s| (l * 2 + s) as f64);
        let graph = InterferenceGraph::empty(4);
        let mut agents = agents_with(&rates, &graph);
        let run = run_allocation_protocol(&mut agents, &graph).unwrap();
        assert_eq!(run.iterations(), 4);
        assert_eq!(run.slots(), 4);
        assert_eq!(run.collisions(), 0);
    }

    #[test]
    fn protocol_deadlock() {
        let rates = RateMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let graph = InterferenceGraph::complete(2);
        let mut agents = agents_with(&rates, &graph);
        assert!(matches!(
            run_allocation_protocol(&mut agents, &graph),
            Err(EngineError::Matching(MatchingError::Deadlock { cell: 0, .. }))
        ));
    }

    #[test]
    fn oracle_single_cell_tracks_emitted_rate() {
        let model = gilbert_elliott(0.9, 0.8, 3.0).unwrap();
        let channels = ChannelMatrix::new(1, 1, vec![model]).unwrap();
        let graph = InterferenceGraph::empty(1);
        let mut out: Vec<SlotOutcome> = Vec::new();
        run(config(&channels, &graph, Policy::Oracle, 20_000, 5), &mut out).unwrap();
        assert!(out.iter().all(|o| o.cells[0].realized == o.cells[0].rate));
        let mean = out.iter().map(|o| o.cells[0].realized).sum::<f64>() / out.len() as f64;
        assert!((mean - 2.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn adjacent_cells_on_one_channel_both_zero() {
        let model = ChannelModel::new(vec![5.0], vec![vec![1.0]]).unwrap();
        let channels = ChannelMatrix::new(2, 1, vec![model.clone(), model]).unwrap();
        let graph = InterferenceGraph::complete(2);
        let mut out: Vec<SlotOutcome> = Vec::new();
        run(config(&channels, &graph, Policy::Random, 10, 1), &mut out).unwrap();
        assert!(out.iter().all(|o| o.sum_realized() == 0.0));
    }

    struct ChainTrace(Vec<usize>);

    impl OutcomeSink for ChainTrace {
        fn record(&mut self, _outcome: &SlotOutcome) {}
        fn record_chains(&mut self, _t: u64, chains: &[ChainState]) {
            self.0.extend(chains.iter().map(|c| c.state));
        }
    }

    #[test]
    fn restlessness_across_policies() {
        let (channels, graph) = three_by_five();
        let mut traces = Vec::new();
        for policy in [Policy::Smile, Policy::Oracle, Policy::Random] {
            let mut trace = ChainTrace(Vec::new());
            run(config(&channels, &graph, policy, 3_000, 42), &mut trace).unwrap();
            traces.push(trace.0);
        }
        assert_eq!(traces[0], traces[1]);
        assert_eq!(traces[0], traces[2]);
    }

    #[test]
    fn determinism_and_slot_conservation() {
        let (channels, graph) = three_by_five();
        let mut a: Vec<SlotOutcome> = Vec::new();
        let mut b: Vec<SlotOutcome> = Vec::new();
        let sa = run(config(&channels, &graph, Policy::Smile, 20_000, 9), &mut a).unwrap();
        let sb = run(config(&channels, &graph, Policy::Smile, 20_000, 9), &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(sa.mode_slots.total(), 20_000);
        assert_eq!(a.len(), 20_000);
        assert!(a.iter().enumerate().all(|(i, o)| o.t == i as u64 + 1));
        assert_eq!(sa.mode_slots.init, 5);
        assert!(!sa.allocations.is_empty());
        for o in &a {
            for c in &o.cells {
                assert!(c.realized <= c.rate);
            }
        }
    }

    #[test]
    fn initialization_only_run() {
        let (channels, graph) = three_by_five();
        let mut out: Vec<SlotOutcome> = Vec::new();
        let summary = run(config(&channels, &graph, Policy::Smile, 5, 1), &mut out).unwrap();
        assert_eq!(summary.mode_slots.init, 5);
        for (t, o) in out.iter().enumerate() {
            assert!(o.cells.iter().all(|c| c.channel == Some(t) && c.phase == PhaseTag::Init));
        }
        assert_eq!(
            Engine::new(config(&channels, &graph, Policy::Smile, 4, 1)).err(),
            Some(EngineError::HorizonTooShort {
                horizon: 4,
                channels: 5
            })
        );
        assert_eq!(
            Engine::new(config(&channels, &graph, Policy::Smile, 0, 1)).err(),
            Some(EngineError::HorizonZero)
        );
    }

    #[test]
    fn smile_converges_on_three_by_five() {
        let (channels, graph) = three_by_five();
        let summary = run(config(&channels, &graph, Policy::Smile, 100_000, 3), &mut NullSink).unwrap();
        let last = summary.allocations.last().unwrap();
        assert_eq!(last.allocation.as_slice(), &[0, 4, 2]);
    }

    #[test]
    fn allocation_slots_play_the_log() {
        let (channels, graph) = three_by_five();
        let mut out: Vec<SlotOutcome> = Vec::new();
        let summary = run(config(&channels, &graph, Policy::Smile, 30_000, 11), &mut out).unwrap();
        for event in &summary.allocations {
            let first = event.start as usize - 1;
            let slots = event.slots as usize;
            if first + slots > out.len() {
                continue;
            }
            for o in &out[first..first + slots] {
                assert!(o.cells.iter().all(|c| c.phase == PhaseTag::Allocation));
            }
            // The next slot is no longer part of the phase.
            if let Some(next) = out.get(first + slots) {
                assert!(next.cells.iter().all(|c| c.phase != PhaseTag::Allocation));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn protocol_matches_solver(
            cells in 1usize..7,
            extra in 0usize..3,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let graph = InterferenceGraph::erdos_renyi(cells, 0.4, &mut rng);
            let channels = graph.max_degree() + 1 + extra;
            let rates = RateMatrix::from_fn(cells, channels, |_, _| rng.random_range(0..50) as f64);
            let mut agents = agents_with(&rates, &graph);
            let protocol = run_allocation_protocol(&mut agents, &graph).unwrap();
            let solver = solve_stable(&rates, &graph).unwrap();
            prop_assert_eq!(protocol.allocation, solver.allocation);
            prop_assert_eq!(protocol.log, solver.log);
        }
    }
}
