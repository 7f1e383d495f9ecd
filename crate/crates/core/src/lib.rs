//! Distributed learning of stable channel allocations over interference
//! graphs whose channels evolve as restless finite-state Markov chains.
//!
//! The crate is organised bottom-up:
//!
//! - [`channel`]: finite-state Markov channel models, stationary
//!   distributions, hitting times and sampling.
//! - [`topology`]: the interference graph between cells.
//! - [`matching`]: the centralized stable-allocation solver, a stability
//!   verifier and an exhaustive enumerator used as a test oracle.
//! - [`agent`]: the per-cell learning state machine (estimates, exploration
//!   coefficients, recovery/estimation epochs, collision registries).
//! - [`engine`]: the time-slotted simulator that drives every chain and
//!   every agent, including the allocation protocol.
//! - [`metrics`]: regret traces, system constants and the analytical regret
//!   bound.

pub mod agent;
pub mod channel;
pub mod engine;
pub mod matching;
pub mod metrics;
pub mod topology;

pub use agent::{AgentParams, AgentState, Phase};
pub use channel::{ChainState, ChannelMatrix, ChannelModel};
pub use engine::{EngineConfig, Policy, SlotOutcome};
pub use matching::{Allocation, RateMatrix};
pub use metrics::{RegretTrace, SystemConstants};
pub use topology::InterferenceGraph;
