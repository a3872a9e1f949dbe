//! Composite neural architecture search for multi-source RL state encoders.
//!
//! The pipeline: a searcher (an LLM design agent or a baseline) proposes
//! design vectors over a [`CompositeSpace`]; each candidate is evaluated,
//! either on the seeded [`surrogate`] objective or by training a
//! [`CompositeEncoder`] end to end on the MicroFlow toy environment; the
//! resulting [`SignalSet`] (task metric, average reward, feature information)
//! is fed back to the searcher. The [`orchestrator`] runs the loop and
//! persists every candidate.

pub mod agent;
pub mod encoder;
pub mod orchestrator;
pub mod parser;
pub mod searchers;
pub mod signals;
pub mod space;
pub mod surrogate;
pub mod toy_env;

pub use space::{
    builtin_space, load_space, ChoiceDomain, ChoiceKind, ChoiceSpec, CompositeSpace, DesignVector,
    ModuleSpace, SpaceError, ValidationReport, Value, Violation, ViolationKind,
};

/// SplitMix64 finalizer; derives independent stream seeds from one seed.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
