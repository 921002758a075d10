//! Explicit-state model checker and executable protocol engine for payment
//! channel networks: exhaustive exploration of the channel protocol and its
//! idealized abstractions, refinement-mapping validation between them, and
//! replayable traces for the two known formalization flaws.

pub mod channel;
pub mod checker;
pub mod derive;
pub mod encode;
pub mod htlc;
pub mod ideal_channel;
pub mod ideal_network;
pub mod ids;
pub mod ledger;
pub mod net_model;
pub mod refine;
pub mod spec;
pub mod state;
pub mod txbuild;

pub use checker::{
    check_refinement, check_terminal_states, compare_projected_state_sets, explore, CheckOptions,
    CheckOutcome, Invariant, Model, ProjectionOutcome, Step, Trace,
};
pub use ledger::FlawFlags;
pub use spec::{build_scenario, GlobalModel, SpecConfig, SpecId};
