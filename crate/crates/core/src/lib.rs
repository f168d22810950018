//! Distributed voltage control on radial distribution feeders.
//!
//! Each controllable bus adjusts its active and reactive injection from
//! purely local voltage measurements and messages exchanged with its tree
//! neighbors, and the network as a whole converges to the minimum-cost
//! injection profile that keeps every voltage inside its limits. The crate
//! provides:
//!
//! * [`net`] — radial network topology and voltage sensitivity matrices;
//! * [`flow`] — linearized and full branch-flow physics;
//! * [`agent`] — the per-bus control laws, price updates, and message
//!   quantities;
//! * [`sim`] — the iteration engine with delay, noise, and model-error
//!   injection;
//! * [`oracle`] — centralized reference solutions and convergence-theory
//!   checks used to validate the distributed controller;
//! * [`scenario`] — plain-text scenario/network/load-profile formats;
//! * [`output`] — deterministic CSV/summary writers for run artifacts;
//! * [`report`] — pass/fail check tables shared by the verifier and the
//!   command-line tool.
//!
//! Runs are deterministic: a scenario plus a seed reproduces a trajectory
//! bit for bit.

pub mod agent;
pub mod flow;
pub mod net;
pub mod oracle;
pub mod output;
pub mod report;
pub mod scenario;
pub mod sim;

pub use agent::{AgentState, BusBox, BusCost, CostParams, Limits};
pub use net::{BusId, Line, NetworkError, RadialNetwork, SensitivityMatrices};
pub use sim::{
    delay::DelayModel, run_scenario, Physics, RecordMode, Scenario, SimError, Trajectory,
};
