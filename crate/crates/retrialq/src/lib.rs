//! Steady-state analysis toolkit for a multi-channel two-class priority queue
//! with phase-type retrials.
//!
//! The model: two call classes (handoff and new) arrive according to a marked
//! Markovian arrival process and are served on `S` identical channels with
//! class-specific phase-type service laws. Handoff calls have preemptive-repeat
//! priority: an arriving handoff call that finds every channel busy evicts an
//! in-service new call if one exists (the evicted call later restarts service
//! from scratch) and is dropped otherwise. New calls that find no idle channel
//! join an orbit of unbounded size and retry after phase-type delays with two
//! absorption exits (retry vs. abandon).
//!
//! The orbit count makes the chain a level-dependent quasi-birth-death process.
//! This crate assembles the block-tridiagonal generator from Kronecker-structured
//! pieces, computes the stationary distribution by a backward rate-matrix
//! recursion on a truncated level set, evaluates thirteen performance measures,
//! cross-validates them against an independent discrete-event simulator, and
//! solves the channel-allocation problem (minimal `S` subject to dropping and
//! preemption caps) with direct search, particle swarm and simulated annealing.
//!
//! Entry points:
//! - [`config::preset`] / [`config::load_file`] build a validated [`model::ModelConfig`];
//! - [`solver::solve`] produces a [`solver::SteadyState`];
//! - [`measures::evaluate`] turns it into a [`measures::MeasureReport`];
//! - [`sim::simulate`] estimates the same measures by discrete-event simulation;
//! - [`optim`] hosts the three optimization heuristics;
//! - [`cli::run`] backs the `retrialq` binary.
//!
//! The `examples/` directory demonstrates each capability end to end.

pub mod cli;
pub(crate) mod linalg;
pub mod config;
pub mod error;
pub mod generator;
pub mod kron;
pub mod measures;
pub mod model;
pub mod optim;
pub mod sim;
pub mod solver;
pub mod state;

pub use error::{Error, Result};
