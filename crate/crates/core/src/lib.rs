//! Unbalanced entropic optimal transport and neural Monge map estimators.
//!
//! The crate is organised bottom-up:
//!
//! * [`measures`]: weighted point clouds, cost matrices, seeded synthetic datasets.
//! * [`solver`]: log-domain Sinkhorn for balanced and KL-unbalanced transport.
//! * [`rebalance`]: turning an unbalanced batch coupling into rescaled samples
//!   and reweighting estimates usable by any balanced Monge map estimator.
//! * [`neural`]: small MLPs with hand-written reverse mode, Adam, gradient checks.
//! * [`flow_matching`]: FM / OT-FM / UOT-FM training and fixed-step ODE integration.
//! * [`monge_gap`]: the Monge gap regulariser and its (un)balanced estimator.
//! * [`metrics`]: evaluation of plans and learned maps.
//! * [`experiment`]: config-driven pipelines writing CSV and SVG artifacts.

pub mod config;
pub mod error;
pub mod experiment;
pub mod flow_matching;
pub mod io;
pub mod measures;
pub mod metrics;
pub mod monge_gap;
pub mod neural;
pub mod rebalance;
pub mod rng;
pub mod solver;
pub mod svg;

pub use error::{Error, Result};
pub use measures::{cost_matrix, make_measure, CostMatrix, DatasetKind, DatasetSpec, DiscreteMeasure, GroundCost, LabeledMeasure, Role};
pub use neural::{Activation, AdamConfig, AdamState, Mlp, OutputHead};
pub use solver::{solve, tau_to_lambda, MarginalPenalty, SolverConfig, TransportPlan};
