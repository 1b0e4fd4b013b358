//! Condition-adaptive cloud-edge collaborative forecasting, as a deterministic
//! multi-site simulator and control library.
//!
//! The library is organized around a per-slot control loop for a fleet of PV
//! sites: each slot, every node screens its input into a routing score, a
//! central scheduler prices escalation against virtual resource queues and a
//! mean-field estimate of cloud congestion, the selected branches run and are
//! fused by entropic-FTRL weights, and delayed labels later feed the online
//! calibrators. Modules:
//!
//! - [`core`]: horizon vectors, modes, simplex weights, loss evaluation and
//!   fusion-weight subgradients.
//! - [`data`]: CSV ingestion, synthetic scenario generation, windowing,
//!   chronological splits, and the retrieval case base.
//! - [`predictors`]: the three forecast branches (site expert, pooled small
//!   ensemble, retrieval-conditioned cloud regressor).
//! - [`screening`]: routing-score features, logistic score, streaming score
//!   CDFs.
//! - [`calibration`]: full-branch replay, isotonic gain curves, executed-mode
//!   surrogate calibrator.
//! - [`router`]: pricing, routing indices, thresholds, mean-field fixed point,
//!   action selection.
//! - [`fusion`]: entropic-FTRL fusion weights, delayed-label reveal buffer,
//!   regret diagnostics.
//! - [`queues`]: virtual queues, Lyapunov value, stability reporting.
//! - [`sim`]: the slot loop, baseline policies, metrics, parameter sweeps.
//! - [`bundle`] / [`config`] / [`pipeline`]: serialized calibration bundles,
//!   run configuration, and the prepare/simulate orchestration used by the
//!   CLI.

pub mod bundle;
pub mod calibration;
pub mod config;
pub mod core;
pub mod data;
pub mod error;
pub mod fusion;
pub mod parallel;
pub mod pipeline;
pub mod predictors;
pub mod queues;
pub mod router;
pub mod screening;
pub mod seeds;
pub mod sim;

pub use error::{CapeError, Result};
