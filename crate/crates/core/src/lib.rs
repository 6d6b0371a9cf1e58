//! Federated learning over a single-cell OFDMA uplink.
//!
//! The crate models a base station that, every training round, selects a
//! subset of users by gradient-norm-proportional sampling around a fixed
//! anchor user, assigns each selected user one resource block so that the
//! slowest transmission finishes as early as possible, and fills in the
//! models of unselected users with per-user feedforward predictors whose
//! output is admitted only when the prediction error is small enough.
//!
//! Modules map one-to-one onto those concerns:
//!
//! - [`net_model`]: channel gains, uplink/downlink rates, delays, round time.
//! - [`selection`]: anchor choice, connection probabilities, association sampling.
//! - [`rb_alloc`]: exact min-max (bottleneck) RB assignment plus a brute-force oracle.
//! - [`fl_core`]: task models, losses, gradients, local updates, aggregation.
//! - [`predictor`]: single-hidden-layer predictor networks and gating.
//! - [`bounds`]: per-iteration convergence-bound terms and coefficient estimation.
//! - [`harness`]: configuration, datasets, the round loop, baselines and metrics.

pub mod bounds;
pub mod error;
pub mod fl_core;
pub mod harness;
pub mod net_model;
pub mod predictor;
pub mod rb_alloc;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
pub use fl_core::{Dataset, ModelVec, TaskKind, TaskModel};
pub use harness::config::{ExperimentConfig, GatingMode, Variant};
pub use net_model::{LinkDelays, NetworkConfig};
pub use predictor::PredictorNet;
pub use rb_alloc::{Assignment, AssignmentInstance};
