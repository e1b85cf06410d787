//! Learning transformed predictive state representations (TPSRs) from
//! action-observation data, and planning in the learned models.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] holds the TPSR parameters and exact filtering/prediction.
//! * [`features`] turns raw observations and observation windows into
//!   normalized kernel feature vectors.
//! * [`learn`] accumulates moment estimates and recovers model parameters by
//!   truncated SVD.
//! * [`planner`] learns linear rewards and runs point-based value iteration.
//! * [`envs`] provides ground-truth systems: discrete POMDPs with exact
//!   oracles, and the vision-based robot arena.
//! * [`io`] implements the on-disk formats.

pub mod envs;
pub mod error;
pub mod features;
pub mod io;
pub mod learn;
pub mod linalg;
pub mod model;
pub mod planner;

pub use error::{Error, Result};
pub use features::{FeatureMap, KernelSet, WhiteningTransform, WindowFeatures};
pub use learn::{EmpiricalEstimates, LearnConfig, TrainingSample};
pub use model::{clamp_probability, BeliefState, TpsrModel, DEFAULT_PROBABILITY_FLOOR};
pub use planner::{PlannerConfig, RewardModel, ValueFunction};
