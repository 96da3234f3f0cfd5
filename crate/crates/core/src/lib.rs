//! Offline policy optimization for contextual decision processes from logged
//! trajectories, with importance-sampling estimators, eligible-action
//! constraints and diagnostics for propensity overfitting.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN.

pub mod behavior;
pub mod bootstrap;
pub mod data;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod learners;
pub mod neighborhood;
pub mod policy;
pub mod seed;
mod serde_util;

pub use data::{Dataset, DatasetInfo, Trajectory};
pub use error::{Error, Result};
pub use estimators::{Estimate, EstimatorTag, WeightTable};
pub use neighborhood::{EligibleMask, NeighborIndex};
pub use policy::{Architecture, Policy, PolicyParams, StepPolicy};
