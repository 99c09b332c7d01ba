//! Route prediction for courier pick-up tasks, trained with policy-gradient
//! reinforcement learning on top of cross-entropy pretraining.
//!
//! The pipeline: [`synthgen`] simulates couriers and produces datasets,
//! [`agent`] holds the attention encoder-decoder policy and its critic,
//! [`trainer`] runs cross-entropy, REINFORCE, actor-critic and GAE training
//! against the stepwise [`reward`], and [`metrics`] scores predicted routes.

pub mod agent;
#[cfg(feature = "cli")]
pub mod cli;
pub mod domain;
pub mod metrics;
pub mod numerics;
pub mod reward;
pub mod synthgen;
pub mod trainer;

pub use domain::{
    order_index, validate_sample, Constraint, RouteLabel, RoutePermutation, Sample, Task, TaskId,
    Violation, D_FEATURE, N_MAX,
};
