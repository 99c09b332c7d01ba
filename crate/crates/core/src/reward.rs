//! Stepwise position-deviation reward and reward-to-go.

use crate::domain::{order_index, RouteLabel, TaskId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    /// Bonus for emitting a labelled task at its exact label position.
    pub r_bar: f64,
    /// Discount applied to later rewards.
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_bar: 20.0,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum RewardConfigError {
    #[error("r_bar must be positive, got {0}")]
    RBar(f64),
    #[error("gamma must lie in [0, 1], got {0}")]
    Gamma(f64),
}

impl RewardConfig {
    pub fn new(r_bar: f64, gamma: f64) -> Result<Self, RewardConfigError> {
        let cfg = Self { r_bar, gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.r_bar > 0.0) || !self.r_bar.is_finite() {
            return Err(RewardConfigError::RBar(self.r_bar));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(RewardConfigError::Gamma(self.gamma));
        }
        Ok(())
    }
}

/// Which branch of the stepwise reward fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardCase {
    /// Unlabelled task emitted within the first `m` steps.
    UnlabelledEarly,
    /// Unlabelled task emitted after step `m`; not evaluated.
    UnlabelledLate,
    /// Labelled task emitted at the wrong step; `label_pos` is its label position.
    Misplaced { label_pos: usize },
    /// Labelled task emitted at its label position.
    Exact,
}

pub fn classify(pred_task: TaskId, t: usize, label: &RouteLabel) -> RewardCase {
    match order_index(label.as_slice(), pred_task) {
        None if t <= label.len() => RewardCase::UnlabelledEarly,
        None => RewardCase::UnlabelledLate,
        Some(p) if p == t => RewardCase::Exact,
        Some(p) => RewardCase::Misplaced { label_pos: p },
    }
}

fn sq_dev(p: usize, q: usize) -> f64 {
    let d = p as f64 - q as f64;
    d * d
}

/// Reward for emitting `pred_task` at 1-based step `t`.
///
/// An unlabelled task emitted early is penalised as if its true position
/// were `m + 1`. A misplaced labelled task is penalised by its squared
/// distance from its label position.
pub fn step_reward(pred_task: TaskId, t: usize, label: &RouteLabel, cfg: &RewardConfig) -> f64 {
    let m = label.len();
    match classify(pred_task, t, label) {
        RewardCase::UnlabelledEarly => -sq_dev(m + 1, t),
        RewardCase::UnlabelledLate => 0.0,
        RewardCase::Misplaced { label_pos } => -sq_dev(label_pos, t),
        RewardCase::Exact => cfg.r_bar,
    }
}

/// Rewards for every step of a route.
pub fn route_rewards(route: &[TaskId], label: &RouteLabel, cfg: &RewardConfig) -> Vec<f64> {
    route
        .iter()
        .enumerate()
        .map(|(i, &id)| step_reward(id, i + 1, label, cfg))
        .collect()
}

/// Discounted reward-to-go `G_t = sum_{t' >= t} gamma^(t'-t) r_t'`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}
