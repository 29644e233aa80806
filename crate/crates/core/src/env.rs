//! Common interface for the cooperative environments used in training.

use crate::error::Result;
use crate::models::JointObservation;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: JointObservation,
    /// Shared team reward.
    pub reward: f64,
    pub done: bool,
}

/// A fully cooperative environment with one shared reward.
pub trait Environment {
    fn n_agents(&self) -> usize;

    /// Raw per-agent observation width, without agent ids.
    fn obs_dim(&self) -> usize;

    fn num_actions(&self) -> usize;

    fn reset(&mut self, seed: u64) -> Result<JointObservation>;

    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;

    /// Score an episode starts from before any reward is collected. Episode
    /// totals reported by evaluation are `baseline + Σ r`.
    fn episode_baseline(&self) -> f64 {
        0.0
    }

    /// Changes the episode length used by subsequent resets.
    fn set_horizon(&mut self, _t_max: usize) {}
}
