//! Goal-conditioned TD3: replay buffer, twin critics with target networks,
//! delayed policy updates, episodic rollouts and the training loop.

mod agent;
mod env;
mod train;

pub use agent::{ActionMode, Agent, Counters, UpdateOutcome};
pub use env::{rollout_episode, Rollout, RolloutOptions};
pub use train::{evaluate, train, LogRecord, TrainOptions, TrainReport};

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Observation;
use crate::pipeline::PipelineParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TD3Config {
    pub gamma: f64,
    pub ema_rho: f64,
    pub explore_sigma: f64,
    pub target_noise_sigma: f64,
    pub target_noise_clip: f64,
    pub policy_delay: u64,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_q: f64,
    pub max_steps: usize,
    pub buffer_capacity: usize,
    pub warmup_random_steps: u64,
    pub intensity_bounds: (f64, f64),
    pub action_bounds: (f64, f64),
    /// Width of the three hidden layers of the policy and both critics.
    pub hidden_width: usize,
    /// Gradient updates per environment step once warmup is over.
    pub updates_per_step: f64,
}

impl Default for TD3Config {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            ema_rho: 0.99,
            explore_sigma: 0.1,
            target_noise_sigma: 0.2,
            target_noise_clip: 0.5,
            policy_delay: 2,
            batch_size: 64,
            lr_policy: 1e-4,
            lr_q: 2e-4,
            max_steps: 10,
            buffer_capacity: 100_000,
            warmup_random_steps: 1000,
            intensity_bounds: (0.02, 0.98),
            action_bounds: (-1.0, 1.0),
            hidden_width: 512,
            updates_per_step: 1.0,
        }
    }
}

impl TD3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(format!("TD3 config: {m}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_rho) {
            return bad("ema_rho must be in [0, 1)");
        }
        if !(self.explore_sigma >= 0.0 && self.target_noise_sigma >= 0.0 && self.target_noise_clip >= 0.0) {
            return bad("noise parameters must be nonnegative");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be >= 1");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.max_steps == 0 || self.hidden_width == 0 {
            return bad("batch_size, buffer_capacity, max_steps and hidden_width must be positive");
        }
        if self.max_steps > crate::features::HISTORY_LEN {
            return bad("max_steps cannot exceed the history length");
        }
        let (lo, hi) = self.action_bounds;
        if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo >= hi {
            return bad("action_bounds must be an ordered sub-interval of [-1, 1]");
        }
        let (lo, hi) = self.intensity_bounds;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return bad("intensity_bounds must be an ordered sub-interval of [0, 1]");
        }
        if !(self.lr_policy > 0.0 && self.lr_q > 0.0 && self.updates_per_step >= 0.0) {
            return bad("learning rates must be positive and updates_per_step nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: PipelineParams,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

/// Fixed-capacity ring buffer; the oldest transition is evicted first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Oldest first.
    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }
}

/// `y = r + γ(1−d)·min(q1, q2)`; terminal transitions return `r` exactly.
pub fn td_target(reward: f64, done: bool, q1_targ: f64, q2_targ: f64, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q1_targ.min(q2_targ)
    }
}

/// The batch that produced a non-finite loss, for post-mortem inspection.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BatchDump {
    pub update: u64,
    pub indices: Vec<usize>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub targets: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}
