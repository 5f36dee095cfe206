use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rollout_episode, ActionMode, Agent, ReplayBuffer, RolloutOptions, UpdateOutcome};
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::features::to_policy_res;
use crate::image::Image;
use crate::pipeline::PhotoPipeline;
use crate::rewards::Task;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Episodes to run in this call (on top of any already in the agent's counters).
    pub episodes: u64,
    /// Evaluate every this many episodes; 0 disables evaluation.
    pub eval_every: u64,
    /// Stop as soon as an evaluation reaches this mean PSNR.
    pub stop_at_eval_psnr: Option<f64>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            episodes: 1000,
            eval_every: 100,
            stop_at_eval_psnr: None,
            seed: 0,
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: u64,
    pub steps: usize,
    pub final_psnr_db: f64,
    pub q1_loss: Option<f64>,
    pub q2_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub buffer_size: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_psnr_db: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<LogRecord>,
    pub last_eval_psnr_db: Option<f64>,
    pub stopped_early: bool,
}

fn policy_pairs(pairs: &[ScenePair]) -> Result<Vec<(Image, Image)>> {
    pairs
        .iter()
        .map(|p| Ok((to_policy_res(&p.input)?, to_policy_res(&p.goal)?)))
        .collect()
}

/// Mean PSNR of the RL tuner's reported best query over noise-free rollouts.
pub fn evaluate(agent: &Agent, pairs: &[(Image, Image)], pipeline: &dyn PhotoPipeline, task: &Task) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::arg("no evaluation pairs"));
    }
    let opts = RolloutOptions {
        mode: ActionMode::Greedy,
        max_steps: agent.cfg.max_steps,
        record_transitions: false,
    };
    // greedy rollouts draw nothing from the rng
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut total = 0.0;
    for (input, goal) in pairs {
        total += rollout_episode(agent, input, goal, pipeline, task, &opts, &mut rng)?.best_psnr_db;
    }
    Ok(total / pairs.len() as f64)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Uniform-random warmup, then exploration rollouts interleaved with TD3
/// updates. Deterministic given `opts.seed` and the agent's counters; every
/// finished episode is passed to `on_record` before the next starts.
#[allow(clippy::too_many_arguments)]
pub fn train(
    agent: &mut Agent,
    buffer: &mut ReplayBuffer,
    train_pairs: &[ScenePair],
    eval_pairs: &[ScenePair],
    pipeline: &dyn PhotoPipeline,
    task: &Task,
    opts: &TrainOptions,
    on_record: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainReport> {
    if train_pairs.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let train_set = policy_pairs(train_pairs)?;
    let eval_set = policy_pairs(eval_pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(agent.counters.episodes);
    let mut report = TrainReport::default();
    let mut credit = 0.0;
    for _ in 0..opts.episodes {
        let (input, goal) = &train_set[rng.gen_range(0..train_set.len())];
        let mode = if agent.counters.env_steps < agent.cfg.warmup_random_steps {
            ActionMode::Random
        } else {
            ActionMode::Explore
        };
        let ro = RolloutOptions {
            mode,
            max_steps: agent.cfg.max_steps,
            record_transitions: true,
        };
        let rollout = rollout_episode(agent, input, goal, pipeline, task, &ro, &mut rng)?;
        let steps = rollout.result.query_count as usize;
        for t in rollout.transitions {
            buffer.push(t);
        }
        agent.counters.env_steps += steps as u64;
        agent.counters.aborted_transitions += rollout.aborted as u64;

        let (mut q1, mut q2, mut pl) = (Vec::new(), Vec::new(), Vec::new());
        if agent.counters.env_steps >= agent.cfg.warmup_random_steps {
            credit += steps as f64 * agent.cfg.updates_per_step;
            while credit >= 1.0 {
                credit -= 1.0;
                let step_index = agent.counters.updates;
                match agent.td3_update(buffer, step_index, &mut rng)? {
                    UpdateOutcome::Skipped { .. } => break,
                    UpdateOutcome::Updated {
                        q1_loss,
                        q2_loss,
                        policy_loss,
                    } => {
                        q1.push(q1_loss);
                        q2.push(q2_loss);
                        pl.extend(policy_loss);
                        agent.counters.updates += 1;
                    }
                }
            }
        }
        agent.counters.episodes += 1;

        let mut eval_psnr_db = None;
        if opts.eval_every > 0 && agent.counters.episodes.is_multiple_of(opts.eval_every) && !eval_set.is_empty() {
            let v = evaluate(agent, &eval_set, pipeline, task)?;
            log::info!("episode {}: eval PSNR {v:.2} dB", agent.counters.episodes);
            eval_psnr_db = Some(v);
            report.last_eval_psnr_db = Some(v);
        }
        let record = LogRecord {
            episode: agent.counters.episodes,
            steps,
            final_psnr_db: rollout.final_psnr_db,
            q1_loss: mean(&q1),
            q2_loss: mean(&q2),
            policy_loss: mean(&pl),
            buffer_size: buffer.len(),
            eval_psnr_db,
        };
        on_record(&record)?;
        report.records.push(record);
        if let (Some(target), Some(v)) = (opts.stop_at_eval_psnr, eval_psnr_db) {
            if v >= target {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}
