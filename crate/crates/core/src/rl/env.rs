use rand::Rng;

use super::{ActionMode, Agent, Transition};
use crate::error::Result;
use crate::features::{to_policy_res, History, PYRAMID_LEVELS};
use crate::image::{laplacian_pyramid, Image};
use crate::pipeline::PhotoPipeline;
use crate::rewards::Task;
use crate::stats::psnr;
use crate::tuners::{Recorder, TuneResult};

#[derive(Clone, Copy, Debug)]
pub struct RolloutOptions {
    pub mode: ActionMode,
    pub max_steps: usize,
    /// Build transitions (and rewards) for the replay buffer.
    pub record_transitions: bool,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    pub result: TuneResult,
    /// The last render left the intensity bounds; its transition was dropped.
    pub aborted: bool,
    /// Renders that stayed within bounds.
    pub accepted_steps: usize,
    /// PSNR of the last accepted render (the input if none) against the goal.
    pub final_psnr_db: f64,
    /// PSNR of the query the tuner reports as best.
    pub best_psnr_db: f64,
}

/// Runs one episode. Every action is a full parameter set applied to the
/// original `input`; the policy sees policy-resolution copies while renders
/// and the recorded trajectory use the resolution of `input`.
pub fn rollout_episode(
    agent: &Agent,
    input: &Image,
    goal: &Image,
    pipeline: &dyn PhotoPipeline,
    task: &Task,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let mut recorder = Recorder::new(task, goal)?;
    let goal_pol = to_policy_res(goal)?;
    let reward_ctx = if opts.record_transitions {
        Some(task.with_goal(&goal_pol)?)
    } else {
        None
    };
    let pyr_goal = laplacian_pyramid(&goal_pol, PYRAMID_LEVELS)?;
    let mut cur_pol = to_policy_res(input)?;
    let mut hist = History::new();
    let enc = &agent.encoder;
    let mut obs = enc.observe_prepared(
        &cur_pol,
        &goal_pol,
        &laplacian_pyramid(&cur_pol, PYRAMID_LEVELS)?,
        &pyr_goal,
        &hist,
    )?;
    let (lo, hi) = agent.cfg.intensity_bounds;
    let mut transitions = Vec::new();
    let mut aborted = false;
    let mut accepted = 0;
    let mut last_render: Option<Image> = None;
    let mut psnrs = Vec::with_capacity(opts.max_steps);
    for t in 0..opts.max_steps {
        let s = agent.state(&obs)?;
        let action = agent.select_action(&s, opts.mode, rng)?;
        let render = pipeline.render(input, &action)?;
        recorder.record(action, &render)?;
        psnrs.push(psnr(&render, goal)?);
        let m = render.mean_intensity();
        if m < lo || m > hi {
            aborted = true;
            break;
        }
        let next_pol = to_policy_res(&render)?;
        hist.push(action, next_pol.rms_distance(&goal_pol)?)?;
        let next_obs = enc.observe_prepared(
            &next_pol,
            &goal_pol,
            &laplacian_pyramid(&next_pol, PYRAMID_LEVELS)?,
            &pyr_goal,
            &hist,
        )?;
        if let Some(ctx) = &reward_ctx {
            transitions.push(Transition {
                obs,
                action,
                reward: ctx.reward(&cur_pol, &next_pol)?,
                next_obs: next_obs.clone(),
                done: t + 1 == opts.max_steps,
            });
        }
        accepted += 1;
        obs = next_obs;
        cur_pol = next_pol;
        last_render = Some(render);
    }
    let final_psnr_db = psnr(last_render.as_ref().unwrap_or(input), goal)?;
    let (best_index, result) = recorder.finish_indexed("rl")?;
    Ok(Rollout {
        transitions,
        result,
        aborted,
        accepted_steps: accepted,
        final_psnr_db,
        best_psnr_db: psnrs[best_index],
    })
}
