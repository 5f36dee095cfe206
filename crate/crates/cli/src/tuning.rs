use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phototune::image::{encode, resize_bilinear, Format, Image};
use phototune::pipeline::{PhotoPipeline, PipelineParams};
use phototune::rewards::Task;
use phototune::rl::Agent;
use phototune::tuners::{tune_cmaes, tune_greedy, tune_random, tune_rl, QueryRecord, TuneResult};
use phototune::util::write_atomic;

use crate::config::RunConfig;
use crate::runspec::{MethodName, RunSpec};
use crate::UsageError;

/// Shared state for running any tuner on many pairs.
pub struct TuneContext {
    pub cfg: RunConfig,
    pub task: Task,
    pub agent: Option<Agent>,
}

impl TuneContext {
    /// Loads the agent only when some run needs it.
    pub fn new(cfg: &RunConfig, runs: &[RunSpec], checkpoint: Option<&Path>) -> anyhow::Result<Self> {
        let needs_agent = runs.iter().any(|r| r.method == MethodName::Rl);
        let agent = match (needs_agent, checkpoint) {
            (false, _) => None,
            (true, Some(p)) => Some(Agent::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
            (true, None) => return Err(UsageError("method rl requires --checkpoint".into()).into()),
        };
        Ok(Self {
            cfg: cfg.clone(),
            task: cfg.build_task(),
            agent,
        })
    }

    /// Runs one tuner. `stream` selects an independent random stream so each
    /// pair is reproducible on its own.
    pub fn run(
        &self,
        spec: &RunSpec,
        input: &Image,
        goal: &Image,
        goal_params: Option<PipelineParams>,
        pipeline: &dyn PhotoPipeline,
        stream: u64,
    ) -> anyhow::Result<TuneResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        let task = &self.task;
        let r = match spec.method {
            MethodName::Cmaes => tune_cmaes(input, goal, pipeline, task, spec.budget, &self.cfg.cmaes, &mut rng)?,
            MethodName::Random => tune_random(input, goal, pipeline, task, spec.budget, &mut rng)?,
            MethodName::Greedy => tune_greedy(input, goal, pipeline, task, spec.budget)?,
            MethodName::Rl => {
                let agent = self
                    .agent
                    .as_ref()
                    .ok_or_else(|| UsageError("method rl requires --checkpoint".into()))?;
                tune_rl(agent, input, goal, pipeline, task, spec.budget)?
            }
            MethodName::Oracle => {
                let p = goal_params.ok_or_else(|| anyhow::anyhow!("oracle needs recorded goal parameters"))?;
                oracle(input, goal, p, pipeline, task)?
            }
        };
        Ok(r)
    }
}

fn oracle(
    input: &Image,
    goal: &Image,
    params: PipelineParams,
    pipeline: &dyn PhotoPipeline,
    task: &Task,
) -> anyhow::Result<TuneResult> {
    let start = Instant::now();
    let ctx = task.with_goal(goal)?;
    let value = ctx.value(&pipeline.render(input, &params)?)?;
    Ok(TuneResult {
        method: MethodName::Oracle.as_str().into(),
        objective: task.kind(),
        best_params: params,
        best_value: value,
        trajectory: vec![QueryRecord { params, value }],
        query_count: 1,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

const STRIP_HEIGHT: usize = 128;
const STRIP_GAP: usize = 4;
const STRIP_MAX_STEPS: usize = 10;

/// Trajectory entries shown in a strip: all of them up to ten, otherwise
/// evenly spaced ones ending at the last query.
pub fn strip_indices(len: usize) -> Vec<usize> {
    if len <= STRIP_MAX_STEPS {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..STRIP_MAX_STEPS)
        .map(|k| ((k + 1) * len) / STRIP_MAX_STEPS - 1)
        .collect();
    v.dedup();
    v
}

/// Input, selected renders and goal side by side, each scaled to a common height.
pub fn trajectory_strip(
    input: &Image,
    goal: &Image,
    result: &TuneResult,
    pipeline: &dyn PhotoPipeline,
) -> anyhow::Result<Image> {
    let (h, w) = input.dims();
    let th = STRIP_HEIGHT.min(h);
    let tw = ((w * th) as f64 / h as f64).round().max(1.0) as usize;
    let mut tiles = vec![resize_bilinear(input, th, tw)?];
    for i in strip_indices(result.trajectory.len()) {
        let render = pipeline.render(input, &result.trajectory[i].params)?;
        tiles.push(resize_bilinear(&render, th, tw)?);
    }
    tiles.push(resize_bilinear(goal, th, tw)?);
    let total_w = tiles.len() * tw + (tiles.len() - 1) * STRIP_GAP;
    let strip = Image::from_fn(th, total_w, |y, x| {
        let k = x / (tw + STRIP_GAP);
        let xo = x % (tw + STRIP_GAP);
        if xo >= tw {
            [1.0; 3]
        } else {
            tiles[k].pixel(y, xo)
        }
    });
    Ok(strip)
}

pub fn write_png(path: &Path, img: &Image) -> anyhow::Result<()> {
    write_atomic(path, &encode(img, Format::Png)?)?;
    Ok(())
}
