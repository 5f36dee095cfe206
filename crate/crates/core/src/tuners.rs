//! Black-box tuners sharing one result type: CMA-ES, uniform random search,
//! greedy coordinate search and the trained RL policy.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pipeline::{PhotoPipeline, PipelineParams, NUM_PARAMS};
use crate::rewards::{GoalContext, Task, TaskKind};
use crate::rl::{rollout_episode, ActionMode, Agent, RolloutOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cmaes,
    Random,
    Greedy,
    Rl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cmaes => "cmaes",
            Method::Random => "random",
            Method::Greedy => "greedy",
            Method::Rl => "rl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub params: PipelineParams,
    /// PSNR in dB (finishing) or style score (stylization).
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub method: String,
    pub objective: TaskKind,
    pub best_params: PipelineParams,
    pub best_value: f64,
    pub trajectory: Vec<QueryRecord>,
    pub query_count: u64,
    pub wall_time: f64,
}

impl TuneResult {
    fn utility(&self, value: f64) -> f64 {
        match self.objective {
            TaskKind::Finishing => value,
            TaskKind::Stylization => -value,
        }
    }

    /// Best record among the first `k` queries.
    pub fn best_within(&self, k: usize) -> Option<&QueryRecord> {
        self.trajectory.iter().take(k).reduce(|a, b| {
            if self.utility(b.value) > self.utility(a.value) {
                b
            } else {
                a
            }
        })
    }

    /// Best-so-far value after each query.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trajectory.len());
        let mut best: Option<f64> = None;
        for q in &self.trajectory {
            let b = match best {
                Some(b) if self.utility(b) >= self.utility(q.value) => b,
                _ => q.value,
            };
            best = Some(b);
            out.push(b);
        }
        out
    }
}

/// Scores renders against a goal and accumulates the trajectory.
pub(crate) struct Recorder<'a> {
    ctx: GoalContext<'a>,
    kind: TaskKind,
    trajectory: Vec<QueryRecord>,
    best: Option<(usize, f64)>,
    start: Instant,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(task: &'a Task, goal: &'a Image) -> Result<Self> {
        Ok(Self {
            ctx: task.with_goal(goal)?,
            kind: task.kind(),
            trajectory: Vec::new(),
            best: None,
            start: Instant::now(),
        })
    }

    /// Returns the utility of the render (larger is better).
    pub(crate) fn record(&mut self, params: PipelineParams, render: &Image) -> Result<f64> {
        let value = self.ctx.value(render)?;
        let u = self.ctx.utility(value);
        if !u.is_finite() {
            return Err(Error::NonFinite(format!("objective value {value}")));
        }
        if self.best.is_none_or(|(_, b)| u > b) {
            self.best = Some((self.trajectory.len(), u));
        }
        self.trajectory.push(QueryRecord { params, value });
        Ok(u)
    }

    pub(crate) fn finish(self, method: &str) -> Result<TuneResult> {
        Ok(self.finish_indexed(method)?.1)
    }

    /// The result plus the trajectory index of its best query.
    pub(crate) fn finish_indexed(self, method: &str) -> Result<(usize, TuneResult)> {
        let (i, _) = self.best.ok_or_else(|| Error::State("no queries were made".into()))?;
        let best = &self.trajectory[i];
        let result = TuneResult {
            method: method.to_string(),
            objective: self.kind,
            best_params: best.params,
            best_value: best.value,
            query_count: self.trajectory.len() as u64,
            trajectory: self.trajectory,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        Ok((i, result))
    }
}

// ---------------------------------------------------------------------------
// CMA-ES
// ---------------------------------------------------------------------------

/// Smallest eigenvalue the covariance is allowed to keep.
pub const MIN_EIGENVALUE: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct Cmaes {
    n: usize,
    lambda: usize,
    mu: usize,
    weights: DVector<f64>,
    mueff: f64,
    cc: f64,
    cs: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    inv_sqrt: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: u64,
    repairs: u64,
}

impl Cmaes {
    /// Minimizer with population `lambda` and `mu = lambda / 2` log-rank weights.
    pub fn new(mean: &[f64], sigma: f64, lambda: usize) -> Result<Self> {
        let n = mean.len();
        if n == 0 || lambda < 2 || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::arg("CMA-ES needs n >= 1, lambda >= 2 and sigma > 0"));
        }
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
        let total: f64 = raw.iter().sum();
        let weights = DVector::from_iterator(mu, raw.iter().map(|w| w / total));
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
        let cs = (mueff + 2.0) / (nf + mueff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(Self {
            n,
            lambda,
            mu,
            weights,
            mueff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
            mean: DVector::from_column_slice(mean),
            sigma,
            cov: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            inv_sqrt: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            repairs: 0,
        })
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Generations whose covariance needed an eigenvalue floor.
    pub fn repairs(&self) -> u64 {
        self.repairs
    }

    /// `max |C_ij − C_ji|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.cov - self.cov.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov.clone()).eigenvalues.min()
    }

    /// Draws one population from `N(mean, σ²C)`.
    pub fn ask(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &self.basis * z.component_mul(&self.scales);
                (&self.mean + self.sigma * y).as_slice().to_vec()
            })
            .collect()
    }

    /// Updates the distribution from one full population; lower fitness is better.
    pub fn tell(&mut self, samples: &[Vec<f64>], fitness: &[f64]) -> Result<()> {
        if samples.len() != self.lambda || fitness.len() != self.lambda {
            return Err(Error::arg(format!(
                "expected {} samples and fitness values, got {} and {}",
                self.lambda,
                samples.len(),
                fitness.len()
            )));
        }
        if samples.iter().any(|s| s.len() != self.n) {
            return Err(Error::arg("sample dimension does not match the mean"));
        }
        if fitness.iter().any(|f| f.is_nan()) {
            return Err(Error::NonFinite("CMA-ES fitness".into()));
        }
        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
        let old = self.mean.clone();
        let steps: Vec<DVector<f64>> = order[..self.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&samples[i]) - &old) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.n);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w += *w * y;
        }
        self.mean = &old + self.sigma * &y_w;

        self.generation += 1;
        let cs = self.cs;
        self.p_sigma = (1.0 - cs) * &self.p_sigma + (cs * (2.0 - cs) * self.mueff).sqrt() * (&self.inv_sqrt * &y_w);
        let ps_norm = self.p_sigma.norm();
        let denom = (1.0 - (1.0 - cs).powi(2 * self.generation as i32)).sqrt();
        let hsig = ps_norm / denom / self.chi_n < 1.4 + 2.0 / (self.n as f64 + 1.0);
        let cc = self.cc;
        self.p_c *= 1.0 - cc;
        if hsig {
            self.p_c += (cc * (2.0 - cc) * self.mueff).sqrt() * &y_w;
        }
        let mut rank_mu = DMatrix::zeros(self.n, self.n);
        for (w, y) in self.weights.iter().zip(&steps) {
            rank_mu += *w * y * y.transpose();
        }
        let mut rank_one = &self.p_c * self.p_c.transpose();
        if !hsig {
            rank_one += cc * (2.0 - cc) * &self.cov;
        }
        self.cov = (1.0 - self.c1 - self.cmu) * &self.cov + self.c1 * rank_one + self.cmu * rank_mu;
        self.sigma *= ((cs / self.damps) * (ps_norm / self.chi_n - 1.0)).exp();
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::NonFinite(format!("CMA-ES step size {}", self.sigma)));
        }
        self.refresh_eigen()
    }

    /// Symmetrizes C, floors its spectrum and caches `B`, `D` and `C^{-1/2}`.
    fn refresh_eigen(&mut self) -> Result<()> {
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(self.cov.clone());
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CMA-ES covariance".into()));
        }
        let mut values = eig.eigenvalues.clone();
        if values.min() < MIN_EIGENVALUE {
            self.repairs += 1;
            values.iter_mut().for_each(|v| *v = v.max(MIN_EIGENVALUE));
            let c = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
            self.cov = (&c + c.transpose()) * 0.5;
        }
        self.scales = values.map(f64::sqrt);
        self.inv_sqrt =
            &eig.eigenvectors * DMatrix::from_diagonal(&self.scales.map(|s| 1.0 / s)) * eig.eigenvectors.transpose();
        self.basis = eig.eigenvectors;
        Ok(())
    }
}

/// Runs CMA-ES on `f` until `max_evals` evaluations or `f <= target`.
/// Returns the best point, its value and the evaluations used.
pub fn minimize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    sigma0: f64,
    lambda: usize,
    max_evals: usize,
    target: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, f64, usize)> {
    let mut es = Cmaes::new(x0, sigma0, lambda)?;
    let mut best = (x0.to_vec(), f64::INFINITY);
    let mut evals = 0;
    while evals + lambda <= max_evals {
        let pop = es.ask(rng);
        let fit: Vec<f64> = pop.iter().map(|x| f(x)).collect();
        evals += lambda;
        for (x, &v) in pop.iter().zip(&fit) {
            if v < best.1 {
                best = (x.clone(), v);
            }
        }
        if best.1 <= target {
            break;
        }
        es.tell(&pop, &fit)?;
    }
    Ok((best.0, best.1, evals))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaesOptions {
    pub sigma0: f64,
    pub population: usize,
}

impl Default for CmaesOptions {
    fn default() -> Self {
        Self {
            sigma0: 0.15,
            population: 16,
        }
    }
}

fn clamp_params(x: &[f64]) -> Result<PipelineParams> {
    PipelineParams::from_slice(x)
}

/// CMA-ES from the neutral parameters. Candidates are clamped to `[-1, 1]`
/// for rendering while the unclamped samples drive the update. The last
/// generation is cut short so exactly `budget` renders are made.
pub fn tune_cmaes(
    input: &Image,
    goal: &Image,
    pipeline: &dyn PhotoPipeline,
    task: &Task,
    budget: usize,
    opts: &CmaesOptions,
    rng: &mut impl Rng,
) -> Result<TuneResult> {
    if budget < opts.population {
        return Err(Error::arg(format!(
            "CMA-ES budget {budget} is smaller than one generation ({})",
            opts.population
        )));
    }
    let mut es = Cmaes::new(&[0.0; NUM_PARAMS], opts.sigma0, opts.population)?;
    let mut rec = Recorder::new(task, goal)?;
    let mut used = 0;
    while used < budget {
        let pop = es.ask(rng);
        let take = (budget - used).min(pop.len());
        let mut fit = Vec::with_capacity(take);
        for x in &pop[..take] {
            let p = clamp_params(x)?;
            let render = pipeline.render(input, &p)?;
            fit.push(-rec.record(p, &render)?);
        }
        used += take;
        if take == pop.len() {
            es.tell(&pop, &fit)?;
            log::debug!("cmaes generation {}: sigma {:.4}", es.generation(), es.sigma());
        }
    }
    rec.finish(Method::Cmaes.as_str())
}

// ---------------------------------------------------------------------------
// Random and greedy search
// ---------------------------------------------------------------------------

/// Evaluates `budget` parameter sets drawn from `sample`.
pub fn tune_random_with(
    input: &Image,
    goal: &Image,
    pipeline: &dyn PhotoPipeline,
    task: &Task,
    budget: usize,
    sample: &mut dyn FnMut() -> PipelineParams,
) -> Result<TuneResult> {
    if budget == 0 {
        return Err(Error::arg("random search budget must be at least 1"));
    }
    let mut rec = Recorder::new(task, goal)?;
    for _ in 0..budget {
        let p = sample();
        let render = pipeline.render(input, &p)?;
        rec.record(p, &render)?;
    }
    rec.finish(Method::Random.as_str())
}

/// Uniform random search over `[-1, 1]^9`.
pub fn tune_random(
    input: &Image,
    goal: &Image,
    pipeline: &dyn PhotoPipeline,
    task: &Task,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<TuneResult> {
    let mut sample = || {
        let v: [f64; NUM_PARAMS] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        PipelineParams::new(v).expect("finite sample")
    };
    tune_random_with(input, goal, pipeline, task, budget, &mut sample)
}

pub const GREEDY_MIN_BUDGET: usize = 18;
const GREEDY_GRID: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

/// Cyclic coordinate search from the neutral parameters. Each coordinate is
/// line-searched over `current + step·{−1, −½, 0, ½, 1}` (clamped) and set to
/// the best grid point; `step` starts at 0.5 and halves after every cycle.
pub fn tune_greedy(
    input: &Image,
    goal: &Image,
    pipeline: &dyn PhotoPipeline,
    task: &Task,
    budget: usize,
) -> Result<TuneResult> {
    if budget < GREEDY_MIN_BUDGET {
        return Err(Error::arg(format!(
            "greedy search budget must be at least {GREEDY_MIN_BUDGET}"
        )));
    }
    let mut rec = Recorder::new(task, goal)?;
    let mut current = [0.0; NUM_PARAMS];
    let mut step = 0.5;
    let mut used = 0;
    'outer: loop {
        for k in 0..NUM_PARAMS {
            let mut best: Option<(f64, f64)> = None;
            for off in GREEDY_GRID {
                if used == budget {
                    break 'outer;
                }
                let mut x = current;
                x[k] = (current[k] + step * off).clamp(-1.0, 1.0);
                let p = PipelineParams::new(x)?;
                let u = rec.record(p, &pipeline.render(input, &p)?)?;
                used += 1;
                // ties keep the current value
                if best.is_none_or(|(_, b)| u > b || (u == b && off == 0.0)) {
                    best = Some((x[k], u));
                }
            }
            if let Some((v, _)) = best {
                current[k] = v;
            }
        }
        step *= 0.5;
    }
    rec.finish(Method::Greedy.as_str())
}

/// Noise-free rollout of a trained policy; at most `max_queries` renders.
pub fn tune_rl(
    agent: &Agent,
    input: &Image,
    goal: &Image,
    pipeline: &dyn PhotoPipeline,
    task: &Task,
    max_queries: usize,
) -> Result<TuneResult> {
    if max_queries == 0 || max_queries > crate::features::HISTORY_LEN {
        return Err(Error::arg(format!(
            "RL query budget must be in 1..={}",
            crate::features::HISTORY_LEN
        )));
    }
    let opts = RolloutOptions {
        mode: ActionMode::Greedy,
        max_steps: max_queries,
        record_transitions: false,
    };
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    Ok(rollout_episode(agent, input, goal, pipeline, task, &opts, &mut rng)?.result)
}
