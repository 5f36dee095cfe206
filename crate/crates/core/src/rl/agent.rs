use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{td_target, BatchDump, ReplayBuffer, TD3Config, Transition};
use crate::error::{Error, Result};
use crate::features::{Observation, StateEncoder, StateVector, OBS_LEN, STATE_LEN};
use crate::nn::{Adam, AdamConfig, Checkpoint, CheckpointWriter, HasParams, Sequential, Tensor};
use crate::pipeline::{PipelineParams, NUM_PARAMS};

const CHECKPOINT_KIND: &str = "phototune-td3";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    /// `μ(s)`
    Greedy,
    /// `clip(μ(s) + N(0, σ_explore))`
    Explore,
    /// `clip(μ_targ(s) + clip(N(0, σ_target), −c, c))`
    Target,
    /// Uniform over the action box (warmup).
    Random,
}

/// Progress counters, persisted with the checkpoint so resumed runs continue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub episodes: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub aborted_transitions: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum UpdateOutcome {
    /// Buffer smaller than one batch; nothing changed.
    Skipped { buffer_len: usize },
    Updated {
        q1_loss: f64,
        q2_loss: f64,
        policy_loss: Option<f64>,
    },
}

/// Policy, twin critics, their target copies, the shared state encoder and
/// one Adam optimizer per trained module.
#[derive(Clone, Debug)]
pub struct Agent {
    pub cfg: TD3Config,
    pub encoder: StateEncoder,
    pub policy: Sequential,
    pub q1: Sequential,
    pub q2: Sequential,
    pub policy_targ: Sequential,
    pub q1_targ: Sequential,
    pub q2_targ: Sequential,
    opt_policy: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_encoder: Adam,
    pub counters: Counters,
}

fn clip_action(v: f64, (lo, hi): (f64, f64)) -> f64 {
    v.clamp(lo, hi)
}

impl Agent {
    pub fn new(cfg: TD3Config, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.hidden_width;
        let encoder = StateEncoder::new(rng);
        let policy = Sequential::mlp(&[STATE_LEN, w, w, w, NUM_PARAMS], true, rng);
        let q1 = Sequential::mlp(&[STATE_LEN + NUM_PARAMS, w, w, w, 1], false, rng);
        let q2 = Sequential::mlp(&[STATE_LEN + NUM_PARAMS, w, w, w, 1], false, rng);
        Ok(Self {
            policy_targ: policy.clone(),
            q1_targ: q1.clone(),
            q2_targ: q2.clone(),
            opt_policy: Adam::new(AdamConfig::with_lr(cfg.lr_policy)),
            opt_q1: Adam::new(AdamConfig::with_lr(cfg.lr_q)),
            opt_q2: Adam::new(AdamConfig::with_lr(cfg.lr_q)),
            opt_encoder: Adam::new(AdamConfig::with_lr(cfg.lr_q)),
            cfg,
            encoder,
            policy,
            q1,
            q2,
            counters: Counters::default(),
        })
    }

    pub fn state(&self, obs: &Observation) -> Result<StateVector> {
        self.encoder.state(obs)
    }

    /// Target-smoothing noise: `clip(N(0, σ_target), −c, c)` per component.
    pub fn target_noise(&self, rng: &mut impl Rng) -> [f64; NUM_PARAMS] {
        let c = self.cfg.target_noise_clip;
        let sigma = self.cfg.target_noise_sigma;
        std::array::from_fn(|_| {
            if sigma == 0.0 {
                0.0
            } else {
                Normal::new(0.0, sigma).expect("sigma >= 0").sample(rng).clamp(-c, c)
            }
        })
    }

    fn explore_noise(&self, rng: &mut impl Rng) -> [f64; NUM_PARAMS] {
        let sigma = self.cfg.explore_sigma;
        std::array::from_fn(|_| {
            if sigma == 0.0 {
                0.0
            } else {
                Normal::new(0.0, sigma).expect("sigma >= 0").sample(rng)
            }
        })
    }

    pub fn select_action(&self, state: &StateVector, mode: ActionMode, rng: &mut impl Rng) -> Result<PipelineParams> {
        let bounds = self.cfg.action_bounds;
        let x = Tensor::row(state.as_slice().to_vec());
        let raw: Vec<f64> = match mode {
            ActionMode::Random => (0..NUM_PARAMS).map(|_| rng.gen_range(bounds.0..=bounds.1)).collect(),
            ActionMode::Greedy => self.policy.infer(&x)?.into_data(),
            ActionMode::Explore => {
                let mu = self.policy.infer(&x)?.into_data();
                let n = self.explore_noise(rng);
                mu.iter().zip(n).map(|(m, e)| m + e).collect()
            }
            ActionMode::Target => {
                let mu = self.policy_targ.infer(&x)?.into_data();
                let n = self.target_noise(rng);
                mu.iter().zip(n).map(|(m, e)| m + e).collect()
            }
        };
        let clipped: Vec<f64> = raw.into_iter().map(|v| clip_action(v, bounds)).collect();
        PipelineParams::from_slice(&clipped)
    }

    fn stack_obs<'a>(items: impl Iterator<Item = &'a Observation>, n: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(n * OBS_LEN);
        for o in items {
            if o.0.len() != OBS_LEN {
                return Err(Error::shape("observation", &[OBS_LEN], &[o.0.len()]));
            }
            data.extend_from_slice(&o.0);
        }
        Tensor::new(vec![n, OBS_LEN], data)
    }

    /// `y` for each transition, using target-policy smoothing and the
    /// twin-target minimum. Next states go through the online encoder.
    pub fn compute_td_targets(&self, batch: &[&Transition], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::arg("empty batch"));
        }
        let next = Self::stack_obs(batch.iter().map(|t| &t.next_obs), n)?;
        let s_next = self.encoder.infer(&next)?;
        let mut a_next = self.policy_targ.infer(&s_next)?;
        for row in a_next.data_mut().chunks_exact_mut(NUM_PARAMS) {
            let noise = self.target_noise(rng);
            for (a, e) in row.iter_mut().zip(noise) {
                *a = clip_action(*a + e, self.cfg.action_bounds);
            }
        }
        let x = Tensor::concat_features(&[&s_next, &a_next])?;
        let q1 = self.q1_targ.infer(&x)?;
        let q2 = self.q2_targ.infer(&x)?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| td_target(t.reward, t.done, q1.data()[i], q2.data()[i], self.cfg.gamma))
            .collect())
    }

    fn halted(&self, step_index: u64, reason: String, dump: BatchDump) -> Error {
        Error::TrainingHalted {
            update: step_index,
            reason,
            dump: Box::new(dump),
        }
    }

    /// One TD3 step. Both critics (and the encoder projections) always
    /// train; the policy trains and the targets move only when
    /// `step_index % policy_delay == 0`.
    pub fn td3_update(&mut self, buffer: &ReplayBuffer, step_index: u64, rng: &mut impl Rng) -> Result<UpdateOutcome> {
        let bs = self.cfg.batch_size;
        if buffer.len() < bs {
            log::warn!("td3_update skipped: buffer holds {} < batch {}", buffer.len(), bs);
            return Ok(UpdateOutcome::Skipped {
                buffer_len: buffer.len(),
            });
        }
        let indices = buffer.sample_indices(bs, rng);
        let batch: Vec<&Transition> = indices
            .iter()
            .map(|&i| buffer.get(i).expect("sampled in range"))
            .collect();
        let y = self.compute_td_targets(&batch, rng)?;

        let obs = Self::stack_obs(batch.iter().map(|t| &t.obs), bs)?;
        let mut actions = Vec::with_capacity(bs * NUM_PARAMS);
        for t in &batch {
            actions.extend_from_slice(t.action.values());
        }
        let actions = Tensor::new(vec![bs, NUM_PARAMS], actions)?;

        self.encoder.zero_grad();
        self.q1.zero_grad();
        self.q2.zero_grad();
        let s = self.encoder.forward(&obs)?;
        let x = Tensor::concat_features(&[&s, &actions])?;
        let q1 = self.q1.forward(&x)?;
        let q2 = self.q2.forward(&x)?;
        let mse = |q: &Tensor| q.data().iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / bs as f64;
        let (q1_loss, q2_loss) = (mse(&q1), mse(&q2));
        let dump = || BatchDump {
            update: step_index,
            indices: indices.clone(),
            actions: batch.iter().map(|t| t.action.values().to_vec()).collect(),
            rewards: batch.iter().map(|t| t.reward).collect(),
            dones: batch.iter().map(|t| t.done).collect(),
            targets: y.clone(),
            q1: q1.data().to_vec(),
            q2: q2.data().to_vec(),
        };
        if !q1_loss.is_finite() || !q2_loss.is_finite() {
            return Err(self.halted(step_index, format!("critic loss q1={q1_loss} q2={q2_loss}"), dump()));
        }
        let grad = |q: &Tensor| -> Result<Tensor> {
            let g = q
                .data()
                .iter()
                .zip(&y)
                .map(|(a, b)| 2.0 * (a - b) / bs as f64)
                .collect();
            Tensor::new(vec![bs, 1], g)
        };
        let dx1 = self.q1.backward(&grad(&q1)?)?;
        let dx2 = self.q2.backward(&grad(&q2)?)?;
        let mut ds = dx1.split_features(&[STATE_LEN, NUM_PARAMS])?.swap_remove(0);
        let ds2 = dx2.split_features(&[STATE_LEN, NUM_PARAMS])?.swap_remove(0);
        for (a, b) in ds.data_mut().iter_mut().zip(ds2.data()) {
            *a += b;
        }
        self.encoder.backward(&ds)?;
        let stepped = self
            .opt_q1
            .step(&mut self.q1)
            .and_then(|_| self.opt_q2.step(&mut self.q2))
            .and_then(|_| self.opt_encoder.step(&mut self.encoder));
        if let Err(e) = stepped {
            return Err(self.halted(step_index, format!("critic step: {e}"), dump()));
        }

        let mut policy_loss = None;
        if step_index.is_multiple_of(self.cfg.policy_delay) {
            let s = self.encoder.infer(&obs)?;
            self.policy.zero_grad();
            self.q1.zero_grad();
            let a = self.policy.forward(&s)?;
            let x = Tensor::concat_features(&[&s, &a])?;
            let q = self.q1.forward(&x)?;
            let loss = -q.data().iter().sum::<f64>() / bs as f64;
            if !loss.is_finite() {
                return Err(self.halted(step_index, format!("policy loss {loss}"), dump()));
            }
            let dq = Tensor::new(vec![bs, 1], vec![-1.0 / bs as f64; bs])?;
            let dx = self.q1.backward(&dq)?;
            let da = dx.split_features(&[STATE_LEN, NUM_PARAMS])?.swap_remove(1);
            self.policy.backward(&da)?;
            // gradients left in Q1 by the policy pass must not leak into the next critic step
            self.q1.zero_grad();
            if let Err(e) = self.opt_policy.step(&mut self.policy) {
                return Err(self.halted(step_index, format!("policy step: {e}"), dump()));
            }
            let rho = self.cfg.ema_rho;
            self.policy_targ.ema_from(&self.policy, rho)?;
            self.q1_targ.ema_from(&self.q1, rho)?;
            self.q2_targ.ema_from(&self.q2, rho)?;
            policy_loss = Some(loss);
        }
        Ok(UpdateOutcome::Updated {
            q1_loss,
            q2_loss,
            policy_loss,
        })
    }

    pub fn to_checkpoint(&self) -> Result<CheckpointWriter> {
        let mut w = CheckpointWriter::new();
        w.set_meta("kind", CHECKPOINT_KIND.into());
        w.set_meta("td3_config", serde_json::to_value(&self.cfg)?);
        w.set_meta("counters", serde_json::to_value(self.counters)?);
        self.encoder.save_into(&mut w, "encoder")?;
        self.policy.save_into(&mut w, "policy")?;
        self.q1.save_into(&mut w, "q1")?;
        self.q2.save_into(&mut w, "q2")?;
        self.policy_targ.save_into(&mut w, "policy_targ")?;
        self.q1_targ.save_into(&mut w, "q1_targ")?;
        self.q2_targ.save_into(&mut w, "q2_targ")?;
        self.opt_policy.save_into(&mut w, "opt.policy")?;
        self.opt_q1.save_into(&mut w, "opt.q1")?;
        self.opt_q2.save_into(&mut w, "opt.q2")?;
        self.opt_encoder.save_into(&mut w, "opt.encoder")?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint("not a TD3 agent checkpoint".into()));
        }
        let cfg: TD3Config = serde_json::from_value(
            ck.meta("td3_config")
                .ok_or_else(|| Error::Checkpoint("missing td3_config".into()))?
                .clone(),
        )?;
        let counters: Counters = serde_json::from_value(ck.meta("counters").cloned().unwrap_or_default())?;
        let mut a = Self::new(cfg, &mut rand::rngs::mock::StepRng::new(0, 0))?;
        a.encoder.load_from(ck, "encoder")?;
        a.policy.load_from(ck, "policy")?;
        a.q1.load_from(ck, "q1")?;
        a.q2.load_from(ck, "q2")?;
        a.policy_targ.load_from(ck, "policy_targ")?;
        a.q1_targ.load_from(ck, "q1_targ")?;
        a.q2_targ.load_from(ck, "q2_targ")?;
        a.opt_policy = Adam::load_from(ck, "opt.policy", &a.policy)?;
        a.opt_q1 = Adam::load_from(ck, "opt.q1", &a.q1)?;
        a.opt_q2 = Adam::load_from(ck, "opt.q2", &a.q2)?;
        a.opt_encoder = Adam::load_from(ck, "opt.encoder", &a.encoder)?;
        a.counters = counters;
        Ok(a)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::StateVector;
    use crate::nn::{grad_check, Differentiable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> TD3Config {
        TD3Config {
            hidden_width: 16,
            batch_size: 4,
            ..Default::default()
        }
    }

    fn random_obs(rng: &mut impl Rng) -> Observation {
        Observation((0..OBS_LEN).map(|_| rng.gen_range(0.0..1.0) * 0.1).collect())
    }

    fn random_state(agent: &Agent, rng: &mut impl Rng) -> StateVector {
        agent.state(&random_obs(rng)).unwrap()
    }

    fn filled_buffer(n: usize, rng: &mut impl Rng) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(100);
        for i in 0..n {
            b.push(Transition {
                obs: random_obs(rng),
                action: PipelineParams::new(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).unwrap(),
                reward: rng.gen_range(-1.0..1.0),
                next_obs: random_obs(rng),
                done: i % 3 == 0,
            });
        }
        b
    }

    #[test]
    fn actions_stay_in_bounds_for_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = small_cfg();
        cfg.explore_sigma = 5.0;
        cfg.target_noise_sigma = 5.0;
        let agent = Agent::new(cfg, &mut rng).unwrap();
        let s = random_state(&agent, &mut rng);
        for mode in [
            ActionMode::Greedy,
            ActionMode::Explore,
            ActionMode::Target,
            ActionMode::Random,
        ] {
            for _ in 0..200 {
                let a = agent.select_action(&s, mode, &mut rng).unwrap();
                assert!(a.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn zero_sigma_explore_equals_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = small_cfg();
        cfg.explore_sigma = 0.0;
        let agent = Agent::new(cfg, &mut rng).unwrap();
        let s = random_state(&agent, &mut rng);
        assert_eq!(
            agent.select_action(&s, ActionMode::Explore, &mut rng).unwrap(),
            agent.select_action(&s, ActionMode::Greedy, &mut rng).unwrap()
        );
    }

    #[test]
    fn target_noise_is_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = small_cfg();
        cfg.target_noise_sigma = 3.0;
        let agent = Agent::new(cfg, &mut rng).unwrap();
        for _ in 0..1000 {
            assert!(agent.target_noise(&mut rng).iter().all(|e| e.abs() <= 0.5));
        }
    }

    #[test]
    fn td_targets_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = small_cfg();
        cfg.target_noise_sigma = 0.0;
        let agent = Agent::new(cfg, &mut rng).unwrap();
        let buf = filled_buffer(6, &mut rng);
        let batch: Vec<&Transition> = buf.iter().collect();
        let y = agent.compute_td_targets(&batch, &mut rng).unwrap();
        for (t, yi) in batch.iter().zip(&y) {
            let s = agent.state(&t.next_obs).unwrap();
            let a = agent.policy_targ.infer(&Tensor::row(s.as_slice().to_vec())).unwrap();
            let mut x = s.as_slice().to_vec();
            x.extend_from_slice(a.data());
            let q1 = agent.q1_targ.infer(&Tensor::row(x.clone())).unwrap().data()[0];
            let q2 = agent.q2_targ.infer(&Tensor::row(x)).unwrap().data()[0];
            let expect = if t.done { t.reward } else { t.reward + 0.9 * q1.min(q2) };
            assert!((yi - expect).abs() < 1e-12);
            if t.done {
                assert_eq!(*yi, t.reward);
            }
        }
    }

    #[test]
    fn update_skips_on_small_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut agent = Agent::new(small_cfg(), &mut rng).unwrap();
        let buf = filled_buffer(3, &mut rng);
        let before = agent.q1.flat_values();
        assert_eq!(
            agent.td3_update(&buf, 0, &mut rng).unwrap(),
            UpdateOutcome::Skipped { buffer_len: 3 }
        );
        assert_eq!(agent.q1.flat_values(), before);
    }

    #[test]
    fn policy_delay_schedule_and_target_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut agent = Agent::new(small_cfg(), &mut rng).unwrap();
        let buf = filled_buffer(10, &mut rng);
        let pol = agent.policy.flat_values();
        let targ = agent.q1_targ.flat_values();
        match agent.td3_update(&buf, 1, &mut rng).unwrap() {
            UpdateOutcome::Updated { policy_loss, .. } => assert!(policy_loss.is_none()),
            o => panic!("{o:?}"),
        }
        assert_eq!(agent.policy.flat_values(), pol);
        assert_eq!(agent.q1_targ.flat_values(), targ);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        match agent.td3_update(&buf, 2, &mut rng).unwrap() {
            UpdateOutcome::Updated { policy_loss, .. } => assert!(policy_loss.is_some()),
            o => panic!("{o:?}"),
        }
        assert_ne!(agent.policy.flat_values(), pol);
        let online = agent.q1.flat_values();
        assert!(dist(&agent.q1_targ.flat_values(), &online) < dist(&targ, &online));
    }

    #[test]
    fn ema_rho_one_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut agent = Agent::new(small_cfg(), &mut rng).unwrap();
        let other = Sequential::mlp(&[STATE_LEN + NUM_PARAMS, 16, 16, 16, 1], false, &mut rng);
        let before = agent.q1_targ.flat_values();
        agent.q1_targ.ema_from(&other, 1.0).unwrap();
        assert_eq!(agent.q1_targ.flat_values(), before);
    }

    #[test]
    fn critic_loss_matches_hand_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = small_cfg();
        cfg.batch_size = 2;
        cfg.target_noise_sigma = 0.0;
        let mut agent = Agent::new(cfg, &mut rng).unwrap();
        // every sampled row is the same transition
        let t = filled_buffer(1, &mut rng).get(0).unwrap().clone();
        let mut buf = ReplayBuffer::new(2);
        buf.push(t.clone());
        buf.push(t.clone());
        let s = agent.state(&t.obs).unwrap();
        let mut x = s.as_slice().to_vec();
        x.extend_from_slice(t.action.values());
        let q1 = agent.q1.infer(&Tensor::row(x.clone())).unwrap().data()[0];
        let q2 = agent.q2.infer(&Tensor::row(x)).unwrap().data()[0];
        let y = agent.compute_td_targets(&[&t], &mut rng).unwrap()[0];
        match agent.td3_update(&buf, 1, &mut rng).unwrap() {
            UpdateOutcome::Updated { q1_loss, q2_loss, .. } => {
                assert!((q1_loss - (q1 - y).powi(2)).abs() < 1e-12);
                assert!((q2_loss - (q2 - y).powi(2)).abs() < 1e-12);
            }
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn nan_reward_halts_with_dump() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut agent = Agent::new(small_cfg(), &mut rng).unwrap();
        let mut buf = ReplayBuffer::new(8);
        let good = filled_buffer(1, &mut rng).get(0).unwrap().clone();
        for _ in 0..4 {
            let mut t = good.clone();
            t.reward = f64::NAN;
            buf.push(t);
        }
        let before = agent.q1.flat_values();
        match agent.td3_update(&buf, 0, &mut rng) {
            Err(Error::TrainingHalted { dump, .. }) => {
                assert_eq!(dump.indices.len(), 4);
                assert!(dump.rewards.iter().all(|r| r.is_nan()));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(agent.q1.flat_values(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut agent = Agent::new(small_cfg(), &mut rng).unwrap();
        let buf = filled_buffer(10, &mut rng);
        agent.td3_update(&buf, 0, &mut rng).unwrap();
        agent.counters.episodes = 7;
        let ck = Checkpoint::from_bytes(&agent.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let back = Agent::from_checkpoint(&ck).unwrap();
        assert_eq!(back.counters.episodes, 7);
        assert_eq!(back.policy.flat_values(), agent.policy.flat_values());
        assert_eq!(back.q2_targ.flat_values(), agent.q2_targ.flat_values());
        assert_eq!(back.encoder.flat_values(), agent.encoder.flat_values());
        assert_eq!(back.opt_q1.step_count(), 1);
        // continued training is identical from the restored copy
        let mut a = agent.clone();
        let mut b = back;
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        a.td3_update(&buf, 1, &mut r1).unwrap();
        b.td3_update(&buf, 1, &mut r2).unwrap();
        assert_eq!(a.q1.flat_values(), b.q1.flat_values());
    }

    /// Critic loss against fixed targets as a function of critic and
    /// projection parameters.
    struct CriticProbe {
        agent: Agent,
        obs: Tensor,
        actions: Tensor,
        y: Vec<f64>,
    }

    impl CriticProbe {
        fn nq(&self) -> usize {
            self.agent.q1.param_count()
        }
    }

    impl Differentiable for CriticProbe {
        fn dim(&self) -> usize {
            self.nq() + self.agent.encoder.param_count()
        }
        fn get(&self, i: usize) -> f64 {
            if i < self.nq() {
                self.agent.q1.flat_get(i)
            } else {
                self.agent.encoder.flat_get(i - self.nq())
            }
        }
        fn set(&mut self, i: usize, v: f64) {
            let nq = self.nq();
            if i < nq {
                self.agent.q1.flat_set(i, v)
            } else {
                self.agent.encoder.flat_set(i - nq, v)
            }
        }
        fn loss(&mut self) -> Result<f64> {
            let s = self.agent.encoder.infer(&self.obs)?;
            let q = self.agent.q1.infer(&Tensor::concat_features(&[&s, &self.actions])?)?;
            Ok(q.data().iter().zip(&self.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.y.len() as f64)
        }
        fn gradient(&mut self) -> Result<Vec<f64>> {
            let n = self.y.len();
            self.agent.q1.zero_grad();
            self.agent.encoder.zero_grad();
            let s = self.agent.encoder.forward(&self.obs)?;
            let q = self.agent.q1.forward(&Tensor::concat_features(&[&s, &self.actions])?)?;
            let g = q
                .data()
                .iter()
                .zip(&self.y)
                .map(|(a, b)| 2.0 * (a - b) / n as f64)
                .collect();
            let dx = self.agent.q1.backward(&Tensor::new(vec![n, 1], g)?)?;
            self.agent
                .encoder
                .backward(&dx.split_features(&[STATE_LEN, NUM_PARAMS])?[0])?;
            let mut v = self.agent.q1.flat_grads();
            v.extend(self.agent.encoder.flat_grads());
            Ok(v)
        }
    }

    #[test]
    fn critic_and_encoder_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let agent = Agent::new(small_cfg(), &mut rng).unwrap();
        let n = 3;
        let obs: Vec<f64> = (0..n * OBS_LEN).map(|_| rng.gen_range(0.0..0.2)).collect();
        let actions: Vec<f64> = (0..n * NUM_PARAMS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut probe = CriticProbe {
            agent,
            obs: Tensor::new(vec![n, OBS_LEN], obs).unwrap(),
            actions: Tensor::new(vec![n, NUM_PARAMS], actions).unwrap(),
            y: vec![0.3, -0.2, 1.0],
        };
        let err = grad_check(&mut probe, 150, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
