//! State representation for the policy and critics.
//!
//! `s_t = f_d ‖ f_s ‖ f_h` where `f_d` comes from a dual-path convolutional
//! encoder over the current/goal pair and their Laplacian pyramids, `f_s`
//! from projected colour histograms plus scalar photo statistics, and `f_h`
//! from a projection of the action/distance history.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{laplacian_pyramid, resize_bilinear, Image, LaplacianPyramid, CHANNELS};
use crate::nn::{
    AdaptiveAvgPool, Checkpoint, CheckpointWriter, Conv2d, HasParams, Layer, Linear, Param, Relu, Sequential, Tensor,
};
use crate::pipeline::{PipelineParams, NUM_PARAMS};
use crate::stats::{histogram, scalar_stats, ChannelSet, HIST_BINS};

/// Side length of the images the encoder sees.
pub const POLICY_RES: usize = 64;
pub const PYRAMID_LEVELS: usize = 3;
/// current RGB, goal RGB, then three RGB bands for each pyramid.
pub const INPUT_CHANNELS: usize = 2 * CHANNELS * (1 + PYRAMID_LEVELS);
pub const ENCODER_WIDTH: usize = 32;
pub const POOL_GRID: usize = 4;

pub const F_D: usize = ENCODER_WIDTH * POOL_GRID * POOL_GRID;
pub const HIST_FEATURES: usize = 2 * CHANNELS * HIST_BINS;
pub const HIST_PROJ: usize = 64;
pub const F_S: usize = HIST_PROJ + 8;
pub const HISTORY_LEN: usize = 10;
pub const HISTORY_ENTRY: usize = NUM_PARAMS + 1;
pub const HISTORY_FEATURES: usize = HISTORY_LEN * HISTORY_ENTRY;
pub const F_H: usize = 32;
pub const STATE_LEN: usize = F_D + F_S + F_H;

/// Raw per-step observation: frozen encoder output, histograms, scalar stats
/// and flattened history. This is what the replay buffer stores.
pub const OBS_LEN: usize = F_D + HIST_FEATURES + 8 + HISTORY_FEATURES;

/// Histogram entries are probabilities of order `1/32`; the projection init is
/// scaled up so its outputs start at a magnitude comparable to the other inputs.
const HIST_GAIN: f64 = HIST_BINS as f64;

// ---------------------------------------------------------------------------
// Dual-path encoder
// ---------------------------------------------------------------------------

/// Stem conv, a resolution-preserving local path, and a global path that
/// reduces the pair to one vector; fused by broadcast-add + ReLU and pooled
/// to a 4×4 grid.
#[derive(Clone, Debug)]
pub struct DualPathEncoder {
    pub stem: Sequential,
    pub local: Sequential,
    pub global: Sequential,
    fuse_mask: Option<(Vec<usize>, Vec<bool>)>,
    pool: AdaptiveAvgPool,
}

impl DualPathEncoder {
    pub fn new(rng: &mut impl Rng) -> Self {
        let w = ENCODER_WIDTH;
        let stem = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(INPUT_CHANNELS, w, 3, 2, 1, rng)),
            Layer::Relu(Relu::default()),
        ]);
        let local = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(w, w, 3, 1, 1, rng)),
            Layer::Relu(Relu::default()),
            Layer::Conv2d(Conv2d::new(w, w, 3, 1, 1, rng)),
        ]);
        let global = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(w, w, 3, 2, 1, rng)),
            Layer::Relu(Relu::default()),
            Layer::AvgPool(AdaptiveAvgPool::new(POOL_GRID, POOL_GRID)),
            Layer::Linear(Linear::new(F_D, 64, rng)),
            Layer::Relu(Relu::default()),
            Layer::Linear(Linear::new(64, 64, rng)),
            Layer::Relu(Relu::default()),
            Layer::Linear(Linear::new(64, w, rng)),
        ]);
        Self {
            stem,
            local,
            global,
            fuse_mask: None,
            pool: AdaptiveAvgPool::new(POOL_GRID, POOL_GRID),
        }
    }

    /// Same architecture with every weight and bias zero.
    pub fn zeros() -> Self {
        let mut e = Self::new(&mut rand::rngs::mock::StepRng::new(0, 0));
        for p in e.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        e
    }

    fn fuse(local: &Tensor, global: &Tensor) -> Tensor {
        let s = local.shape().to_vec();
        let plane = s[2] * s[3];
        let mut out = local.clone();
        for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let g = global.data()[i];
            chunk.iter_mut().for_each(|v| *v = (*v + g).max(0.0));
        }
        out
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || s[2] < 4 * POOL_GRID || s[3] < 4 * POOL_GRID {
            return Err(Error::shape(
                "DualPathEncoder input",
                &[1, INPUT_CHANNELS, POLICY_RES, POLICY_RES],
                s,
            ));
        }
        Ok(())
    }

    /// `[N, 24, H, W]` → `[N, 512]`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let s = self.stem.infer(x)?;
        let l = self.local.infer(&s)?;
        let g = self.global.infer(&s)?;
        let fused = Self::fuse(&l, &g);
        let n = x.batch();
        self.pool.infer(&fused)?.reshape(vec![n, F_D])
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        let s = self.stem.forward(x)?;
        let l = self.local.forward(&s)?;
        let g = self.global.forward(&s)?;
        let fused = Self::fuse(&l, &g);
        self.fuse_mask = Some((fused.shape().to_vec(), fused.data().iter().map(|v| *v > 0.0).collect()));
        let n = x.batch();
        self.pool.forward(&fused)?.reshape(vec![n, F_D])
    }

    /// Gradient w.r.t. the encoder input; parameter gradients accumulate.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self
            .fuse_mask
            .take()
            .ok_or_else(|| Error::State("DualPathEncoder: backward without forward".into()))?;
        let n = shape[0];
        let g = grad.clone().reshape(vec![n, ENCODER_WIDTH, POOL_GRID, POOL_GRID])?;
        let mut d_fused = self.pool.backward(&g)?;
        for (v, on) in d_fused.data_mut().iter_mut().zip(&mask) {
            if !on {
                *v = 0.0;
            }
        }
        let plane = shape[2] * shape[3];
        let d_global: Vec<f64> = d_fused.data().chunks_exact(plane).map(|c| c.iter().sum()).collect();
        let d_global = Tensor::new(vec![n, ENCODER_WIDTH], d_global)?;
        let ds_local = self.local.backward(&d_fused)?;
        let ds_global = self.global.backward(&d_global)?;
        let mut ds = ds_local;
        for (a, b) in ds.data_mut().iter_mut().zip(ds_global.data()) {
            *a += b;
        }
        self.stem.backward(&ds)
    }

    pub fn save_into(&self, w: &mut CheckpointWriter, prefix: &str) -> Result<()> {
        self.stem.save_into(w, &format!("{prefix}.stem"))?;
        self.local.save_into(w, &format!("{prefix}.local"))?;
        self.global.save_into(w, &format!("{prefix}.global"))
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.stem.load_from(ck, &format!("{prefix}.stem"))?;
        self.local.load_from(ck, &format!("{prefix}.local"))?;
        self.global.load_from(ck, &format!("{prefix}.global"))
    }
}

impl HasParams for DualPathEncoder {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        v.extend(self.local.params());
        v.extend(self.global.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        v.extend(self.local.params_mut());
        v.extend(self.global.params_mut());
        v
    }
}

/// Resizes to the policy resolution unless the image already has it.
pub fn to_policy_res(img: &Image) -> Result<Image> {
    if img.dims() == (POLICY_RES, POLICY_RES) {
        Ok(img.clone())
    } else {
        resize_bilinear(img, POLICY_RES, POLICY_RES)
    }
}

fn push_planes(out: &mut Vec<f64>, data: &[f64], h: usize, w: usize) {
    for c in 0..CHANNELS {
        out.extend((0..h * w).map(|i| data[i * CHANNELS + c]));
    }
}

/// Builds the `[1, 24, 64, 64]` encoder input stack.
pub fn encoder_input(
    current: &Image,
    goal: &Image,
    pyr_cur: &LaplacianPyramid,
    pyr_goal: &LaplacianPyramid,
) -> Result<Tensor> {
    let r = POLICY_RES;
    for img in [current, goal] {
        if img.dims() != (r, r) {
            return Err(Error::shape("encoder image", &[r, r], &[img.height(), img.width()]));
        }
    }
    for p in [pyr_cur, pyr_goal] {
        if p.level_count() != PYRAMID_LEVELS {
            return Err(Error::shape("pyramid levels", &[PYRAMID_LEVELS], &[p.level_count()]));
        }
    }
    let mut data = Vec::with_capacity(INPUT_CHANNELS * r * r);
    push_planes(&mut data, current.data(), r, r);
    push_planes(&mut data, goal.data(), r, r);
    for p in [pyr_cur, pyr_goal] {
        for band in &p.bands {
            let up = band.resize_bilinear(r, r)?;
            push_planes(&mut data, &up.data, r, r);
        }
    }
    Tensor::new(vec![1, INPUT_CHANNELS, r, r], data)
}

pub fn encode_dual_path(
    current: &Image,
    goal: &Image,
    pyr_cur: &LaplacianPyramid,
    pyr_goal: &LaplacianPyramid,
    enc: &DualPathEncoder,
) -> Result<Vec<f64>> {
    let x = encoder_input(current, goal, pyr_cur, pyr_goal)?;
    Ok(enc.infer(&x)?.into_data())
}

// ---------------------------------------------------------------------------
// Photo statistics and history
// ---------------------------------------------------------------------------

/// `H_rgb(current) ‖ H_rgb(goal)`, 192 values.
pub fn histogram_pair(current: &Image, goal: &Image) -> Vec<f64> {
    let mut v = histogram(current, ChannelSet::Rgb).flat();
    v.extend(histogram(goal, ChannelSet::Rgb).flat());
    v
}

/// Scalar stats of current then goal, 8 values.
pub fn stats_pair(current: &Image, goal: &Image) -> [f64; 8] {
    let a = scalar_stats(current).to_array();
    let b = scalar_stats(goal).to_array();
    [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
}

pub fn photo_stats_features(current: &Image, goal: &Image, proj: &Linear) -> Result<Vec<f64>> {
    let mut f = proj.infer(&Tensor::row(histogram_pair(current, goal)))?.into_data();
    f.extend_from_slice(&stats_pair(current, goal));
    Ok(f)
}

/// Past actions and the resulting image-to-goal distances, newest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    entries: Vec<(PipelineParams, f64)>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records step `t`'s action and the distance of its render to the goal.
    pub fn push(&mut self, action: PipelineParams, distance: f64) -> Result<()> {
        if self.entries.len() >= HISTORY_LEN {
            return Err(Error::State(format!("history holds at most {HISTORY_LEN} steps")));
        }
        if !distance.is_finite() {
            return Err(Error::NonFinite(format!("history distance {distance}")));
        }
        self.entries.push((action, distance));
        Ok(())
    }

    /// Ten `(9 action values, distance)` slots, most recent first, zero padded.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(HISTORY_FEATURES);
        for (a, d) in self.entries.iter().rev() {
            v.extend_from_slice(a.values());
            v.push(*d);
        }
        v.resize(HISTORY_FEATURES, 0.0);
        v
    }
}

pub fn history_embedding(hist: &History, proj: &Linear) -> Result<Vec<f64>> {
    Ok(proj.infer(&Tensor::row(hist.flatten()))?.into_data())
}

/// Fixed-length `f_d ‖ f_s ‖ f_h` vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn f_d(&self) -> &[f64] {
        &self.0[..F_D]
    }

    pub fn f_s(&self) -> &[f64] {
        &self.0[F_D..F_D + F_S]
    }

    pub fn f_h(&self) -> &[f64] {
        &self.0[F_D + F_S..]
    }
}

pub fn assemble_state(f_d: &[f64], f_s: &[f64], f_h: &[f64]) -> Result<StateVector> {
    if f_d.len() != F_D || f_s.len() != F_S || f_h.len() != F_H {
        return Err(Error::shape(
            "assemble_state",
            &[F_D, F_S, F_H],
            &[f_d.len(), f_s.len(), f_h.len()],
        ));
    }
    let mut v = Vec::with_capacity(STATE_LEN);
    v.extend_from_slice(f_d);
    v.extend_from_slice(f_s);
    v.extend_from_slice(f_h);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("state vector".into()));
    }
    Ok(StateVector(v))
}

// ---------------------------------------------------------------------------
// State encoder
// ---------------------------------------------------------------------------

/// Raw observation of one step, `OBS_LEN` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

/// Convolutional encoder plus the two trainable projections. The conv part
/// is evaluated once per observation; the projections map observations to
/// states and receive gradients from the critic loss.
#[derive(Clone, Debug)]
pub struct StateEncoder {
    pub dual: DualPathEncoder,
    pub stats_proj: Linear,
    pub history_proj: Linear,
}

impl StateEncoder {
    pub fn new(rng: &mut impl Rng) -> Self {
        let dual = DualPathEncoder::new(rng);
        let mut stats_proj = Linear::new(HIST_FEATURES, HIST_PROJ, rng);
        stats_proj.weight.value.iter_mut().for_each(|v| *v *= HIST_GAIN);
        let history_proj = Linear::new(HISTORY_FEATURES, F_H, rng);
        Self {
            dual,
            stats_proj,
            history_proj,
        }
    }

    /// Observation for a (current, goal) pair at any resolution; both are
    /// brought to the policy resolution first.
    pub fn observe(&self, current: &Image, goal: &Image, hist: &History) -> Result<Observation> {
        let cur = to_policy_res(current)?;
        let goal = to_policy_res(goal)?;
        let pc = laplacian_pyramid(&cur, PYRAMID_LEVELS)?;
        let pg = laplacian_pyramid(&goal, PYRAMID_LEVELS)?;
        self.observe_prepared(&cur, &goal, &pc, &pg, hist)
    }

    /// Same as [`StateEncoder::observe`] with policy-resolution images and
    /// their pyramids supplied by the caller (lets a rollout reuse the goal's).
    pub fn observe_prepared(
        &self,
        cur: &Image,
        goal: &Image,
        pyr_cur: &LaplacianPyramid,
        pyr_goal: &LaplacianPyramid,
        hist: &History,
    ) -> Result<Observation> {
        let mut v = encode_dual_path(cur, goal, pyr_cur, pyr_goal, &self.dual)?;
        v.extend(histogram_pair(cur, goal));
        v.extend_from_slice(&stats_pair(cur, goal));
        v.extend(hist.flatten());
        Ok(Observation(v))
    }

    fn split(obs: &Tensor) -> Result<Vec<Tensor>> {
        obs.split_features(&[F_D, HIST_FEATURES, 8, HISTORY_FEATURES])
    }

    fn combine(parts: &[Tensor], hp: &Tensor, fh: &Tensor) -> Result<Tensor> {
        Tensor::concat_features(&[&parts[0], hp, &parts[2], fh])
    }

    /// `[N, OBS_LEN]` → `[N, STATE_LEN]` without touching caches.
    pub fn infer(&self, obs: &Tensor) -> Result<Tensor> {
        let parts = Self::split(obs)?;
        let hp = self.stats_proj.infer(&parts[1])?;
        let fh = self.history_proj.infer(&parts[3])?;
        Self::combine(&parts, &hp, &fh)
    }

    pub fn forward(&mut self, obs: &Tensor) -> Result<Tensor> {
        let parts = Self::split(obs)?;
        let hp = self.stats_proj.forward(&parts[1])?;
        let fh = self.history_proj.forward(&parts[3])?;
        Self::combine(&parts, &hp, &fh)
    }

    /// Accumulates projection gradients from `d state`.
    pub fn backward(&mut self, grad: &Tensor) -> Result<()> {
        let g = grad.split_features(&[F_D, HIST_PROJ, 8, F_H])?;
        self.stats_proj.backward(&g[1])?;
        self.history_proj.backward(&g[3])?;
        Ok(())
    }

    pub fn state(&self, obs: &Observation) -> Result<StateVector> {
        let s = self.infer(&Tensor::row(obs.0.clone()))?;
        Ok(StateVector(s.into_data()))
    }

    pub fn save_into(&self, w: &mut CheckpointWriter, prefix: &str) -> Result<()> {
        self.dual.save_into(w, &format!("{prefix}.dual"))?;
        for (name, l) in [("stats_proj", &self.stats_proj), ("history_proj", &self.history_proj)] {
            w.add(&format!("{prefix}.{name}.w"), &l.weight.shape, &l.weight.value);
            w.add(&format!("{prefix}.{name}.b"), &l.bias.shape, &l.bias.value);
        }
        Ok(())
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        self.dual.load_from(ck, &format!("{prefix}.dual"))?;
        for (name, l) in [
            ("stats_proj", &mut self.stats_proj),
            ("history_proj", &mut self.history_proj),
        ] {
            l.weight.value = ck.tensor(&format!("{prefix}.{name}.w"), &l.weight.shape)?;
            l.bias.value = ck.tensor(&format!("{prefix}.{name}.b"), &l.bias.shape)?;
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
        Ok(())
    }
}

/// Only the projections are trainable; the conv encoder stays fixed.
impl HasParams for StateEncoder {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.stats_proj.weight,
            &self.stats_proj.bias,
            &self.history_proj.weight,
            &self.history_proj.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.stats_proj.weight,
            &mut self.stats_proj.bias,
            &mut self.history_proj.weight,
            &mut self.history_proj.bias,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Differentiable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
        Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    fn pair_features(cur: &Image, goal: &Image, enc: &DualPathEncoder) -> Vec<f64> {
        let pc = laplacian_pyramid(cur, 3).unwrap();
        let pg = laplacian_pyramid(goal, 3).unwrap();
        encode_dual_path(cur, goal, &pc, &pg, enc).unwrap()
    }

    #[test]
    fn output_is_512_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = DualPathEncoder::new(&mut rng);
        let img = random_image(64, 64, &mut rng);
        let a = pair_features(&img, &img, &enc);
        let b = pair_features(&img, &img, &enc);
        assert_eq!(a.len(), 512);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn wrong_resolution_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = DualPathEncoder::new(&mut rng);
        let img = random_image(32, 32, &mut rng);
        let p = laplacian_pyramid(&img, 3).unwrap();
        assert!(matches!(
            encode_dual_path(&img, &img, &p, &p, &enc),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_weights_give_bias_closed_form() {
        let mut enc = DualPathEncoder::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let local_bias: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let global_bias: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Layer::Conv2d(c) = &mut enc.local.layers[2] {
            c.bias.value = local_bias.clone();
        }
        if let Layer::Linear(l) = &mut enc.global.layers[7] {
            l.bias.value = global_bias.clone();
        }
        let img = random_image(64, 64, &mut rng);
        let f = pair_features(&img, &img, &enc);
        for c in 0..32 {
            let expect = (local_bias[c] + global_bias[c]).max(0.0);
            for v in &f[c * 16..(c + 1) * 16] {
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn global_path_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = DualPathEncoder::new(&mut rng);
        let a = random_image(64, 64, &mut rng);
        let b = random_image(64, 64, &mut rng);
        let before = pair_features(&a, &b, &enc);
        if let Layer::Linear(l) = &mut enc.global.layers[7] {
            l.weight.value.iter_mut().for_each(|v| *v = 0.0);
            l.bias.value.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_ne!(before, pair_features(&a, &b, &enc));
    }

    struct EncoderProbe {
        enc: DualPathEncoder,
        x: Tensor,
        w: Vec<f64>,
    }

    impl Differentiable for EncoderProbe {
        fn dim(&self) -> usize {
            self.enc.param_count()
        }
        fn get(&self, i: usize) -> f64 {
            self.enc.flat_get(i)
        }
        fn set(&mut self, i: usize, v: f64) {
            self.enc.flat_set(i, v)
        }
        fn loss(&mut self) -> Result<f64> {
            let y = self.enc.infer(&self.x)?;
            Ok(y.data().iter().zip(&self.w).map(|(a, b)| a * b).sum())
        }
        fn gradient(&mut self) -> Result<Vec<f64>> {
            self.enc.zero_grad();
            let y = self.enc.forward(&self.x)?;
            let g = Tensor::new(y.shape().to_vec(), self.w.clone())?;
            self.enc.backward(&g)?;
            Ok(self.enc.flat_grads())
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = DualPathEncoder::new(&mut rng);
        let x: Vec<f64> = (0..INPUT_CHANNELS * 16 * 16)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let x = Tensor::new(vec![1, INPUT_CHANNELS, 16, 16], x).unwrap();
        let w = (0..F_D).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut probe = EncoderProbe { enc, x, w };
        let err = grad_check(&mut probe, 100, 1e-5, &mut rng).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn stats_features_constant_pair() {
        let img = Image::filled(8, 8, [0.5; 3]);
        let proj = Linear::zeros(HIST_FEATURES, HIST_PROJ);
        let f = photo_stats_features(&img, &img, &proj).unwrap();
        assert_eq!(f.len(), F_S);
        let expect = [0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0];
        for (a, b) in f[64..].iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", &f[64..]);
        }
    }

    #[test]
    fn stats_features_compose_histograms_through_proj() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_image(16, 16, &mut rng);
        let b = random_image(16, 16, &mut rng);
        let proj = Linear::new(HIST_FEATURES, HIST_PROJ, &mut rng);
        let f = photo_stats_features(&a, &b, &proj).unwrap();
        let mut h = histogram(&a, ChannelSet::Rgb).flat();
        h.extend(histogram(&b, ChannelSet::Rgb).flat());
        for o in 0..HIST_PROJ {
            let row = &proj.weight.value[o * HIST_FEATURES..(o + 1) * HIST_FEATURES];
            let manual = proj.bias.value[o] + row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
            assert!((f[o] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_images_give_symmetric_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(16, 16, &mut rng);
        let proj = Linear::new(HIST_FEATURES, HIST_PROJ, &mut rng);
        let f = photo_stats_features(&a, &a, &proj).unwrap();
        assert_eq!(f[64..68], f[68..72]);
    }

    #[test]
    fn empty_history_embeds_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut proj = Linear::new(HISTORY_FEATURES, F_H, &mut rng);
        proj.bias.value.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(history_embedding(&History::new(), &proj).unwrap(), vec![0.0; F_H]);
    }

    #[test]
    fn history_single_action_matches_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let proj = Linear::new(HISTORY_FEATURES, F_H, &mut rng);
        let a = PipelineParams::new([0.1, -0.2, 0.3, 0.0, 0.5, -0.6, 0.7, 0.8, -0.9]).unwrap();
        let img = random_image(8, 8, &mut rng);
        let mut h = History::new();
        h.push(a, img.rms_distance(&img).unwrap()).unwrap();
        let flat = h.flatten();
        assert_eq!(flat[9], 0.0);
        assert!(flat[10..].iter().all(|v| *v == 0.0));
        let f = history_embedding(&h, &proj).unwrap();
        for o in 0..F_H {
            let mut acc = proj.bias.value[o];
            for (j, x) in a.values().iter().enumerate() {
                acc += proj.weight.value[o * HISTORY_FEATURES + j] * x;
            }
            assert!((f[o] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn history_is_newest_first_and_bounded() {
        let mut h = History::new();
        for t in 0..HISTORY_LEN {
            let p = PipelineParams::new([t as f64 / 10.0; 9]).unwrap();
            h.push(p, t as f64).unwrap();
            assert_eq!(h.len(), t + 1);
        }
        let flat = h.flatten();
        assert_eq!(flat[9], 9.0);
        assert_eq!(flat[99], 0.0);
        assert!(h.push(PipelineParams::NEUTRAL, 0.0).is_err());
    }

    #[test]
    fn assemble_state_offsets() {
        let fd: Vec<f64> = (0..F_D).map(|i| i as f64).collect();
        let fs = vec![-1.0; F_S];
        let fh = vec![2.0; F_H];
        let s = assemble_state(&fd, &fs, &fh).unwrap();
        assert_eq!(s.as_slice().len(), 616);
        assert_eq!(s.f_d(), &fd[..]);
        assert_eq!(s.f_s(), &fs[..]);
        assert_eq!(s.f_h(), &fh[..]);
        let z = assemble_state(&[0.0; F_D], &[0.0; F_S], &[0.0; F_H]).unwrap();
        assert!(z.as_slice().iter().all(|v| *v == 0.0));
        assert!(assemble_state(&fd, &fs, &fh[1..]).is_err());
    }

    #[test]
    fn state_encoder_matches_component_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let enc = StateEncoder::new(&mut rng);
        let a = random_image(64, 64, &mut rng);
        let b = random_image(64, 64, &mut rng);
        let mut h = History::new();
        h.push(PipelineParams::new([0.3; 9]).unwrap(), 0.2).unwrap();
        let obs = enc.observe(&a, &b, &h).unwrap();
        assert_eq!(obs.0.len(), OBS_LEN);
        let s = enc.state(&obs).unwrap();
        let expect = assemble_state(
            &pair_features(&a, &b, &enc.dual),
            &photo_stats_features(&a, &b, &enc.stats_proj).unwrap(),
            &history_embedding(&h, &enc.history_proj).unwrap(),
        )
        .unwrap();
        for (x, y) in s.as_slice().iter().zip(expect.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn state_encoder_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = StateEncoder::new(&mut rng);
        let mut w = CheckpointWriter::new();
        enc.save_into(&mut w, "enc").unwrap();
        let ck = Checkpoint::from_bytes(&w.to_bytes().unwrap()).unwrap();
        let mut other = StateEncoder::new(&mut rng);
        other.load_from(&ck, "enc").unwrap();
        assert_eq!(other.flat_values(), enc.flat_values());
        assert_eq!(other.dual.flat_values(), enc.dual.flat_values());
    }
}
