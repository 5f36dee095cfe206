//! Rewards for the finishing task (PSNR gain) and the stylization task
//! (style-score drop minus a content penalty).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::nn::{gemm, Checkpoint, CheckpointWriter, Conv2d, Layer, LayerSpec, Relu, Sequential, Tensor};
use crate::stats::{histogram, psnr, ChannelSet};

/// `PSNR(i_next, goal) − PSNR(i_t, goal)`.
pub fn finishing_reward(i_t: &Image, i_next: &Image, goal: &Image) -> Result<f64> {
    Ok(psnr(i_next, goal)? - psnr(i_t, goal)?)
}

/// `F·Fᵀ / (C·H·W)` for a `[C, H, W]` map (a leading batch axis of 1 is allowed).
pub fn gram_matrix(feature: &Tensor) -> Result<Vec<f64>> {
    let s = feature.shape();
    let (c, hw) = match s.len() {
        3 => (s[0], s[1] * s[2]),
        4 if s[0] == 1 => (s[1], s[2] * s[3]),
        _ => return Err(Error::shape("gram_matrix", &[1, 0, 0, 0], s)),
    };
    if c == 0 || hw == 0 {
        return Err(Error::arg("gram_matrix of an empty feature map"));
    }
    let f = feature.data();
    let mut g = vec![0.0; c * c];
    gemm(c, hw, c, f, (hw, 1), f, (1, hw), 0.0, &mut g, (c, 1));
    let norm = (c * hw) as f64;
    g.iter_mut().for_each(|v| *v /= norm);
    Ok(g)
}

/// Element-count-normalized ℓ2 distance, `sqrt(mean((a − b)²))`.
pub fn feature_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("feature_distance", &[a.len()], &[b.len()]));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / a.len() as f64).sqrt())
}

pub const STYLE_STAGES: usize = 4;
pub const STYLE_WIDTHS: [usize; STYLE_STAGES] = [16, 32, 64, 128];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    FixedRandomFilters { seed: u64 },
    ExternalWeights,
}

/// Four conv + ReLU stages; every stage after the first downsamples by 2.
#[derive(Clone, Debug)]
pub struct StyleFeatureExtractor {
    stages: Vec<Sequential>,
    pub provenance: Provenance,
}

impl StyleFeatureExtractor {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = CHANNELS;
        let stages = STYLE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i == 0 { 1 } else { 2 };
                let conv = Conv2d::new(inputs, w, 3, stride, 1, &mut rng);
                inputs = w;
                Sequential::new(vec![Layer::Conv2d(conv), Layer::Relu(Relu::default())])
            })
            .collect();
        Self {
            stages,
            provenance: Provenance::FixedRandomFilters { seed },
        }
    }

    /// Writes the stage manifest (`{prefix}.stages`) and weights.
    pub fn save_into(&self, w: &mut CheckpointWriter, prefix: &str) -> Result<()> {
        let manifest: Vec<Vec<LayerSpec>> = self.stages.iter().map(Sequential::specs).collect();
        w.set_meta(&format!("{prefix}.stages"), serde_json::to_value(manifest)?);
        for (i, s) in self.stages.iter().enumerate() {
            s.save_into(w, &format!("{prefix}.{i}"))?;
        }
        Ok(())
    }

    /// Loads externally supplied weights described by a stage manifest.
    pub fn from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let key = format!("{prefix}.stages");
        let manifest: Vec<Vec<LayerSpec>> = serde_json::from_value(
            ck.meta(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing stage manifest {key}")))?
                .clone(),
        )?;
        if manifest.len() != STYLE_STAGES {
            return Err(Error::Checkpoint(format!(
                "style extractor needs {STYLE_STAGES} stages, manifest has {}",
                manifest.len()
            )));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut stages = Vec::with_capacity(STYLE_STAGES);
        for (i, specs) in manifest.iter().enumerate() {
            let mut s = Sequential::from_specs(specs, &mut rng);
            s.load_from(ck, &format!("{prefix}.{i}"))?;
            stages.push(s);
        }
        Ok(Self {
            stages,
            provenance: Provenance::ExternalWeights,
        })
    }

    /// One `[1, C, H, W]` map per stage.
    pub fn features(&self, img: &Image) -> Result<Vec<Tensor>> {
        let mut cur = image_tensor(img);
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            cur = s.infer(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// `[1, 3, H, W]` planar copy of an image.
pub fn image_tensor(img: &Image) -> Tensor {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(CHANNELS * h * w);
    for c in 0..CHANNELS {
        data.extend(img.data().iter().skip(c).step_by(CHANNELS));
    }
    Tensor::new(vec![1, CHANNELS, h, w], data).expect("image tensor shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for StyleWeights {
    fn default() -> Self {
        Self {
            lambda0: 100.0,
            lambda1: 50.0,
            lambda2: 0.5,
        }
    }
}

/// Precomputed goal-side statistics so repeated scoring against one goal
/// only pays for the candidate's features.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    grams: Vec<Vec<f64>>,
    features: Vec<Tensor>,
    hist_y: Vec<f64>,
    hist_uv: Vec<f64>,
}

impl StyleTarget {
    pub fn new(goal: &Image, fx: &StyleFeatureExtractor) -> Result<Self> {
        let features = fx.features(goal)?;
        let grams = features.iter().map(gram_matrix).collect::<Result<_>>()?;
        Ok(Self {
            grams,
            features,
            hist_y: histogram(goal, ChannelSet::Y).flat(),
            hist_uv: histogram(goal, ChannelSet::Uv).flat(),
        })
    }

    fn score_with(&self, current: &Image, cur_features: &[Tensor], w: &StyleWeights) -> Result<f64> {
        let mut total = 0.0;
        for (f, g) in cur_features.iter().zip(&self.grams) {
            total += feature_distance(g, &gram_matrix(f)?)?;
        }
        total += w.lambda0 * feature_distance(&histogram(current, ChannelSet::Y).flat(), &self.hist_y)?;
        total += w.lambda1 * feature_distance(&histogram(current, ChannelSet::Uv).flat(), &self.hist_uv)?;
        Ok(total)
    }

    pub fn score(&self, current: &Image, fx: &StyleFeatureExtractor, w: &StyleWeights) -> Result<f64> {
        self.score_with(current, &fx.features(current)?, w)
    }

    /// `Σ_i ‖F_i[goal] − F_i[img]‖`; needs matching image sizes.
    pub fn content_distance(&self, img_features: &[Tensor]) -> Result<f64> {
        let mut total = 0.0;
        for (a, b) in self.features.iter().zip(img_features) {
            if a.shape() != b.shape() {
                return Err(Error::arg(format!(
                    "content term needs equal feature shapes, got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            total += feature_distance(a.data(), b.data())?;
        }
        Ok(total)
    }
}

/// Gram-matrix distances over the four stages plus weighted luminance and
/// chroma histogram distances. Zero for identical images.
pub fn style_score(current: &Image, goal: &Image, fx: &StyleFeatureExtractor, w: &StyleWeights) -> Result<f64> {
    StyleTarget::new(goal, fx)?.score(current, fx, w)
}

/// `score(i_t) − score(i_next) − λ2·Σ_i ‖F_i[goal] − F_i[i_next]‖`.
pub fn stylization_reward(
    i_t: &Image,
    i_next: &Image,
    goal: &Image,
    fx: &StyleFeatureExtractor,
    w: &StyleWeights,
) -> Result<f64> {
    i_next.check_same_dims(goal, "stylization_reward")?;
    let target = StyleTarget::new(goal, fx)?;
    let before = target.score(i_t, fx, w)?;
    let next_features = fx.features(i_next)?;
    let after = target.score_with(i_next, &next_features, w)?;
    let content = target.content_distance(&next_features)?;
    Ok(before - after - w.lambda2 * content)
}

/// Which reward and objective an episode or tuning run optimizes.
#[derive(Clone, Debug)]
pub enum Task {
    Finishing,
    Stylization {
        fx: StyleFeatureExtractor,
        weights: StyleWeights,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Finishing,
    Stylization,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Finishing => TaskKind::Finishing,
            Task::Stylization { .. } => TaskKind::Stylization,
        }
    }

    /// Binds the task to one goal, caching goal-side style statistics.
    pub fn with_goal<'a>(&'a self, goal: &'a Image) -> Result<GoalContext<'a>> {
        let target = match self {
            Task::Finishing => None,
            Task::Stylization { fx, .. } => Some(StyleTarget::new(goal, fx)?),
        };
        Ok(GoalContext {
            task: self,
            goal,
            target,
        })
    }
}

pub struct GoalContext<'a> {
    task: &'a Task,
    pub goal: &'a Image,
    target: Option<StyleTarget>,
}

impl GoalContext<'_> {
    /// PSNR in dB for finishing, style score for stylization.
    pub fn value(&self, img: &Image) -> Result<f64> {
        match (self.task, &self.target) {
            (Task::Stylization { fx, weights }, Some(t)) => t.score(img, fx, weights),
            _ => psnr(img, self.goal),
        }
    }

    /// Larger is better: PSNR, or the negated style score.
    pub fn utility(&self, value: f64) -> f64 {
        match self.task {
            Task::Finishing => value,
            Task::Stylization { .. } => -value,
        }
    }

    pub fn reward(&self, i_t: &Image, i_next: &Image) -> Result<f64> {
        match (self.task, &self.target) {
            (Task::Stylization { fx, weights }, Some(t)) => {
                i_next.check_same_dims(self.goal, "stylization_reward")?;
                let before = t.score(i_t, fx, weights)?;
                let next_features = fx.features(i_next)?;
                let after = t.score_with(i_next, &next_features, weights)?;
                Ok(before - after - weights.lambda2 * t.content_distance(&next_features)?)
            }
            _ => finishing_reward(i_t, i_next, self.goal),
        }
    }
}
