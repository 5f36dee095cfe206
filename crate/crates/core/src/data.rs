//! Synthetic scenes, random-target pairs, external image directories and the
//! dataset manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{encode, luminance, read_image, Format, Image};
use crate::pipeline::{apply_pipeline, PipelineParams, NUM_PARAMS};

pub const MIN_SCENE_SIZE: usize = 16;
pub const DEFAULT_SUBRANGE: f64 = 0.7;
pub const MAX_REJECTIONS: usize = 100;
/// Goals whose mean intensity leaves this open interval are resampled.
pub const GOAL_INTENSITY: (f64, f64) = (0.02, 0.98);

#[derive(Clone, Debug)]
pub struct ScenePair {
    pub id: String,
    pub input: Image,
    pub goal: Image,
    /// Present for synthetic pairs only.
    pub goal_params: Option<PipelineParams>,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mean_luminance(data: &[f64]) -> f64 {
    let n = data.len() / 3;
    data.chunks_exact(3).map(|p| luminance([p[0], p[1], p[2]])).sum::<f64>() / n as f64
}

/// Procedural scene: a two-colour gradient, 2–6 soft-edged ellipses or
/// rectangles, and a low-amplitude band-limited texture. Mean luminance is
/// pulled into `[0.2, 0.8]`.
pub fn generate_scene(seed: u64, size: usize) -> Result<Image> {
    if size < MIN_SCENE_SIZE {
        return Err(Error::arg(format!(
            "scene size must be >= {MIN_SCENE_SIZE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.gen_range(0.1..0.9)) };
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dir_x, dir_y) = (theta.cos(), theta.sin());

    struct Shape {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        soft: f64,
        rect: bool,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..rng.gen_range(2..=6))
        .map(|_| Shape {
            cx: rng.gen_range(0.0..s),
            cy: rng.gen_range(0.0..s),
            rx: rng.gen_range(0.08..0.35) * s,
            ry: rng.gen_range(0.08..0.35) * s,
            soft: rng.gen_range(0.02..0.1) * s,
            rect: rng.gen_bool(0.4),
            color: color(&mut rng),
        })
        .collect();

    // (fx, fy, phase, amplitude, channel tint)
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            let f = rng.gen_range(2.0..10.0) * std::f64::consts::TAU / s;
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let tint = std::array::from_fn(|_| rng.gen_range(0.7..1.0));
            (
                f * a.cos(),
                f * a.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.01..0.03),
                tint,
            )
        })
        .collect();

    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((fx / s - 0.5) * dir_x + (fy / s - 0.5) * dir_y) + 0.5).clamp(0.0, 1.0);
            let mut p: [f64; 3] = std::array::from_fn(|c| c0[c] + t * (c1[c] - c0[c]));
            for sh in &shapes {
                let (dx, dy) = (fx - sh.cx, fy - sh.cy);
                let d = if sh.rect {
                    (dx.abs() - sh.rx).max(dy.abs() - sh.ry)
                } else {
                    ((dx / sh.rx).powi(2) + (dy / sh.ry).powi(2))
                        .sqrt()
                        .mul_add(sh.rx.min(sh.ry), -sh.rx.min(sh.ry))
                };
                let alpha = 1.0 - smoothstep(-sh.soft, sh.soft, d);
                for c in 0..3 {
                    p[c] += alpha * (sh.color[c] - p[c]);
                }
            }
            for (wx, wy, ph, amp, tint) in &waves {
                let v = amp * (wx * fx + wy * fy + ph).sin();
                for c in 0..3 {
                    p[c] += v * tint[c];
                }
            }
            data.extend(p.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    for _ in 0..20 {
        let m = mean_luminance(&data);
        if (0.2..=0.8).contains(&m) {
            break;
        }
        let delta = m.clamp(0.25, 0.75) - m;
        data.iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
    }
    Image::new(size, size, data)
}

/// Per-slider sampling bounds plus the set of sliders that are sampled at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamSampler {
    pub bounds: [(f64, f64); NUM_PARAMS],
    pub active: [bool; NUM_PARAMS],
}

impl Default for ParamSampler {
    fn default() -> Self {
        Self {
            bounds: [(-DEFAULT_SUBRANGE, DEFAULT_SUBRANGE); NUM_PARAMS],
            active: [true; NUM_PARAMS],
        }
    }
}

impl ParamSampler {
    pub fn exposure_only() -> Self {
        let mut s = Self::default();
        s.active = [false; NUM_PARAMS];
        s.active[0] = true;
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && -1.0 <= *lo && lo <= hi && *hi <= 1.0) {
                return Err(Error::arg(format!(
                    "slider {i} bounds ({lo}, {hi}) must be ordered within [-1, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Uniform within bounds on active sliders, zero elsewhere.
    pub fn sample(&self, rng: &mut impl Rng) -> PipelineParams {
        let v = std::array::from_fn(|i| {
            let (lo, hi) = self.bounds[i];
            if !self.active[i] || lo == hi {
                if self.active[i] {
                    lo
                } else {
                    0.0
                }
            } else {
                rng.gen_range(lo..hi)
            }
        });
        PipelineParams::new(v).expect("bounds are finite")
    }
}

/// Renders a goal from random parameters, resampling clipped-out goals.
pub fn make_pair(
    id: impl Into<String>,
    input: &Image,
    sampler: &ParamSampler,
    rng: &mut impl Rng,
) -> Result<ScenePair> {
    for _ in 0..MAX_REJECTIONS {
        let params = sampler.sample(rng);
        let goal = apply_pipeline(input, &params)?;
        let m = goal.mean_intensity();
        if m > GOAL_INTENSITY.0 && m < GOAL_INTENSITY.1 {
            return Ok(ScenePair {
                id: id.into(),
                input: input.clone(),
                goal,
                goal_params: Some(params),
            });
        }
    }
    Err(Error::Generation(format!(
        "{MAX_REJECTIONS} consecutive goals fell outside mean intensity {GOAL_INTENSITY:?}"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    /// (train fraction, eval fraction)
    pub split: (f64, f64),
    pub size: usize,
    pub sampler: ParamSampler,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 100,
            seed: 0,
            split: (0.8, 0.2),
            size: 64,
            sampler: ParamSampler::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (t, e) = self.split;
        if !(t >= 0.0 && e >= 0.0 && (t + e - 1.0).abs() < 1e-9) {
            return Err(Error::arg(format!(
                "split fractions ({t}, {e}) must be nonnegative and sum to 1"
            )));
        }
        if self.size < MIN_SCENE_SIZE {
            return Err(Error::arg(format!("scene size must be >= {MIN_SCENE_SIZE}")));
        }
        self.sampler.validate()
    }

    fn pair_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64 + 1);
        rng
    }

    /// Pair `i` of this dataset; independent of every other index.
    pub fn pair(&self, i: usize) -> Result<ScenePair> {
        let mut rng = self.pair_rng(i);
        let scene = generate_scene(rng.gen(), self.size)?;
        make_pair(format!("pair_{i:05}"), &scene, &self.sampler, &mut rng)
    }

    /// Indices of the train and eval splits.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        idx.shuffle(&mut rng);
        let n_train = (self.split.0 * self.count as f64).round() as usize;
        let mut eval = idx.split_off(n_train.min(self.count));
        idx.sort_unstable();
        eval.sort_unstable();
        (idx, eval)
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let pairs = (0..self.count).map(|i| self.pair(i)).collect::<Result<Vec<_>>>()?;
        let (train, eval) = self.split_indices();
        Ok(Dataset { pairs, train, eval })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<ScenePair>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Dataset {
    pub fn train_pairs(&self) -> Vec<ScenePair> {
        self.train.iter().map(|&i| self.pairs[i].clone()).collect()
    }

    pub fn eval_pairs(&self) -> Vec<ScenePair> {
        self.eval.iter().map(|&i| self.pairs[i].clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Directories and manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct DirectoryLoad {
    pub pairs: Vec<ScenePair>,
    /// File names that could not be paired or decoded, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn split_role(name: &str) -> Option<(&str, &str)> {
    let stem = name.rsplit_once('.').map(|(s, ext)| (s, ext.to_ascii_lowercase()))?;
    if !matches!(stem.1.as_str(), "png" | "ppm") {
        return None;
    }
    let s = stem.0;
    s.strip_suffix("_input")
        .map(|b| (b, "input"))
        .or_else(|| s.strip_suffix("_goal").map(|b| (b, "goal")))
}

/// Loads `X_input.png` / `X_goal.png` pairs in lexicographic order of `X`.
pub fn load_directory(path: impl AsRef<Path>) -> Result<DirectoryLoad> {
    let path = path.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut by_stem: std::collections::BTreeMap<String, (Option<String>, Option<String>)> = Default::default();
    let mut out = DirectoryLoad::default();
    for name in names {
        let role = split_role(&name).map(|(stem, role)| (stem.to_string(), role == "input"));
        match role {
            Some((stem, true)) => by_stem.entry(stem).or_default().0 = Some(name),
            Some((stem, false)) => by_stem.entry(stem).or_default().1 = Some(name),
            None => out.skipped.push((name, "not an X_input/X_goal image".into())),
        }
    }
    for (stem, files) in by_stem {
        match files {
            (Some(i), Some(g)) => match (read_image(path.join(&i)), read_image(path.join(&g))) {
                (Ok(input), Ok(goal)) => out.pairs.push(ScenePair {
                    id: stem,
                    input,
                    goal,
                    goal_params: None,
                }),
                (a, b) => {
                    for (name, r) in [(i, a), (g, b)] {
                        if let Err(e) = r {
                            out.skipped.push((name, e.to_string()));
                        }
                    }
                }
            },
            (Some(f), None) => out.skipped.push((f, "no matching goal".into())),
            (None, Some(f)) => out.skipped.push((f, "no matching input".into())),
            (None, None) => {}
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub input: PathBuf,
    pub goal: PathBuf,
    pub goal_params: Option<PipelineParams>,
    pub split: Split,
}

/// JSON listing of a dataset on disk; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: Option<DatasetSpec>,
    pub pairs: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    /// Decodes one entry relative to `base`.
    pub fn load_pair(&self, base: &Path, i: usize) -> Result<ScenePair> {
        let e = &self.pairs[i];
        Ok(ScenePair {
            id: e.id.clone(),
            input: read_image(base.join(&e.input))?,
            goal: read_image(base.join(&e.goal))?,
            goal_params: e.goal_params,
        })
    }

    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<ScenePair>> {
        (0..self.pairs.len())
            .filter(|&i| self.pairs[i].split == split)
            .map(|i| self.load_pair(base, i))
            .collect()
    }
}

/// Writes every pair as PNG plus `manifest.json`, all atomically. Rerunning
/// the same spec rewrites identical bytes.
pub fn write_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train, _) = spec.split_indices();
    let mut pairs = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let pair = spec.pair(i)?;
        let input = PathBuf::from(format!("{}_input.png", pair.id));
        let goal = PathBuf::from(format!("{}_goal.png", pair.id));
        crate::util::write_atomic(&out_dir.join(&input), &encode(&pair.input, Format::Png)?)?;
        crate::util::write_atomic(&out_dir.join(&goal), &encode(&pair.goal, Format::Png)?)?;
        pairs.push(ManifestEntry {
            id: pair.id,
            input,
            goal,
            goal_params: pair.goal_params,
            split: if train.binary_search(&i).is_ok() {
                Split::Train
            } else {
                Split::Eval
            },
        });
    }
    let manifest = Manifest {
        spec: Some(spec.clone()),
        pairs,
    };
    crate::util::write_atomic(&out_dir.join(MANIFEST_FILE), &manifest.to_json()?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_distinct() {
        let a = generate_scene(5, 32).unwrap();
        assert_eq!(a, generate_scene(5, 32).unwrap());
        let mut distinct = 0;
        for s in 0..100 {
            if generate_scene(s, 16).unwrap() != generate_scene(s + 1000, 16).unwrap() {
                distinct += 1;
            }
        }
        assert!(distinct >= 99);
        assert!(generate_scene(0, 15).is_err());
    }

    #[test]
    fn scene_luminance_in_range_over_1000_seeds() {
        for s in 0..1000 {
            let img = generate_scene(s, 16).unwrap();
            let m = mean_luminance(img.data());
            assert!((0.2..=0.8).contains(&m), "seed {s}: {m}");
        }
    }

    #[test]
    fn pair_goal_is_reproducible_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = generate_scene(1, 32).unwrap();
        let sampler = ParamSampler::default();
        for _ in 0..20 {
            let p = make_pair("x", &input, &sampler, &mut rng).unwrap();
            let params = p.goal_params.unwrap();
            assert!(params.values().iter().all(|v| v.abs() <= DEFAULT_SUBRANGE));
            assert_eq!(apply_pipeline(&input, &params).unwrap(), p.goal);
        }
    }

    #[test]
    fn white_input_with_forced_brightening_is_rejected() {
        let white = Image::filled(16, 16, [1.0; 3]);
        let mut sampler = ParamSampler::exposure_only();
        sampler.bounds[0] = (0.5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_pair("w", &white, &sampler, &mut rng),
            Err(Error::Generation(_))
        ));
        // with darkening allowed the rejection path resamples until it succeeds
        sampler.bounds[0] = (-1.0, 1.0);
        let p = make_pair("w", &white, &sampler, &mut rng).unwrap();
        assert!(p.goal.mean_intensity() < GOAL_INTENSITY.1);
        assert!(p.goal_params.unwrap().exposure() < 0.0);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let spec = DatasetSpec {
            count: 50,
            ..Default::default()
        };
        let (t, e) = spec.split_indices();
        assert_eq!((t.len(), e.len()), (40, 10));
        assert_eq!(spec.split_indices(), (t.clone(), e.clone()));
        let mut all: Vec<_> = t.into_iter().chain(e).collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        let bad = DatasetSpec {
            split: (0.5, 0.6),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn directory_loader_reports_orphans() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_directory(dir.path()).unwrap().pairs.is_empty());
        let img = generate_scene(0, 16).unwrap();
        let png = encode(&img, Format::Png).unwrap();
        for name in [
            "b_input.png",
            "b_goal.png",
            "a_input.png",
            "a_goal.png",
            "c_input.png",
            "notes.txt",
        ] {
            std::fs::write(dir.path().join(name), &png).unwrap();
        }
        let load = load_directory(dir.path()).unwrap();
        let ids: Vec<_> = load.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(load.pairs.iter().all(|p| p.goal_params.is_none()));
        let skipped: Vec<_> = load.skipped.iter().map(|s| s.0.as_str()).collect();
        assert_eq!(skipped, ["notes.txt", "c_input.png"]);
    }

    #[test]
    fn manifest_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            count: 4,
            size: 16,
            ..Default::default()
        };
        let m = write_dataset(&spec, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        write_dataset(&spec, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
        let back = Manifest::read(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        let p = back.load_pair(dir.path(), 0).unwrap();
        let original = spec.pair(0).unwrap();
        assert!(p.goal.rms_distance(&original.goal).unwrap() <= 1.0 / 510.0);
    }
}
