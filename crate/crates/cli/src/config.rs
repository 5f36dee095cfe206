use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use phototune::data::{DatasetSpec, ParamSampler};
use phototune::pipeline::SliderPipeline;
use phototune::rewards::{StyleFeatureExtractor, StyleWeights, Task, TaskKind};
use phototune::rl::TD3Config;
use phototune::tuners::CmaesOptions;

use crate::runspec::RunSpec;

/// Everything a run needs. Loaded from TOML, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskKind,
    /// Only the exposure slider is searched, rendered and sampled.
    pub exposure_only: bool,
    pub style: StyleConfig,
    pub data: DatasetSpec,
    pub td3: TD3Config,
    pub cmaes: CmaesOptions,
    pub train: TrainConfig,
    pub tune: TuneConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Finishing,
            exposure_only: false,
            style: StyleConfig::default(),
            data: DatasetSpec::default(),
            td3: TD3Config::default(),
            cmaes: CmaesOptions::default(),
            train: TrainConfig::default(),
            tune: TuneConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    /// Seed of the fixed random-filter feature extractor.
    pub extractor_seed: u64,
    pub weights: StyleWeights,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            extractor_seed: 7,
            weights: StyleWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub episodes: u64,
    pub eval_every: u64,
    /// Cap on held-out pairs used for periodic evaluation.
    pub eval_limit: usize,
    pub stop_at_eval_psnr: Option<f64>,
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            log: None,
            episodes: 1000,
            eval_every: 100,
            eval_limit: 20,
            stop_at_eval_psnr: None,
            resume: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub run: RunSpec,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            run: RunSpec::parse("cmaes@200").expect("valid default"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub data: Option<PathBuf>,
    pub runs: Vec<RunSpec>,
    pub checkpoint: Option<PathBuf>,
    /// "eval", "train" or "all".
    pub split: String,
    pub limit: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data: None,
            runs: vec![RunSpec::parse("cmaes@200").expect("valid default")],
            checkpoint: None,
            split: "eval".into(),
            limit: None,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub resolutions: Vec<String>,
    pub runs: Vec<RunSpec>,
    pub checkpoint: Option<PathBuf>,
    pub repeats: usize,
    /// Tunes whose estimated peak memory exceeds this are reported as OOM.
    pub memory_limit_mb: f64,
    pub out_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: ["720p", "1k", "2k", "4k"].map(String::from).to_vec(),
            runs: ["rl@10", "cmaes@200"]
                .iter()
                .map(|s| RunSpec::parse(s).expect("valid default"))
                .collect(),
            checkpoint: None,
            repeats: 3,
            memory_limit_mb: 4096.0,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.data.validate()?;
        self.td3.validate()?;
        if self.cmaes.population < 2 || !(self.cmaes.sigma0 > 0.0) {
            anyhow::bail!("cmaes.population must be >= 2 and cmaes.sigma0 > 0");
        }
        Ok(())
    }

    pub fn pipeline(&self) -> SliderPipeline {
        if self.exposure_only {
            SliderPipeline::exposure_only()
        } else {
            SliderPipeline::default()
        }
    }

    pub fn build_task(&self) -> Task {
        match self.task {
            TaskKind::Finishing => Task::Finishing,
            TaskKind::Stylization => Task::Stylization {
                fx: StyleFeatureExtractor::random(self.style.extractor_seed),
                weights: self.style.weights,
            },
        }
    }

    /// The dataset spec with the exposure-only switch applied.
    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = self.data.clone();
        if self.exposure_only {
            spec.sampler = ParamSampler {
                bounds: spec.sampler.bounds,
                ..ParamSampler::exposure_only()
            };
        }
        spec
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 4
            exposure_only = true
            [td3]
            hidden_width = 64
            [eval]
            runs = ["rl@10", "cmaes@10"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.td3.hidden_width, 64);
        assert_eq!(cfg.td3.gamma, TD3Config::default().gamma);
        assert_eq!(cfg.eval.runs.len(), 2);
        assert_eq!(cfg.dataset_spec().sampler.active.iter().filter(|&&a| a).count(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
    }

    #[test]
    fn shipped_configs_parse_and_validate() {
        for text in [
            include_str!("../../../configs/desk.toml"),
            include_str!("../../../configs/exposure.toml"),
        ] {
            let cfg: RunConfig = toml::from_str(text).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.td3.hidden_width, 128);
        }
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
