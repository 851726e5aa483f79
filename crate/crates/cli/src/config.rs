//! Run configuration: a TOML file with one table per stage. Every field has
//! a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hgm_core::sampler::DcVariant;
use hgm_core::score::LevelSampling;
use hgm_core::{HighDimTransform, MaskKind, NoiseSchedule, RestoreMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub out_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub degradation: DegradationConfig,
    pub restore: RestoreSection,
    pub generate: GenerateConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_first: f64,
    pub sigma_last: f64,
    pub levels: usize,
    pub epsilon: f64,
    pub steps_per_level: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        Self {
            sigma_first: s.sigma(0),
            sigma_last: s.sigma_last(),
            levels: s.levels(),
            epsilon: s.epsilon(),
            steps_per_level: s.steps_per_level(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::geometric(
            self.sigma_first,
            self.sigma_last,
            self.levels,
            self.epsilon,
            self.steps_per_level,
        )?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Trained network loaded from a checkpoint.
    #[default]
    Net,
    /// Isotropic Gaussian `N(mean, variance I)`.
    Gaussian,
    /// Gaussian with the synthetic-image covariance of `[data]`.
    Correlated,
    /// Isotropic Gaussian mixture with constant-valued means.
    Gmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponentConfig {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Checkpoint of the lifted-space network.
    pub checkpoint: Option<PathBuf>,
    /// Original-space network for progressive mode; defaults to `checkpoint`
    /// when the transform is the identity.
    pub checkpoint_lowdim: Option<PathBuf>,
    pub mean: f64,
    pub variance: f64,
    pub components: Vec<GmmComponentConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Net,
            checkpoint: None,
            checkpoint_lowdim: None,
            mean: 0.5,
            variance: 0.01,
            components: Vec::new(),
        }
    }
}

/// Image geometry and the synthetic correlated-Gaussian image model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean: f64,
    pub rho: f64,
    pub luma_variance: f64,
    pub chroma_variance: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            mean: 0.5,
            rho: 0.9,
            luma_variance: 0.02,
            chroma_variance: 0.0005,
        }
    }
}

impl DataConfig {
    pub fn image_model(&self) -> hgm_core::synth::CorrelatedImageModel {
        hgm_core::synth::CorrelatedImageModel {
            height: self.height,
            width: self.width,
            channels: self.channels,
            mean: self.mean,
            rho: self.rho,
            luma_variance: self.luma_variance,
            chroma_variance: self.chroma_variance,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[default]
    Conv,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Directory of equally sized PNG images.
    pub dataset: Option<PathBuf>,
    pub transform: HighDimTransform,
    pub head: Head,
    pub features: usize,
    pub dilations: Vec<usize>,
    pub sigma_channel: bool,
    pub init_seed: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub level_sampling: LevelSampling,
    pub final_lr_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = hgm_core::score::TrainConfig::default();
        let spec = hgm_core::score::ConvSpec::default_for(3);
        Self {
            dataset: None,
            transform: HighDimTransform::Identity,
            head: Head::Conv,
            features: spec.features,
            dilations: spec.dilations,
            sigma_channel: spec.sigma_channel,
            init_seed: 0,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            batch_size: t.batch_size,
            iterations: t.iterations,
            seed: t.seed,
            level_sampling: t.level_sampling,
            final_lr_fraction: t.final_lr_fraction,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> hgm_core::score::TrainConfig {
        hgm_core::score::TrainConfig {
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: self.seed,
            level_sampling: self.level_sampling,
            final_lr_fraction: self.final_lr_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub mask: MaskKind,
    /// Fraction of pixels kept by random masks; block masks hide
    /// `1 - keep_fraction` of the image.
    pub keep_fraction: f64,
    pub mask_file: Option<PathBuf>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            mask: MaskKind::Bayer,
            keep_fraction: 0.3,
            mask_file: None,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreSection {
    /// Directory of ground-truth PNGs to degrade and restore.
    pub inputs: Option<PathBuf>,
    pub transform: HighDimTransform,
    pub lambda: f64,
    pub mode: RestoreMode,
    pub seed: u64,
    pub clamp_each_step: bool,
    pub dc_variant: DcVariant,
    pub snapshots: bool,
}

impl Default for RestoreSection {
    fn default() -> Self {
        Self {
            inputs: None,
            transform: HighDimTransform::Identity,
            lambda: 1.0,
            mode: RestoreMode::Basic,
            seed: 0,
            clamp_each_step: false,
            dc_variant: DcVariant::Augmented,
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { count: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sample_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Side of the square single-channel images used by the score sweep.
    pub side: usize,
    pub mean: f64,
    pub variance: f64,
    pub sigma: f64,
    pub held_out: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub transforms: Vec<HighDimTransform>,
    pub restore_trials: usize,
    pub restore_side: usize,
    pub restore_keep_fraction: f64,
    pub restore_lambda: f64,
    pub restore_variance: f64,
    pub restore_rho: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sample_counts: vec![100, 1000, 10000],
            seeds: vec![0, 1, 2, 3, 4],
            side: 4,
            mean: 0.5,
            variance: 0.04,
            sigma: 0.2,
            held_out: 1000,
            iterations: 3000,
            batch_size: 64,
            learning_rate: 0.01,
            final_lr_fraction: 0.01,
            transforms: vec![HighDimTransform::Identity, HighDimTransform::Copy, HighDimTransform::Pool],
            restore_trials: 8,
            restore_side: 8,
            restore_keep_fraction: 0.3,
            restore_lambda: 1e6,
            restore_variance: 0.01,
            restore_rho: 0.9,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub restored: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 200, seed: 0 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if !self.out_dir.as_os_str().is_empty() {
            fix(&mut self.out_dir);
        }
        for p in [
            &mut self.model.checkpoint,
            &mut self.model.checkpoint_lowdim,
            &mut self.train.dataset,
            &mut self.degradation.mask_file,
            &mut self.restore.inputs,
            &mut self.eval.restored,
            &mut self.eval.reference,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        if self.out_dir.as_os_str().is_empty() {
            bail!("no output directory: set out_dir in the config or pass --out-dir");
        }
        Ok(&self.out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.schedule.build().unwrap(), NoiseSchedule::default());
        assert_eq!(c.restore.lambda, 1.0);
    }

    #[test]
    fn sections_parse() {
        let c = Config::from_toml(
            r#"
            out_dir = "runs/a"
            [restore]
            transform = "pool"
            mode = "progressive"
            lambda = 1e6
            [degradation]
            mask = "random"
            keep_fraction = 0.3
            [model]
            kind = "gmm"
            components = [{ weight = 0.5, mean = -1.0, variance = 0.01 }, { weight = 0.5, mean = 1.0, variance = 0.01 }]
            "#,
        )
        .unwrap();
        assert_eq!(c.restore.transform, HighDimTransform::Pool);
        assert_eq!(c.restore.mode, RestoreMode::Progressive);
        assert_eq!(c.degradation.mask, MaskKind::Random);
        assert_eq!(c.model.components.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("[restore]\nlamda = 2.0").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = Config::default();
        c.out_dir = "/tmp/x".into();
        c.model.components.push(GmmComponentConfig {
            weight: 1.0,
            mean: 0.1,
            variance: 0.2,
        });
        assert_eq!(Config::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = Config::from_toml("out_dir = \"out\"\n[train]\ndataset = \"imgs\"").unwrap();
        c.resolve_paths(Path::new("/data/run"));
        assert_eq!(c.out_dir, PathBuf::from("/data/run/out"));
        assert_eq!(c.train.dataset, Some(PathBuf::from("/data/run/imgs")));
    }
}
