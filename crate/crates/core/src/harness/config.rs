//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelKind;
use crate::denoiser::{ConditioningMode, DenoiserTraining};
use crate::engine::{SamplerConfig, StepRule};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorTraining, JointOptions};
use crate::latent_ops::MaskStrategy;
use crate::schedule::NoiseSchedule;
use crate::source::SourceModel;

use super::pipeline::Scheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub latent_dim: usize,
    pub output: Option<PathBuf>,
    pub source: SourceModel,
    pub channel: ChannelSpec,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserSpec,
    pub estimator: EstimatorSpec,
    pub pipeline: PipelineSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            trials: 500,
            latent_dim: 256,
            output: None,
            source: SourceModel::UnitGaussian,
            channel: ChannelSpec::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserSpec::default(),
            estimator: EstimatorSpec::default(),
            pipeline: PipelineSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: Vec<f64>,
    pub block_lengths: Vec<usize>,
    /// Replaces the random slow-fading gain by this `[re, im]` value.
    pub fixed_gain: Option<[f64; 2]>,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            kind: ChannelKind::Awgn,
            snr_db: vec![0.0],
            block_lengths: vec![1],
            fixed_gain: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub e: f64,
    pub g: f64,
    pub tau: f64,
    pub steps: usize,
    pub slow_step: StepRule,
    pub fast_step: StepRule,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        let p = SamplerConfig::default();
        ScheduleSpec {
            e: s.e,
            g: s.g,
            tau: s.tau,
            steps: p.steps,
            slow_step: p.slow_rule,
            fast_step: p.fast_rule,
        }
    }
}

impl ScheduleSpec {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.e, self.g, self.tau).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            slow_rule: self.slow_step,
            fast_rule: self.fast_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Analytic,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSpec {
    pub kind: ModelKind,
    pub conditioning: ConditioningMode,
    pub model_path: Option<PathBuf>,
    pub training: DenoiserTraining,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec {
            kind: ModelKind::Analytic,
            conditioning: ConditioningMode::None,
            model_path: None,
            training: DenoiserTraining::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Moment,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub snr_model: Option<PathBuf>,
    pub phase_model: Option<PathBuf>,
    pub max_iters: usize,
    pub tol: f64,
    pub training: EstimatorTraining,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        let j = JointOptions::default();
        EstimatorSpec {
            kind: EstimatorKind::Moment,
            snr_model: None,
            phase_model: None,
            max_iters: j.max_iters,
            tol: j.tol,
            training: EstimatorTraining::default(),
        }
    }
}

impl EstimatorSpec {
    pub fn joint_options(&self) -> JointOptions {
        JointOptions {
            max_iters: self.max_iters,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub embed_dim: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            strategy: MaskStrategy::L2Norm,
            ratio: 0.0,
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    /// Estimate `(α, φ)` blindly instead of using the true channel state.
    pub pilot_free: bool,
    pub schemes: Vec<Scheme>,
    pub mask: MaskSpec,
    pub psnr_peak: f64,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            pilot_free: false,
            schemes: vec![Scheme::Diffusion],
            mask: MaskSpec::default(),
            psnr_peak: 1.0,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Reads and validates a config file. Relative model paths resolve
    /// against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    /// Parses TOML without touching the filesystem.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| cfg_err(e.message().replace('\n', " ")))?;
        cfg.source = cfg.source.normalized().map_err(|e| cfg_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = dir.join(&*path);
                }
            }
        };
        fix(&mut self.denoiser.model_path);
        fix(&mut self.estimator.snr_model);
        fix(&mut self.estimator.phase_model);
    }

    /// Checks value ranges, grid shape and model file presence.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(cfg_err("trials must be at least 1"));
        }
        if self.latent_dim == 0 || !self.latent_dim.is_multiple_of(2) {
            return Err(cfg_err(format!(
                "latent_dim {} must be even and positive",
                self.latent_dim
            )));
        }
        let ch = &self.channel;
        if ch.snr_db.is_empty() || ch.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(cfg_err("channel.snr_db needs at least one finite value"));
        }
        if ch.block_lengths.is_empty() || ch.block_lengths.contains(&0) {
            return Err(cfg_err("channel.block_lengths needs positive entries"));
        }
        if ch.fixed_gain.is_some() && ch.kind != ChannelKind::SlowFading {
            return Err(cfg_err("channel.fixed_gain applies to slow_fading only"));
        }
        self.schedule.schedule()?;
        if self.schedule.steps == 0 {
            return Err(cfg_err("schedule.steps must be at least 1"));
        }
        let p = &self.pipeline;
        if p.schemes.is_empty() {
            return Err(cfg_err("pipeline.schemes is empty"));
        }
        for (i, s) in p.schemes.iter().enumerate() {
            if p.schemes[..i].contains(s) {
                return Err(cfg_err(format!("scheme `{}` listed twice", s.label())));
            }
        }
        if !(0.0..1.0).contains(&p.mask.ratio) {
            return Err(cfg_err(format!("mask ratio {} not in [0, 1)", p.mask.ratio)));
        }
        if p.mask.ratio > 0.0 && (p.mask.embed_dim == 0 || !self.latent_dim.is_multiple_of(p.mask.embed_dim)) {
            return Err(cfg_err("latent_dim must be a multiple of mask.embed_dim"));
        }
        if !(p.psnr_peak > 0.0) {
            return Err(cfg_err("psnr_peak must be positive"));
        }
        if p.pilot_free {
            if ch.kind == ChannelKind::FastFading {
                return Err(cfg_err("pilot-free estimation needs a single-gain channel"));
            }
            if self.estimator.max_iters == 0 || !(self.estimator.tol > 0.0) {
                return Err(cfg_err("estimator.max_iters and estimator.tol must be positive"));
            }
            if self.estimator.kind == EstimatorKind::Moment {
                if (self.source.fourth_moment() - 3.0).abs() < 1e-12 {
                    return Err(cfg_err("moment estimation needs a source with nonzero excess kurtosis"));
                }
                if self.source.complex_mean() == 0.0 {
                    return Err(cfg_err("moment phase estimation needs a source with a nonzero mean"));
                }
            }
        }
        if self.denoiser.kind == ModelKind::Trained {
            require_file("denoiser.model_path", self.denoiser.model_path.as_deref())?;
        }
        if p.pilot_free && self.estimator.kind == EstimatorKind::Trained {
            require_file("estimator.snr_model", self.estimator.snr_model.as_deref())?;
            require_file("estimator.phase_model", self.estimator.phase_model.as_deref())?;
        }
        Ok(())
    }
}

fn require_file(key: &str, path: Option<&Path>) -> Result<()> {
    match path {
        None => Err(cfg_err(format!("{key} is required"))),
        Some(p) if !p.is_file() => Err(cfg_err(format!("{key}: {} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_a_full_document() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 7
            trials = 3
            latent_dim = 32

            [source]
            kind = "gaussian_mixture"
            components = [
              { weight = 0.5, mean = 0.9, variance = 0.19 },
              { weight = 0.5, mean = -0.9, variance = 0.19 },
            ]

            [channel]
            kind = "fast_fading"
            snr_db = [-5.0, 0.0]
            block_lengths = [1, 4]

            [schedule]
            steps = 20
            fast_step = "proportional"

            [pipeline]
            schemes = ["diffusion", "diffusion_no_fill", "equalized"]
            mask = { strategy = "random", ratio = 0.25, embed_dim = 8 }
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.sampler().fast_rule, StepRule::Proportional);
        assert_eq!(cfg.schedule.tau, 0.7);
        assert_eq!(cfg.source.num_components(), 2);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_toml("bogus = 1"),
            Err(Error::Config(_))
        ));
        let zero = ExperimentConfig::from_toml("trials = 0").unwrap();
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        let odd = ExperimentConfig::from_toml("latent_dim = 7").unwrap();
        assert!(odd.validate().is_err());
    }

    #[test]
    fn trained_denoiser_needs_existing_file() {
        let cfg = ExperimentConfig::from_toml("[denoiser]\nkind = \"trained\"\nmodel_path = \"/nonexistent/model\"\n")
            .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn pilot_free_rejects_gaussian_source() {
        let cfg = ExperimentConfig::from_toml("[pipeline]\npilot_free = true\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_file_is_a_config_error() {
        assert!(matches!(
            ExperimentConfig::from_path(Path::new("/nonexistent/cfg.toml")),
            Err(Error::Config(_))
        ));
    }
}
