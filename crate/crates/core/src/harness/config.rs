use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, InputShape, MERGE_DEPTH};
use crate::diffusion::DiffusionProcess;
use crate::error::{Error, Result};
use crate::geolab::LabConfig;
use crate::losses::LossWeights;
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, PhasicConfig, SigmaMode};

/// Side length of the procedural shape images.
pub const IMAGE_SIZE: usize = 16;
const MAX_WIDTH: usize = 1024;
const MAX_DEPTH: usize = 8;
const MAX_STEPS: usize = 100_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Image,
    Point,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Shapes,
    Moons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_source: usize,
    pub m_target: usize,
    /// Permits few-shot target sets larger than 10.
    pub allow_many_shots: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Shapes,
            n_source: 1000,
            m_target: 10,
            allow_many_shots: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaMode,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma: SigmaMode::Posterior,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSpec {
    pub widths: Vec<usize>,
    pub time_dim: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 16],
            time_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhasicSpec {
    pub t_s: f64,
    pub alpha_w: f64,
}

impl Default for PhasicSpec {
    fn default() -> Self {
        let d = PhasicConfig::default();
        Self {
            t_s: d.t_s,
            alpha_w: d.alpha_w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub batch_size: usize,
    pub lr: f64,
    /// Stage-1 iterations (base denoiser, no fusion).
    pub pretrain_iters: usize,
    /// Stage-2 iterations (fusion merge only).
    pub warmup_iters: usize,
    pub adapt_iters: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Adaptation iterations between metrics rows.
    pub metrics_every: usize,
    /// Steps at which the fixed target diffusion loss is evaluated.
    pub eval_steps: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-4,
            pretrain_iters: 3000,
            warmup_iters: 1000,
            adapt_iters: 2000,
            grad_clip: 1.0,
            metrics_every: 100,
            eval_steps: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSpec {
    #[serde(flatten)]
    pub sampler: SamplerConfig,
    /// Number of source items translated by `sample`.
    pub count: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            count: 32,
        }
    }
}

/// Everything one run needs; serialized as JSON and embedded in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub phasic: PhasicSpec,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub sample: SampleSpec,
    #[serde(default)]
    pub geolab: LabConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// Defaults for `mode` with the given seed.
    pub fn new(seed: u64, mode: Mode) -> Self {
        let mut cfg = Self {
            seed,
            mode,
            output_dir: default_output_dir(),
            dataset: DatasetSpec::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserSpec::default(),
            phasic: PhasicSpec::default(),
            loss_weights: LossWeights::default(),
            train: TrainSpec::default(),
            sample: SampleSpec::default(),
            geolab: LabConfig::default(),
        };
        if mode == Mode::Point {
            cfg.dataset.kind = DatasetKind::Moons;
            cfg.dataset.n_source = 256;
            cfg.denoiser.widths = vec![64];
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let ds = &self.dataset;
        if ds.n_source == 0 || ds.m_target == 0 {
            return Err(Error::InvalidConfig(
                "dataset.n_source and dataset.m_target must be >= 1".into(),
            ));
        }
        if ds.m_target > 10 {
            if !ds.allow_many_shots {
                return Err(Error::InvalidConfig(format!(
                    "dataset.m_target = {} exceeds 10; set dataset.allow_many_shots to override",
                    ds.m_target
                )));
            }
            log::warn!("few-shot target set of {} items exceeds 10", ds.m_target);
        }
        match (self.mode, ds.kind) {
            (Mode::Image, DatasetKind::Shapes) | (Mode::Point, DatasetKind::Moons) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "dataset.kind must be shapes for image mode, moons for point mode".into(),
                ))
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 1".into()));
        }
        if t.lr.is_nan() || t.lr <= 0.0 || t.grad_clip.is_nan() || t.grad_clip < 0.0 {
            return Err(Error::InvalidConfig(
                "train.lr must be > 0 and train.grad_clip >= 0".into(),
            ));
        }
        if t.metrics_every == 0 || t.eval_steps == 0 {
            return Err(Error::InvalidConfig(
                "train.metrics_every and train.eval_steps must be >= 1".into(),
            ));
        }
        if self.sample.count == 0 {
            return Err(Error::InvalidConfig("sample.count must be >= 1".into()));
        }
        // caps keep hostile configs from allocating without bound
        if self.denoiser.widths.len() > MAX_DEPTH
            || self.denoiser.widths.iter().any(|&w| w > MAX_WIDTH)
            || self.denoiser.time_dim > MAX_WIDTH
        {
            return Err(Error::InvalidConfig(format!(
                "denoiser.widths and denoiser.time_dim are capped at {MAX_DEPTH} levels of {MAX_WIDTH}"
            )));
        }
        if self.schedule.steps > MAX_STEPS {
            return Err(Error::InvalidConfig(format!("schedule.steps is capped at {MAX_STEPS}")));
        }
        self.loss_weights.validate()?;
        self.phasic().validate()?;
        self.denoiser_config().validate()?;
        self.schedule()?;
        self.sample.sampler.validate(self.schedule.steps)?;
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        match self.mode {
            Mode::Image => InputShape::Image {
                channels: 1,
                height: IMAGE_SIZE,
                width: IMAGE_SIZE,
            },
            Mode::Point => InputShape::Point { dim: 2 },
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            input: self.input_shape(),
            widths: self.denoiser.widths.clone(),
            time_dim: self.denoiser.time_dim,
            merge_depth: MERGE_DEPTH,
        }
    }

    pub fn phasic(&self) -> PhasicConfig {
        PhasicConfig {
            t_s: self.phasic.t_s,
            alpha_w: self.phasic.alpha_w,
            total_steps: self.schedule.steps,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        match s.kind {
            ScheduleKind::Cosine => NoiseSchedule::cosine(s.steps, s.sigma),
            ScheduleKind::Linear => NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end, s.sigma),
        }
    }

    pub fn process(&self) -> Result<DiffusionProcess> {
        Ok(DiffusionProcess::new(self.schedule()?))
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::new(self.denoiser_config(), self.phasic())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::from_json("{}").is_err());
        let cfg = RunConfig::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(cfg, RunConfig::new(4, Mode::Image));
    }

    #[test]
    fn defaults_follow_training_details() {
        let cfg = RunConfig::new(0, Mode::Image);
        assert_eq!(cfg.schedule.steps, 1000);
        assert_eq!(cfg.phasic.t_s, 300.0);
        assert_eq!(cfg.phasic.alpha_w, 3.0);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.loss_weights.lambda_ddc, 1.0);
        assert_eq!(cfg.loss_weights.lambda_style, 1.0);
        assert_eq!(cfg.sample.sampler.m, 800);
        assert_eq!(cfg.sample.sampler.n, 8);
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::new(9, Mode::Point);
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn violations_name_the_field() {
        let err = RunConfig::from_json(r#"{"seed": 1, "sample": {"M": 100, "t_stop": 200}}"#).unwrap_err();
        assert!(err.to_string().contains("t_stop"));
        let err = RunConfig::from_json(r#"{"seed": 1, "dataset": {"m_target": 20}}"#).unwrap_err();
        assert!(err.to_string().contains("m_target"));
        assert!(RunConfig::from_json(r#"{"seed": 1, "dataset": {"m_target": 20, "allow_many_shots": true}}"#).is_ok());
        let err = RunConfig::from_json(r#"{"seed": 1, "train": {"batch_size": 0}}"#).unwrap_err();
        assert!(err.to_string().contains("batch_size"));
        assert!(RunConfig::from_json(r#"{"seed": 1, "bogus": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "mode": "point"}"#).is_err());
    }
}
