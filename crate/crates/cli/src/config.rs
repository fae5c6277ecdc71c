//! Run configuration: one flat TOML table.
//!
//! Every key is optional and unknown keys are rejected. Input paths left
//! unset default to the artifacts a previous subcommand wrote under `out`.
//!
//! ```toml
//! out = "runs/square"
//! video_kind = "moving_square"
//! frames = 8
//! control_kind = "edge_like"
//! source_prompt = "a white square"
//! target_prompt = "a red square"
//! iterations = 300
//! steps = 50
//! guidance_scale = 12.0
//! window = 16
//! overlap = 8
//! weight_fn = "gaussian"
//! key_weight = 0.3
//! seed = 0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use controlvideo::diffusion::{InitMode, SamplerConfig};
use controlvideo::longvideo::{KeyFusionConfig, KeyFusionMode, LongVideoConfig, WeightFunction};
use controlvideo::model::ModelConfig;
use controlvideo::training::TrainConfig;

use crate::commands::Command;
use crate::controls::ControlKind;
use crate::error::{CliError, Result};
use crate::synth::VideoKind;

pub const VIDEO_FILE: &str = "video.cvtf";
pub const MASK_FILE: &str = "mask.cvtf";
pub const CONTROLS_FILE: &str = "controls.cvtf";
pub const CHECKPOINT_FILE: &str = "checkpoint.cvck";
pub const EDITED_FILE: &str = "edited.cvtf";

const MAX_TIMESTEP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    DdimInversion,
    NoisySource,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Gaussian,
    Constant,
    Linear,
    Cosine,
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyFusionKind {
    KeyFramesOnly,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory for every artifact.
    pub out: PathBuf,
    pub source: Option<PathBuf>,
    pub controls: Option<PathBuf>,
    /// Unedited-area mask, `[N or 1, 1, H, W]`, 1 = unedited.
    pub mask: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub edited: Option<PathBuf>,

    pub video_kind: VideoKind,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub control_kind: ControlKind,
    pub control_scale: f64,
    /// Latent range mapped onto 0..=255 in exported frames.
    pub frame_min: f64,
    pub frame_max: f64,

    pub model_width: usize,
    pub text_dim: usize,
    pub ff_mult: usize,
    pub out_gain: f64,

    pub source_prompt: String,
    pub target_prompt: String,

    pub iterations: usize,
    pub learning_rate: f64,
    pub key_frame: usize,

    pub steps: usize,
    pub guidance_scale: f64,
    pub init_mode: InitKind,
    pub start_timestep: usize,

    pub window: usize,
    pub overlap: usize,
    pub weight_fn: WeightKind,
    pub sigma: f64,
    pub key_weight: f64,
    pub key_fusion: KeyFusionKind,
    pub dump_weights: bool,

    pub seed: u64,
    pub threads: Option<usize>,
    pub log_level: LogLevel,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        let train = TrainConfig::default();
        let long = LongVideoConfig::default();
        let model = ModelConfig::default();
        RunConfig {
            out: PathBuf::from("out"),
            source: None,
            controls: None,
            mask: None,
            checkpoint: None,
            edited: None,
            video_kind: VideoKind::MovingSquare,
            frames: 8,
            channels: model.latent_channels,
            height: 8,
            width: 8,
            control_kind: ControlKind::EdgeLike,
            control_scale: 1.0,
            frame_min: -1.0,
            frame_max: 1.0,
            model_width: model.width,
            text_dim: model.text_dim,
            ff_mult: model.ff_mult,
            out_gain: model.out_gain,
            source_prompt: "a white square".into(),
            target_prompt: "a red square".into(),
            iterations: train.iterations,
            learning_rate: train.learning_rate,
            key_frame: train.key_frame,
            steps: sampler.steps,
            guidance_scale: sampler.guidance_scale,
            init_mode: InitKind::DdimInversion,
            start_timestep: sampler.start_timestep,
            window: long.window,
            overlap: long.overlap,
            weight_fn: WeightKind::Gaussian,
            sigma: 0.1,
            key_weight: long.key_fusion.weight,
            key_fusion: KeyFusionKind::KeyFramesOnly,
            dump_weights: false,
            seed: 0,
            threads: None,
            log_level: LogLevel::Info,
        }
    }
}

fn check(bad: &mut Vec<String>, ok: bool, field: &str, why: impl FnOnce() -> String) {
    if !ok {
        bad.push(format!("{field}: {}", why()));
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    fn artifact(&self, explicit: &Option<PathBuf>, file: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(file))
    }

    pub fn source_path(&self) -> PathBuf {
        self.artifact(&self.source, VIDEO_FILE)
    }

    pub fn controls_path(&self) -> PathBuf {
        self.artifact(&self.controls, CONTROLS_FILE)
    }

    pub fn mask_path(&self) -> PathBuf {
        self.artifact(&self.mask, MASK_FILE)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.artifact(&self.checkpoint, CHECKPOINT_FILE)
    }

    pub fn edited_path(&self) -> PathBuf {
        self.artifact(&self.edited, EDITED_FILE)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            latent_channels: self.channels,
            width: self.model_width,
            text_dim: self.text_dim,
            ff_mult: self.ff_mult,
            out_gain: self.out_gain,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            seed: self.seed,
            key_frame: self.key_frame,
            ..TrainConfig::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            init_mode: match self.init_mode {
                InitKind::DdimInversion => InitMode::DdimInversion,
                InitKind::NoisySource => InitMode::NoisySource,
                InitKind::Gaussian => InitMode::Gaussian,
            },
            start_timestep: self.start_timestep,
            seed: self.seed,
        }
    }

    pub fn weight_function(&self) -> WeightFunction {
        match self.weight_fn {
            WeightKind::Gaussian => WeightFunction::Gaussian { sigma: self.sigma },
            WeightKind::Constant => WeightFunction::Constant,
            WeightKind::Linear => WeightFunction::Linear,
            WeightKind::Cosine => WeightFunction::Cosine,
            WeightKind::InverseSqrt => WeightFunction::InverseSqrt,
        }
    }

    pub fn long_config(&self) -> LongVideoConfig {
        LongVideoConfig {
            window: self.window,
            overlap: self.overlap,
            weight_fn: self.weight_function(),
            key_fusion: KeyFusionConfig {
                weight: self.key_weight,
                mode: match self.key_fusion {
                    KeyFusionKind::KeyFramesOnly => KeyFusionMode::KeyFramesOnly,
                    KeyFusionKind::Literal => KeyFusionMode::Literal,
                },
            },
        }
    }

    /// Checks every field `cmd` depends on and reports all violations at once.
    pub fn validate(&self, cmd: Command) -> Result<()> {
        let mut bad = Vec::new();
        let b = &mut bad;
        check(b, self.frames >= 1, "frames", || "must be >= 1".into());
        check(b, self.channels >= 1, "channels", || "must be >= 1".into());
        for (name, v) in [("height", self.height), ("width", self.width)] {
            check(b, v >= 4 && v % 4 == 0, name, || format!("{v} is not a positive multiple of 4"));
        }
        check(b, self.control_scale.is_finite() && self.control_scale >= 0.0, "control_scale", || {
            "must be finite and >= 0".into()
        });
        check(b, self.frame_max > self.frame_min, "frame_max", || {
            format!("must exceed frame_min = {}", self.frame_min)
        });
        check(b, self.model_width >= 2 && self.model_width.is_multiple_of(2), "model_width", || {
            "must be even and >= 2".into()
        });
        check(b, self.text_dim >= 1, "text_dim", || "must be >= 1".into());
        check(b, self.ff_mult >= 1, "ff_mult", || "must be >= 1".into());
        check(b, self.out_gain.is_finite() && self.out_gain > 0.0, "out_gain", || {
            "must be finite and > 0".into()
        });
        check(b, self.iterations >= 1, "iterations", || "must be >= 1".into());
        check(b, self.learning_rate.is_finite() && self.learning_rate > 0.0, "learning_rate", || {
            "must be finite and > 0".into()
        });
        check(b, self.key_frame < self.frames, "key_frame", || {
            format!("must be below frames = {}", self.frames)
        });
        check(b, (1..=MAX_TIMESTEP).contains(&self.start_timestep), "start_timestep", || {
            format!("must lie in [1, {MAX_TIMESTEP}]")
        });
        check(b, self.steps >= 1 && self.steps <= self.start_timestep, "steps", || {
            format!("must lie in [1, start_timestep = {}]", self.start_timestep)
        });
        check(b, self.guidance_scale.is_finite() && self.guidance_scale >= 0.0, "guidance_scale", || {
            "must be finite and >= 0".into()
        });
        check(b, self.window >= 1, "window", || "must be >= 1".into());
        check(b, self.overlap < self.window.max(1), "overlap", || {
            format!("must be below window = {}", self.window)
        });
        check(b, self.sigma.is_finite() && self.sigma > 0.0, "sigma", || "must be finite and > 0".into());
        check(b, (0.0..=1.0).contains(&self.key_weight), "key_weight", || "must lie in [0, 1]".into());
        check(b, self.threads != Some(0), "threads", || "must be >= 1".into());

        // Explicit paths must exist; defaults under `out` are optional except
        // for the source and the edited video.
        let mut must_exist = |field: &str, required: bool, path: PathBuf| {
            if required {
                check(b, path.is_file(), field, || format!("{} does not exist", path.display()));
            }
        };
        if cmd != Command::SynthesizeData {
            must_exist("source", true, self.source_path());
            must_exist("controls", self.controls.is_some(), self.controls_path());
            must_exist("checkpoint", self.checkpoint.is_some(), self.checkpoint_path());
            must_exist("mask", self.mask.is_some(), self.mask_path());
        }
        if cmd == Command::Metrics {
            must_exist("edited", true, self.edited_path());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad))
        }
    }
}
