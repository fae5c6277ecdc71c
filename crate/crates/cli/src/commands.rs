//! Subcommands. Each reads its inputs, writes artifacts under `cfg.out`
//! and returns what it wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use controlvideo::diffusion::NoiseSchedule;
use controlvideo::edit::{edit_video, initial_latent};
use controlvideo::longvideo::{long_edit, WindowPlan};
use controlvideo::metrics::{report, SsimConfig};
use controlvideo::model::{ControlStack, ModelParams, PromptEmbedding, DEFAULT_MAX_TOKENS};
use controlvideo::training::{count_trainable, one_shot_finetune, smoothed};
use controlvideo::LatentVideo;

use crate::checkpoint;
use crate::config::{RunConfig, CHECKPOINT_FILE, CONTROLS_FILE, EDITED_FILE, MASK_FILE, VIDEO_FILE};
use crate::controls::{control_stack, extract_controls};
use crate::error::{CliError, Result};
use crate::ppm::write_frames;
use crate::runner::RayonRunner;
use crate::synth::synthesize_video;
use crate::tensorfile::{read_video, write_video};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SynthesizeData,
    ExtractControls,
    Train,
    Edit,
    LongEdit,
    Metrics,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::SynthesizeData,
        Command::ExtractControls,
        Command::Train,
        Command::Edit,
        Command::LongEdit,
        Command::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SynthesizeData => "synthesize-data",
            Command::ExtractControls => "extract-controls",
            Command::Train => "train",
            Command::Edit => "edit",
            Command::LongEdit => "long-edit",
            Command::Metrics => "metrics",
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    /// Text for standard output.
    pub stdout: String,
}

pub const FRAMES_DIR: &str = "frames";
pub const LOSS_FILE: &str = "loss.txt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const WEIGHTS_FILE: &str = "fusion_weights.txt";

struct Writer<'a> {
    out: &'a Path,
    outcome: Outcome,
}

impl Writer<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn video(&mut self, name: &str, v: &LatentVideo) -> Result<()> {
        let p = self.path(name);
        write_video(&p, v)?;
        self.outcome.artifacts.push(p);
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).map_err(CliError::io(&p))?;
        self.outcome.artifacts.push(p);
        Ok(())
    }

    fn frames(&mut self, stem: &str, v: &LatentVideo, lo: f64, hi: f64) -> Result<()> {
        let paths = write_frames(&self.path(FRAMES_DIR), stem, v, lo, hi)?;
        self.outcome.artifacts.extend(paths);
        Ok(())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key}={value}");
}

fn load_controls(cfg: &RunConfig, video: &LatentVideo) -> Result<ControlStack> {
    let path = cfg.controls_path();
    let maps = if path.is_file() {
        read_video(&path)?
    } else {
        log::info!("no control file at {}, extracting {}", path.display(), cfg.control_kind.name());
        extract_controls(video, cfg.control_kind)
    };
    control_stack(maps, cfg.control_scale)
}

/// Checkpoint if one exists, otherwise fresh weights from the seed.
fn load_model(cfg: &RunConfig) -> Result<(ModelParams, String)> {
    let path = cfg.checkpoint_path();
    if path.is_file() {
        Ok((checkpoint::load(&path)?, file_name(&path)))
    } else {
        log::info!("no checkpoint at {}, using fresh weights", path.display());
        Ok((ModelParams::new(cfg.model_config(), cfg.seed)?, format!("fresh(seed={})", cfg.seed)))
    }
}

fn prompt(text: &str, params: &ModelParams) -> Result<PromptEmbedding> {
    Ok(PromptEmbedding::encode(text, params.config().text_dim, DEFAULT_MAX_TOKENS)?)
}

fn sampler_meta(meta: &mut String, cfg: &RunConfig, model: &str) {
    kv(meta, "model", model);
    kv(meta, "seed", cfg.seed);
    kv(meta, "steps", cfg.steps);
    kv(meta, "guidance_scale", cfg.guidance_scale);
    kv(meta, "init_mode", format!("{:?}", cfg.init_mode));
    kv(meta, "start_timestep", cfg.start_timestep);
    kv(meta, "unconditional_prompt", "null (one zero token)");
    kv(meta, "source_prompt", &cfg.source_prompt);
    kv(meta, "target_prompt", &cfg.target_prompt);
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate(cmd)?;
    fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    let mut w = Writer {
        out: &cfg.out,
        outcome: Outcome::default(),
    };
    let sched = NoiseSchedule::stable_diffusion();
    let (lo, hi) = (cfg.frame_min, cfg.frame_max);
    match cmd {
        Command::SynthesizeData => {
            let clip = synthesize_video(cfg.video_kind, cfg.frames, cfg.channels, cfg.height, cfg.width, cfg.seed)?;
            w.video(VIDEO_FILE, &clip.video)?;
            w.video(MASK_FILE, &clip.mask)?;
            w.frames("source", &clip.video, lo, hi)?;
        }
        Command::ExtractControls => {
            let video = read_video(&cfg.source_path())?;
            let maps = extract_controls(&video, cfg.control_kind);
            w.video(CONTROLS_FILE, &maps)?;
            w.frames(cfg.control_kind.name(), &maps, 0.0, 1.0)?;
        }
        Command::Train => {
            let video = read_video(&cfg.source_path())?;
            let stack = load_controls(cfg, &video)?;
            let (params, model) = match &cfg.checkpoint {
                Some(p) => (checkpoint::load(p)?, file_name(p)),
                None => (ModelParams::new(cfg.model_config(), cfg.seed)?, format!("fresh(seed={})", cfg.seed)),
            };
            let src = prompt(&cfg.source_prompt, &params)?;
            let train = cfg.train_config();
            let (trained, trace) = one_shot_finetune(&video, &stack, &src, &params, &train, &sched)?;
            let ck = cfg.out.join(CHECKPOINT_FILE);
            checkpoint::save(&ck, &trained)?;
            w.outcome.artifacts.push(ck);
            let mut table = String::from("iteration\tloss\n");
            for (i, l) in trace.iter().enumerate() {
                let _ = writeln!(table, "{}\t{l}", i + 1);
            }
            w.text(LOSS_FILE, &table)?;
            let sm = smoothed(&trace, 20);
            let mut meta = String::new();
            kv(&mut meta, "model", model);
            kv(&mut meta, "seed", cfg.seed);
            kv(&mut meta, "iterations", train.iterations);
            kv(&mut meta, "learning_rate", train.learning_rate);
            kv(&mut meta, "optimizer", "adam");
            kv(&mut meta, "adam_beta1", train.adam.beta1);
            kv(&mut meta, "adam_beta2", train.adam.beta2);
            kv(&mut meta, "adam_eps", train.adam.eps);
            kv(&mut meta, "timestep_sampling", format!("uniform[1,{}]", sched.steps()));
            kv(&mut meta, "noise", "independent per frame");
            kv(&mut meta, "key_frame", train.key_frame);
            kv(&mut meta, "trainable_roles", format!("{:?}", train.trainable.roles()));
            kv(&mut meta, "trainable_scalars", count_trainable(&params, &train.trainable));
            kv(&mut meta, "smoothed_loss_first", sm.first().copied().unwrap_or(f64::NAN));
            kv(&mut meta, "smoothed_loss_last", sm.last().copied().unwrap_or(f64::NAN));
            w.text("train.txt", &meta)?;
        }
        Command::Edit => {
            let video = read_video(&cfg.source_path())?;
            let stack = load_controls(cfg, &video)?;
            let (params, model) = load_model(cfg)?;
            let (src, tgt) = (prompt(&cfg.source_prompt, &params)?, prompt(&cfg.target_prompt, &params)?);
            let edited = edit_video(&video, &stack, &src, &tgt, &params, &sched, &cfg.sampler_config())?;
            w.video(EDITED_FILE, &edited)?;
            w.frames("edited", &edited, lo, hi)?;
            let mut meta = String::new();
            sampler_meta(&mut meta, cfg, &model);
            w.text("edit.txt", &meta)?;
        }
        Command::LongEdit => {
            let video = read_video(&cfg.source_path())?;
            let stack = load_controls(cfg, &video)?;
            let (params, model) = load_model(cfg)?;
            let (src, tgt) = (prompt(&cfg.source_prompt, &params)?, prompt(&cfg.target_prompt, &params)?);
            let long = cfg.long_config();
            let warnings = long.validate()?;
            let sampler = cfg.sampler_config();
            let plan = WindowPlan::new(video.frames(), long.window, long.overlap)?;
            let runner = RayonRunner::new(cfg.threads)?;
            let x_init = initial_latent(&video, &stack, &src, &params, &sched, &sampler)?;
            let mut dump = String::from("timestep\tframe\twindow\toffset\tweight\n");
            let mut hook = |t: usize, coeffs: &[Vec<(usize, usize, f64)>]| {
                for (frame, terms) in coeffs.iter().enumerate() {
                    for (j, l, wt) in terms {
                        let _ = writeln!(dump, "{t}\t{frame}\t{j}\t{l}\t{wt}");
                    }
                }
            };
            let hook_ref: Option<controlvideo::longvideo::WeightDump> = if cfg.dump_weights { Some(&mut hook) } else { None };
            let edited = long_edit(&x_init, &stack, &tgt, &params, &sched, &long, &sampler, &runner, hook_ref)?;
            w.video(EDITED_FILE, &edited)?;
            w.frames("edited", &edited, lo, hi)?;
            if cfg.dump_weights {
                w.text(WEIGHTS_FILE, &dump)?;
            }
            let mut meta = String::new();
            sampler_meta(&mut meta, cfg, &model);
            kv(&mut meta, "window", long.window);
            kv(&mut meta, "overlap", long.overlap);
            kv(&mut meta, "weight_fn", long.weight_fn.name());
            kv(&mut meta, "sigma", cfg.sigma);
            kv(&mut meta, "key_weight", long.key_fusion.weight);
            kv(&mut meta, "key_fusion", format!("{:?}", long.key_fusion.mode));
            kv(&mut meta, "windows", plan.len());
            let ranges: Vec<String> = plan.windows().iter().map(|r| format!("{}..{}", r.start, r.end)).collect();
            kv(&mut meta, "window_ranges", ranges.join(","));
            for (i, msg) in warnings.iter().enumerate() {
                kv(&mut meta, &format!("warning{i}"), msg);
            }
            w.text("long_edit.txt", &meta)?;
        }
        Command::Metrics => {
            let source = read_video(&cfg.source_path())?;
            let edited = read_video(&cfg.edited_path())?;
            let mask_path = cfg.mask_path();
            let mask = if mask_path.is_file() { Some(read_video(&mask_path)?) } else { None };
            let r = report(&source, &edited, mask.as_ref(), &SsimConfig::default())?;
            let mut body = String::new();
            kv(&mut body, "ssim", r.ssim);
            if let Some(m) = r.masked_ssim {
                kv(&mut body, "masked_ssim", m);
            }
            kv(&mut body, "temporal_consistency", r.temporal_consistency);
            kv(&mut body, "drift", r.drift);
            kv(&mut body, "frames", edited.frames());
            w.text(METRICS_FILE, &body)?;
            w.outcome.stdout = body;
        }
    }
    Ok(w.outcome)
}
