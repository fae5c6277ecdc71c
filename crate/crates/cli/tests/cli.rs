use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use controlvideo::model::{ModelConfig, ModelParams};
use controlvideo::training::{count_trainable, TrainableSet};
use controlvideo_cli::checkpoint;
use controlvideo_cli::synth::{synthesize_video, VideoKind};
use controlvideo_cli::tensorfile::{read_video, write_video};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_controlvideo"));
    c.env_remove("CONTROLVIDEO_OUT")
        .env_remove("CONTROLVIDEO_THREADS")
        .env("RUST_LOG", "error");
    c
}

fn run(config: &Path, out: &Path, cmd: &str) -> Output {
    bin()
        .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd])
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn default_edit_writes_eight_frames() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let out = dir.path().join("o");
    ok(run(&cfg, &out, "synthesize-data"));
    ok(run(&cfg, &out, "edit"));
    let edited = read_video(&out.join("edited.cvtf")).unwrap();
    assert_eq!(edited.shape(), [8, 4, 8, 8]);
    assert!(edited.is_finite());
    let frames = fs::read_dir(out.join("frames"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("edited_"))
        .count();
    assert_eq!(frames, 8);
    let meta = fs::read_to_string(out.join("edit.txt")).unwrap();
    assert!(meta.contains("steps=50") && meta.contains("guidance_scale=12"));
}

#[test]
fn short_long_edit_matches_edit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "iterations = 5\nlearning_rate = 0.01\nsteps = 4\nstart_timestep = 700\n",
    );
    let out = dir.path().join("o");
    ok(run(&cfg, &out, "synthesize-data"));
    ok(run(&cfg, &out, "train"));
    ok(run(&cfg, &out, "edit"));
    let short = fs::read(out.join("edited.cvtf")).unwrap();
    ok(run(&cfg, &out, "long-edit"));
    let long = fs::read(out.join("edited.cvtf")).unwrap();
    assert_eq!(short, long);
    let meta = fs::read_to_string(out.join("long_edit.txt")).unwrap();
    assert!(meta.contains("windows=1\n"), "{meta}");
    let ck = checkpoint::load(&out.join("checkpoint.cvck")).unwrap();
    let gate = ck.get("main.down1.attn.temporal.gate").unwrap();
    assert!(gate.tensor.data().iter().any(|&v| v != 0.0));
}

#[test]
fn metrics_of_source_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "c.toml", &format!("edited = {:?}\n", out.join("video.cvtf")));
    ok(run(&cfg, &out, "synthesize-data"));
    let o = ok(run(&cfg, &out, "metrics"));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l == "ssim=1"), "{text}");
    assert!(text.lines().any(|l| l == "masked_ssim=1"), "{text}");
    assert_eq!(fs::read_to_string(out.join("metrics.txt")).unwrap(), text);
}

#[test]
fn validation_lists_every_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "steps = 0\nwidth = 7\nkey_weight = 2.0\ncheckpoint = \"missing.cvck\"\n",
    );
    let o = run(&cfg, &dir.path().join("o"), "edit");
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["steps", "width", "key_weight", "checkpoint", "source"] {
        assert!(err.contains(&format!("{field}:")), "{field} missing in {err}");
    }
}

#[test]
fn unknown_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "frame = 8\n");
    let o = run(&cfg, &dir.path().join("o"), "synthesize-data");
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("frame"));
}

#[test]
fn env_overrides_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from_env");
    ok(bin().arg("synthesize-data").env("CONTROLVIDEO_OUT", &env_out).output().unwrap());
    assert!(env_out.join("video.cvtf").is_file());
    let flag_out = dir.path().join("from_flag");
    ok(bin()
        .args(["--out", flag_out.to_str().unwrap(), "synthesize-data"])
        .env("CONTROLVIDEO_OUT", dir.path().join("unused"))
        .output()
        .unwrap());
    assert!(flag_out.join("video.cvtf").is_file());
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn seed_flag_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(bin()
        .args(["--out", a.to_str().unwrap(), "--seed", "1", "synthesize-data"])
        .output()
        .unwrap());
    ok(bin()
        .args(["--out", b.to_str().unwrap(), "--seed", "2", "synthesize-data"])
        .output()
        .unwrap());
    assert_ne!(fs::read(a.join("video.cvtf")).unwrap(), fs::read(b.join("video.cvtf")).unwrap());
}

#[test]
fn thread_count_does_not_change_long_edit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "frames = 12\nwindow = 4\noverlap = 2\nsteps = 3\nstart_timestep = 500\n",
    );
    let out = dir.path().join("o");
    ok(run(&cfg, &out, "synthesize-data"));
    let mut results = Vec::new();
    for threads in ["1", "3"] {
        ok(bin()
            .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "long-edit"])
            .env("CONTROLVIDEO_THREADS", threads)
            .output()
            .unwrap());
        results.push(fs::read(out.join("edited.cvtf")).unwrap());
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn weight_dump_rows_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "frames = 10\nwindow = 4\noverlap = 2\nsteps = 2\nstart_timestep = 300\ndump_weights = true\n",
    );
    let out = dir.path().join("o");
    ok(run(&cfg, &out, "synthesize-data"));
    ok(run(&cfg, &out, "long-edit"));
    let text = fs::read_to_string(out.join("fusion_weights.txt")).unwrap();
    let mut sums = std::collections::BTreeMap::<(u64, u64), f64>::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        *sums.entry((f[0].parse().unwrap(), f[1].parse().unwrap())).or_default() += f[4].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 2 * 10);
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-12));
}

/// Trainable scalars found by classifying checkpoint tensor names directly.
#[test]
fn trainable_count_matches_checkpoint_walk() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::new(ModelConfig::default(), 0).unwrap();
    let path = dir.path().join("m.cvck");
    checkpoint::save(&path, &params).unwrap();
    let raw = checkpoint::load_raw(&path).unwrap();
    let walked: usize = raw
        .tensors
        .iter()
        .filter(|(name, _)| name.ends_with(".attn.kf.wo") || name.contains(".attn.temporal."))
        .map(|(_, t)| t.len())
        .sum();
    assert_eq!(count_trainable(&params, &TrainableSet::default()), walked);
    assert!(walked > 0);
}

#[test]
fn video_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = synthesize_video(VideoKind::GradientDrift, 5, 4, 8, 8, 1).unwrap();
    let p = dir.path().join("v.cvtf");
    write_video(&p, &clip.video).unwrap();
    assert_eq!(read_video(&p).unwrap(), clip.video);
    fs::write(&p, b"CVTF").unwrap();
    assert!(read_video(&p).is_err());
}
