//! Synthetic clips with known motion and unedited-area masks.

use serde::{Deserialize, Serialize};

use controlvideo::rng::{seeded, standard_normal, uniform_inclusive, SeededRng};
use controlvideo::{Error, LatentVideo};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoKind {
    /// One bright square bouncing horizontally over a static textured background.
    MovingSquare,
    /// A diagonal sinusoidal pattern whose phase advances every frame.
    GradientDrift,
    /// One square bouncing horizontally, one vertically, drawn in that order.
    TwoObject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub video: LatentVideo,
    /// `[N, 1, H, W]`, 1 where the pixel is background (unedited).
    pub mask: LatentVideo,
}

const TEXTURE: f64 = 0.02;

/// Side length of the squares.
pub fn square_size(height: usize, width: usize) -> usize {
    let m = height.min(width);
    (m * 3 / 8).max(2).min(m)
}

/// Position after `step` unit moves bouncing inside `0..=span`.
pub fn bounce(step: usize, span: usize) -> usize {
    if span == 0 {
        return 0;
    }
    let p = step % (2 * span);
    if p <= span {
        p
    } else {
        2 * span - p
    }
}

fn colour(rng: &mut SeededRng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| 0.5 + uniform_inclusive(rng, 0, 50) as f64 / 100.0).collect()
}

fn background(rng: &mut SeededRng, c: usize, h: usize, w: usize) -> Vec<f64> {
    let noise = standard_normal(rng, c * h * w);
    (0..c * h * w).map(|i| -0.5 + 0.1 * (i / (h * w)) as f64 + TEXTURE * noise[i]).collect()
}

struct Square {
    y: usize,
    x: usize,
    size: usize,
    colour: Vec<f64>,
}

fn paint(frame: &mut [f64], mask: &mut [f64], sq: &Square, h: usize, w: usize) {
    for (c, &v) in sq.colour.iter().enumerate() {
        for y in sq.y..sq.y + sq.size {
            for x in sq.x..sq.x + sq.size {
                frame[c * h * w + y * w + x] = v;
                mask[y * w + x] = 0.0;
            }
        }
    }
}

pub fn synthesize_video(kind: VideoKind, frames: usize, channels: usize, height: usize, width: usize, seed: u64) -> Result<SyntheticClip> {
    if frames == 0 || channels == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument {
            what: "video dims",
            detail: format!("got N={frames}, C={channels}, H={height}, W={width}"),
        }
        .into());
    }
    let (c, h, w) = (channels, height, width);
    let mut rng = seeded(seed);
    let mut video = LatentVideo::zeros(frames, c, h, w);
    let mut mask = LatentVideo::zeros(frames, 1, h, w);
    for v in mask.data_mut() {
        *v = 1.0;
    }
    match kind {
        VideoKind::MovingSquare | VideoKind::TwoObject => {
            let s = square_size(h, w);
            let bg = background(&mut rng, c, h, w);
            let a_row = uniform_inclusive(&mut rng, 0, h - s);
            let a_phase = uniform_inclusive(&mut rng, 0, 2 * (w - s));
            let a_colour = colour(&mut rng, c);
            let b = (kind == VideoKind::TwoObject).then(|| {
                let col = uniform_inclusive(&mut rng, 0, w - s);
                let phase = uniform_inclusive(&mut rng, 0, 2 * (h - s));
                let colour = colour(&mut rng, c).into_iter().map(|v| -v).collect::<Vec<_>>();
                (col, phase, colour)
            });
            for f in 0..frames {
                let frame = video.frame_mut(f);
                frame.copy_from_slice(&bg);
                let m = mask.frame_mut(f);
                let a = Square {
                    y: a_row,
                    x: bounce(f + a_phase, w - s),
                    size: s,
                    colour: a_colour.clone(),
                };
                paint(frame, m, &a, h, w);
                if let Some((col, phase, colour)) = &b {
                    let sq = Square {
                        y: bounce(f + phase, h - s),
                        x: *col,
                        size: s,
                        colour: colour.clone(),
                    };
                    paint(frame, m, &sq, h, w);
                }
            }
        }
        VideoKind::GradientDrift => {
            let phases: Vec<f64> = (0..c).map(|_| uniform_inclusive(&mut rng, 0, 99) as f64 / 100.0).collect();
            let tau = 2.0 * std::f64::consts::PI;
            for f in 0..frames {
                let frame = video.frame_mut(f);
                for (ch, phase) in phases.iter().enumerate() {
                    for y in 0..h {
                        for x in 0..w {
                            let u = (x + y) as f64 / (h + w) as f64 + 0.02 * f as f64 + phase;
                            frame[ch * h * w + y * w + x] = 0.8 * (tau * u).sin();
                        }
                    }
                }
            }
        }
    }
    Ok(SyntheticClip { video, mask })
}
