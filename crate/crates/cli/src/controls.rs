//! Toy control extractors: one single-channel map per frame.

use serde::{Deserialize, Serialize};

use controlvideo::model::{Control, ControlStack};
use controlvideo::LatentVideo;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    /// Binary map of pixels whose intensity gradient exceeds [`EDGE_THRESHOLD`].
    EdgeLike,
    /// 3×3 box-blurred intensity.
    DepthLike,
    /// A single hot pixel at the object centroid.
    PoseLike,
}

impl ControlKind {
    pub fn name(self) -> &'static str {
        match self {
            ControlKind::EdgeLike => "edge_like",
            ControlKind::DepthLike => "depth_like",
            ControlKind::PoseLike => "pose_like",
        }
    }
}

pub const EDGE_THRESHOLD: f64 = 0.1;
/// Minimum distance from the frame median for a pixel to count as object.
pub const OBJECT_CONTRAST: f64 = 0.25;

/// Channel-mean intensity of frame `f`, `[H * W]`.
pub fn intensity(video: &LatentVideo, f: usize) -> Vec<f64> {
    let (c, hw) = (video.channels(), video.height() * video.width());
    let frame = video.frame(f);
    (0..hw).map(|i| (0..c).map(|ch| frame[ch * hw + i]).sum::<f64>() / c as f64).collect()
}

fn clamped(img: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    img[y * w + x]
}

fn edges(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (clamped(img, h, w, y, x + 1) - clamped(img, h, w, y, x - 1)) / 2.0;
            let gy = (clamped(img, h, w, y + 1, x) - clamped(img, h, w, y - 1, x)) / 2.0;
            if gx.hypot(gy) > EDGE_THRESHOLD {
                out[y as usize * w + x as usize] = 1.0;
            }
        }
    }
    out
}

fn blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += clamped(img, h, w, y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = s / 9.0;
        }
    }
    out
}

/// Mean `(row, col)` of the pixels farther than [`OBJECT_CONTRAST`] from the
/// frame median, or `None` when there are none.
pub fn object_centroid(img: &[f64], w: usize) -> Option<(f64, f64)> {
    let mut sorted = img.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let (mut n, mut sy, mut sx) = (0usize, 0.0, 0.0);
    for (i, v) in img.iter().enumerate() {
        if (v - median).abs() > OBJECT_CONTRAST {
            n += 1;
            sy += (i / w) as f64;
            sx += (i % w) as f64;
        }
    }
    (n > 0).then(|| (sy / n as f64, sx / n as f64))
}

fn keypoint(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    if let Some((y, x)) = object_centroid(img, w) {
        let y = (y.round() as usize).min(h - 1);
        let x = (x.round() as usize).min(w - 1);
        out[y * w + x] = 1.0;
    }
    out
}

/// `[N, 1, H, W]` control maps, computed frame by frame.
pub fn extract_controls(video: &LatentVideo, kind: ControlKind) -> LatentVideo {
    let (n, h, w) = (video.frames(), video.height(), video.width());
    let mut out = LatentVideo::zeros(n, 1, h, w);
    for f in 0..n {
        let img = intensity(video, f);
        let map = match kind {
            ControlKind::EdgeLike => edges(&img, h, w),
            ControlKind::DepthLike => blur(&img, h, w),
            ControlKind::PoseLike => keypoint(&img, h, w),
        };
        out.frame_mut(f).copy_from_slice(&map);
    }
    out
}

pub fn control_stack(maps: LatentVideo, scale: f64) -> Result<ControlStack> {
    Ok(ControlStack::single(Control::new(maps, scale)?))
}
