//! Faithfulness (SSIM, optionally masked) and temporal-consistency measures.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{dot, exp, sqrt};
use crate::{Error, LatentVideo, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Dynamic range `L` of the inputs.
    pub data_range: f64,
    pub k1: f64,
    pub k2: f64,
    /// Gaussian window side, clamped to the image and made odd.
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            data_range: 1.0,
            k1: 0.01,
            k2: 0.03,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimConfig {
    fn window_for(&self, h: usize, w: usize) -> usize {
        let side = self.window.min(h).min(w);
        if side.is_multiple_of(2) {
            side - 1
        } else {
            side
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.data_range > 0.0 && self.sigma > 0.0 && self.window >= 1 && self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::invalid("ssim config", "range, sigma, window and constants must be positive"));
        }
        Ok(())
    }
}

fn gaussian_1d(side: usize, sigma: f64) -> Vec<f64> {
    let c = (side / 2) as f64;
    let g: Vec<f64> = (0..side)
        .map(|i| exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Weighted local mean over each valid window position, separably.
/// Output is `(h - side + 1) x (w - side + 1)`.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let side = g.len();
    let (oh, ow) = (h - side + 1, w - side + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = dot(&img[y * w + x..y * w + x + side], g);
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..side).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM between two single-channel `h x w` images over the windows
/// whose centre pixel is unmasked.
fn ssim_channel(x: &[f64], y: &[f64], h: usize, w: usize, mask: Option<&[f64]>, cfg: &SsimConfig) -> Result<f64> {
    let side = cfg.window_for(h, w);
    let g = gaussian_1d(side, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range) * (cfg.k1 * cfg.data_range);
    let c2 = (cfg.k2 * cfg.data_range) * (cfg.k2 * cfg.data_range);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter_valid(x, h, w, &g), filter_valid(y, h, w, &g));
    let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &g), filter_valid(&yy, h, w, &g), filter_valid(&xy, h, w, &g));
    let ow = w - side + 1;
    let half = side / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for (i, (&ux, &uy)) in mx.iter().zip(&my).enumerate() {
        let (cy, cx) = (i / ow + half, i % ow + half);
        if mask.is_some_and(|m| m[cy * w + cx] == 0.0) {
            continue;
        }
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

/// SSIM of two `C x H x W` frames, averaged over channels. `mask` is an
/// `H x W` `{0,1}` map of pixels to include.
pub fn ssim(x: &[f64], y: &[f64], shape: [usize; 3], mask: Option<&[f64]>, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    let [c, h, w] = shape;
    if x.len() != c * h * w || y.len() != x.len() || c * h * w == 0 {
        return Err(Error::shape("ssim", &[c * h * w, c * h * w], &[x.len(), y.len()]));
    }
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::shape("ssim mask", &[h * w], &[m.len()]));
        }
        if m.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::NonBinaryMask);
        }
        if m.iter().all(|v| *v == 0.0) {
            return Err(Error::EmptyMask);
        }
    }
    let mut sum = 0.0;
    for ch in 0..c {
        let r = ch * h * w..(ch + 1) * h * w;
        sum += ssim_channel(&x[r.clone()], &y[r], h, w, mask, cfg)?;
    }
    Ok(sum / c as f64)
}

/// Mean per-frame SSIM between two videos. `mask`, if given, is
/// `N x 1 x H x W` or `1 x 1 x H x W`.
pub fn video_ssim(a: &LatentVideo, b: &LatentVideo, mask: Option<&LatentVideo>, cfg: &SsimConfig) -> Result<f64> {
    a.same_shape(b, "video_ssim")?;
    let [n, c, h, w] = a.shape();
    if let Some(m) = mask {
        let [mn, mc, mh, mw] = m.shape();
        if !(mn == 1 || mn == n) || mc != 1 || (mh, mw) != (h, w) {
            return Err(Error::shape("ssim mask", &[n, 1, h, w], &m.shape()));
        }
    }
    let mut sum = 0.0;
    for f in 0..n {
        let mf = mask.map(|m| m.frame(if m.frames() == 1 { 0 } else { f }));
        sum += ssim(a.frame(f), b.frame(f), [c, h, w], mf, cfg)?;
    }
    Ok(sum / n as f64)
}

fn cosine(a: &[f64], b: &[f64], frames: (usize, usize)) -> Result<f64> {
    let (na, nb) = (sqrt(dot(a, a)), sqrt(dot(b, b)));
    if na == 0.0 {
        return Err(Error::ZeroNorm { frame: frames.0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { frame: frames.1 });
    }
    Ok(dot(a, b) / (na * nb))
}

/// Mean cosine similarity of adjacent flattened frames.
pub fn temporal_consistency(video: &LatentVideo) -> Result<f64> {
    let n = video.frames();
    if n < 2 {
        return Err(Error::TooFewFrames { need: 2, got: n });
    }
    let mut sum = 0.0;
    for i in 0..n - 1 {
        sum += cosine(video.frame(i), video.frame(i + 1), (i, i + 1))?;
    }
    Ok(sum / (n - 1) as f64)
}

/// Cosine similarity between the first and last frames.
pub fn drift(video: &LatentVideo) -> Result<f64> {
    let n = video.frames();
    if n < 2 {
        return Err(Error::TooFewFrames { need: 2, got: n });
    }
    cosine(video.frame(0), video.frame(n - 1), (0, n - 1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    pub masked_ssim: Option<f64>,
    pub temporal_consistency: f64,
    pub drift: f64,
}

/// Faithfulness of `edited` to `source` plus the consistency of `edited`.
pub fn report(source: &LatentVideo, edited: &LatentVideo, unedited: Option<&LatentVideo>, cfg: &SsimConfig) -> Result<MetricReport> {
    Ok(MetricReport {
        ssim: video_ssim(source, edited, None, cfg)?,
        masked_ssim: unedited.map(|m| video_ssim(source, edited, Some(m), cfg)).transpose()?,
        temporal_consistency: temporal_consistency(edited)?,
        drift: drift(edited)?,
    })
}
