//! 8-bit binary PPM frame export.

use std::fs;
use std::path::{Path, PathBuf};

use controlvideo::LatentVideo;

use crate::error::{CliError, Result};

/// Encodes frame `f`: channels 0..3 as RGB, or channel 0 as grey when there
/// are fewer than three. Values in `[lo, hi]` map linearly onto 0..=255.
pub fn encode_frame(video: &LatentVideo, f: usize, lo: f64, hi: f64) -> Vec<u8> {
    let (c, h, w) = (video.channels(), video.height(), video.width());
    let hw = h * w;
    let frame = video.frame(f);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..hw {
        for k in 0..3 {
            let ch = if c >= 3 { k } else { 0 };
            let v = ((frame[ch * hw + i] - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    out
}

/// Writes `<dir>/<stem>_<frame>.ppm` for every frame.
pub fn write_frames(dir: &Path, stem: &str, video: &LatentVideo, lo: f64, hi: f64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut paths = Vec::with_capacity(video.frames());
    for f in 0..video.frames() {
        let path = dir.join(format!("{stem}_{f:03}.ppm"));
        fs::write(&path, encode_frame(video, f, lo, hi)).map_err(CliError::io(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_mapping() {
        let v = LatentVideo::from_vec([1, 3, 1, 2], vec![-1.0, 1.0, 0.0, 0.5, 2.0, -3.0]).unwrap();
        let bytes = encode_frame(&v, 0, -1.0, 1.0);
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 191, 0]);
    }

    #[test]
    fn grey_for_single_channel() {
        let v = LatentVideo::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let bytes = encode_frame(&v, 0, 0.0, 1.0);
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 255, 255]);
    }
}
