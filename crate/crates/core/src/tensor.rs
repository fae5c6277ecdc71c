use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::invalid("tensor", alloc::format!("{} values for shape {:?}", data.len(), shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element `(r, c)` of a rank-2 tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }
}

/// An `N x C x H x W` stack of latent frames. Noise predictions share the
/// same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentVideo {
    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        LatentVideo {
            frames,
            channels,
            height,
            width,
            data: vec![0.0; frames * channels * height * width],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let [frames, channels, height, width] = shape;
        if frames == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("latent video", alloc::format!("empty shape {shape:?}")));
        }
        if frames * channels * height * width != data.len() {
            return Err(Error::invalid(
                "latent video",
                alloc::format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(LatentVideo {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds a video by repeating one frame `frames` times.
    pub fn broadcast_frame(frame: &[f64], frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if frame.len() != channels * height * width {
            return Err(Error::shape("broadcast_frame", &[channels * height * width], &[frame.len()]));
        }
        let mut data = Vec::with_capacity(frames * frame.len());
        for _ in 0..frames {
            data.extend_from_slice(frame);
        }
        Self::from_vec([frames, channels, height, width], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flattened per-frame dimension `C * H * W`.
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.frame_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &LatentVideo, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, &self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// Gathers the listed frames, in order, into a new video.
    pub fn gather_frames(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.frames {
                return Err(Error::IndexOutOfRange {
                    what: "frame",
                    index: i,
                    len: self.frames,
                });
            }
            data.extend_from_slice(self.frame(i));
        }
        Self::from_vec([indices.len(), self.channels, self.height, self.width], data)
    }

    /// Contiguous frame range `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::IndexOutOfRange {
                what: "frame range end",
                index: start + len,
                len: self.frames,
            });
        }
        let n = self.frame_len();
        Self::from_vec(
            [len, self.channels, self.height, self.width],
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    /// Elementwise `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &LatentVideo, b: f64) -> Result<Self> {
        self.same_shape(other, "lincomb")?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(LatentVideo {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Frames as channels-last `[N, H, W, C]` data.
    pub(crate) fn to_channels_last(&self) -> Vec<f64> {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = vec![0.0; self.data.len()];
        for f in 0..self.frames {
            let src = self.frame(f);
            let dst = &mut out[f * c * h * w..(f + 1) * c * h * w];
            for ch in 0..c {
                for p in 0..h * w {
                    dst[p * c + ch] = src[ch * h * w + p];
                }
            }
        }
        out
    }

    pub(crate) fn from_channels_last(shape: [usize; 4], data: &[f64]) -> Result<Self> {
        let [n, c, h, w] = shape;
        let mut out = vec![0.0; data.len()];
        for f in 0..n {
            let src = &data[f * c * h * w..(f + 1) * c * h * w];
            let dst = &mut out[f * c * h * w..(f + 1) * c * h * w];
            for p in 0..h * w {
                for ch in 0..c {
                    dst[ch * h * w + p] = src[p * c + ch];
                }
            }
        }
        Self::from_vec(shape, out)
    }
}
