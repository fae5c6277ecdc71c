use alloc::vec::Vec;

use super::FeatureMap;
use crate::{Error, LatentVideo, Result};

/// One visual condition: a per-frame control tensor `N x C_c x H x W`, its
/// scale `lambda`, and an optional binary mask broadcastable over it.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    condition: LatentVideo,
    scale: f64,
    mask: Option<LatentVideo>,
}

impl Control {
    pub fn new(condition: LatentVideo, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::invalid("control scale", alloc::format!("{scale} is not a finite value >= 0")));
        }
        if !condition.is_finite() {
            return Err(Error::invalid("control", "non-finite condition values"));
        }
        Ok(Control {
            condition,
            scale,
            mask: None,
        })
    }

    /// Attaches a `{0,1}` mask whose frame and channel axes are either 1 or
    /// equal to the condition's.
    pub fn with_mask(mut self, mask: LatentVideo) -> Result<Self> {
        let [n, c, h, w] = self.condition.shape();
        let [mn, mc, mh, mw] = mask.shape();
        if (mn != 1 && mn != n) || (mc != 1 && mc != c) || mh != h || mw != w {
            return Err(Error::shape("control mask", &[n, c, h, w], &mask.shape()));
        }
        if mask.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::NonBinaryMask);
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn condition(&self) -> &LatentVideo {
        &self.condition
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::invalid("control scale", alloc::format!("{scale} is not a finite value >= 0")));
        }
        self.scale = scale;
        Ok(())
    }

    pub fn mask(&self) -> Option<&LatentVideo> {
        self.mask.as_ref()
    }

    /// The condition with its mask multiplied in.
    pub fn masked_condition(&self) -> LatentVideo {
        let Some(mask) = &self.mask else {
            return self.condition.clone();
        };
        let [n, c, h, w] = self.condition.shape();
        let [mn, mc, _, _] = mask.shape();
        let mut out = self.condition.clone();
        let data = out.data_mut();
        for f in 0..n {
            for ch in 0..c {
                let src = ((if mn == 1 { 0 } else { f }) * mc + if mc == 1 { 0 } else { ch }) * h * w;
                let dst = (f * c + ch) * h * w;
                for (d, m) in data[dst..dst + h * w].iter_mut().zip(&mask.data()[src..src + h * w]) {
                    *d *= m;
                }
            }
        }
        out
    }

    fn gather(&self, indices: &[usize]) -> Result<Self> {
        let mask = match &self.mask {
            Some(m) if m.frames() > 1 => Some(m.gather_frames(indices)?),
            other => other.clone(),
        };
        Ok(Control {
            condition: self.condition.gather_frames(indices)?,
            scale: self.scale,
            mask,
        })
    }
}

/// The controls driving one video, one per control branch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlStack {
    controls: Vec<Control>,
}

impl ControlStack {
    pub fn new() -> Self {
        ControlStack::default()
    }

    pub fn single(control: Control) -> Self {
        ControlStack {
            controls: alloc::vec![control],
        }
    }

    /// Adds a control; every control must share frame count and spatial size.
    pub fn push(&mut self, control: Control) -> Result<()> {
        if let Some(first) = self.controls.first() {
            let [n, _, h, w] = first.condition.shape();
            let [cn, _, ch, cw] = control.condition.shape();
            if (n, h, w) != (cn, ch, cw) {
                return Err(Error::shape("control stack", &[n, h, w], &[cn, ch, cw]));
            }
        }
        self.controls.push(control);
        Ok(())
    }

    pub fn with(mut self, control: Control) -> Result<Self> {
        self.push(control)?;
        Ok(self)
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn controls_mut(&mut self) -> &mut [Control] {
        &mut self.controls
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn frames(&self) -> Option<usize> {
        self.controls.first().map(|c| c.condition.frames())
    }

    /// Same stack with every scale set to zero.
    pub fn disabled(&self) -> Self {
        let mut out = self.clone();
        for c in &mut out.controls {
            c.scale = 0.0;
        }
        out
    }

    pub fn gather_frames(&self, indices: &[usize]) -> Result<Self> {
        let controls = self.controls.iter().map(|c| c.gather(indices)).collect::<Result<_>>()?;
        Ok(ControlStack { controls })
    }

    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_frames(&idx)
    }

    /// Checks the stack against a latent video of `frames x _ x h x w`.
    pub(crate) fn check(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        for c in &self.controls {
            let [n, _, ch, cw] = c.condition.shape();
            if (n, ch, cw) != (frames, h, w) {
                return Err(Error::shape("controls vs latents", &[frames, h, w], &[n, ch, cw]));
            }
        }
        Ok(())
    }
}

/// Multiplies every control by its mask and drops the masks. Controls
/// without a mask pass through.
pub fn apply_mask_to_controls(stack: &ControlStack) -> Result<ControlStack> {
    let mut controls = Vec::with_capacity(stack.len());
    for c in &stack.controls {
        if let Some(m) = &c.mask {
            if m.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
                return Err(Error::NonBinaryMask);
            }
        }
        controls.push(Control {
            condition: c.masked_condition(),
            scale: c.scale,
            mask: None,
        });
    }
    Ok(ControlStack { controls })
}

/// `h_u + sum_i lambda_i h_{c,i}`.
pub fn control_fusion(h_u: &FeatureMap, branches: &[(&FeatureMap, f64)]) -> Result<FeatureMap> {
    let mut data = h_u.data().to_vec();
    for (h_c, lambda) in branches {
        if h_c.shape() != h_u.shape() {
            return Err(Error::shape("control_fusion", &h_u.shape(), &h_c.shape()));
        }
        crate::math::axpy(*lambda, h_c.data(), &mut data);
    }
    FeatureMap::new(h_u.frames(), h_u.sites(), h_u.width(), data)
}
