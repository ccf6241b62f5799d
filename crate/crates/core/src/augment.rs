//! CutMix strong augmentation: random rectangle masks and image compositing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{elementwise_mix, GridTensor, MixMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutMixConfig {
    pub num_rects: usize,
    /// Bounds on each rectangle's area as a fraction of the image area.
    pub area_ratio_min: f64,
    pub area_ratio_max: f64,
    /// Bounds on width/height of each rectangle before clipping.
    pub aspect_min: f64,
    pub aspect_max: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        Self {
            num_rects: 3,
            area_ratio_min: 0.25,
            area_ratio_max: 0.5,
            aspect_min: 0.5,
            aspect_max: 2.0,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rects == 0 {
            return Err(Error::invalid("cutmix.num_rects must be at least 1"));
        }
        if !(self.area_ratio_min > 0.0
            && self.area_ratio_min <= self.area_ratio_max
            && self.area_ratio_max <= 1.0)
        {
            return Err(Error::invalid(format!(
                "cutmix area ratios must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.area_ratio_min, self.area_ratio_max
            )));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return Err(Error::invalid(format!(
                "cutmix aspect range [{}, {}] is invalid",
                self.aspect_min, self.aspect_max
            )));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Draws one rectangle. Sides are clipped to the image while keeping the
/// sampled area where the other side has room for it.
pub fn sample_rect<R: Rng + ?Sized>(
    cfg: &CutMixConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Rect {
    let ratio = rng.gen_range(cfg.area_ratio_min..=cfg.area_ratio_max);
    let aspect = rng.gen_range(cfg.aspect_min..=cfg.aspect_max);
    let (hf, wf) = (height as f64, width as f64);
    let area = ratio * hf * wf;

    let mut rh = (area / aspect).sqrt();
    let mut rw = (area * aspect).sqrt();
    if rh > hf {
        rh = hf;
        rw = area / hf;
    }
    if rw > wf {
        rw = wf;
        rh = (area / wf).min(hf);
    }
    let rh = (rh.round() as usize).clamp(1, height);
    let rw = (rw.round() as usize).clamp(1, width);
    let top = rng.gen_range(0..=height - rh);
    let left = rng.gen_range(0..=width - rw);
    Rect {
        top,
        left,
        height: rh,
        width: rw,
    }
}

/// Union of `cfg.num_rects` random rectangles.
pub fn sample_mask<R: Rng + ?Sized>(
    cfg: &CutMixConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<MixMask> {
    if height < 4 || width < 4 {
        return Err(Error::invalid(format!(
            "cutmix needs an image of at least 4×4, got {height}×{width}"
        )));
    }
    cfg.validate()?;
    let mut mask = MixMask::filled(height, width, false);
    for _ in 0..cfg.num_rects {
        let r = sample_rect(cfg, height, width, rng);
        let data = mask.data_mut();
        for row in r.top..r.top + r.height {
            data[row * width + r.left..row * width + r.left + r.width].fill(true);
        }
    }
    Ok(mask)
}

/// The strong-augmented image `X_s`: `x2` pasted into `x1` where the mask is set.
pub fn make_strong_image(x1: &GridTensor, x2: &GridTensor, mask: &MixMask) -> Result<GridTensor> {
    elementwise_mix(x1, x2, mask)
}
