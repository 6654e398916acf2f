//! Three-channel log-compressed depth representation.
//!
//! On valid pixels, with `lp(d) = ln(1 + d)`:
//! - `C1 = (lp(D) − lp(Dmin)) / (lp(Dmax) − lp(Dmin))`, image-relative
//! - `C2 = lp(D) / lp(10)`, mid range
//! - `C3 = lp(D) / lp(100)`, far range
//!
//! `Dmin`/`Dmax` are taken over valid pixels only. An image with a single
//! depth value has `C1 ≡ 0`. Invalid pixels are filled with the channel
//! values of `D = 0` (`C1` fill is 0) before optional global standardization.

use crate::depth_io::{ChannelStats, DepthImage};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NormError {
    #[error("depth must be finite and non-negative, got {0}")]
    NegativeDepth(f64),
    #[error("image has no valid pixels")]
    NoValidPixels,
}

/// `ln(1 + d)` for metric depth.
pub fn log1p_depth(d: f64) -> Result<f64, NormError> {
    if !d.is_finite() || d < 0.0 {
        return Err(NormError::NegativeDepth(d));
    }
    Ok(d.ln_1p())
}

fn lp(d: f64) -> f64 {
    d.ln_1p()
}

/// `[C1, C2, C3]` for a valid depth given the image's valid range.
pub fn channel_values(d: f64, d_min: f64, d_max: f64) -> [f64; 3] {
    let l = lp(d);
    let (lo, hi) = (lp(d_min), lp(d_max));
    let c1 = if hi > lo { (l - lo) / (hi - lo) } else { 0.0 };
    [c1, l / lp(10.0), l / lp(100.0)]
}

/// Channel values written into invalid pixels (before standardization).
pub const INVALID_FILL: [f64; 3] = [0.0, 0.0, 0.0];

/// `3×H×W` channel-major input with the source validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedInput {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<f32>,
    pub valid: Vec<bool>,
}

impl NormalizedInput {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.channels[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.channels[(c * self.height + y) * self.width + x]
    }
}

/// Build the stacked representation; standardize with `stats` when given.
pub fn normalize(image: &DepthImage, stats: Option<&ChannelStats>) -> Result<NormalizedInput, NormError> {
    let (lo, hi) = image.valid_range().ok_or(NormError::NoValidPixels)?;
    let (lo, hi) = (lo as f64, hi as f64);
    let n = image.len();
    let mut channels = vec![0f32; 3 * n];
    for (i, (&d, &ok)) in image.depth.iter().zip(&image.valid).enumerate() {
        let vals = if ok { channel_values(d as f64, lo, hi) } else { INVALID_FILL };
        for c in 0..3 {
            let v = match stats {
                Some(s) => (vals[c] - s.mean[c]) / s.std[c],
                None => vals[c],
            };
            channels[c * n + i] = v as f32;
        }
    }
    Ok(NormalizedInput {
        height: image.height,
        width: image.width,
        channels,
        valid: image.valid.clone(),
    })
}

/// Linear min-max scaling replicated into three identical channels
/// (comparison preprocessing for RGB-style encoders).
pub fn baseline_minmax_normalize(image: &DepthImage) -> Result<NormalizedInput, NormError> {
    let (lo, hi) = image.valid_range().ok_or(NormError::NoValidPixels)?;
    let n = image.len();
    let mut one = vec![0f32; n];
    for (o, (&d, &ok)) in one.iter_mut().zip(image.depth.iter().zip(&image.valid)) {
        if ok && hi > lo {
            *o = ((d as f64 - lo as f64) / (hi as f64 - lo as f64)) as f32;
        }
    }
    let mut channels = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        channels.extend_from_slice(&one);
    }
    Ok(NormalizedInput {
        height: image.height,
        width: image.width,
        channels,
        valid: image.valid.clone(),
    })
}
