//! Multi-crop views with depth-specific augmentations and block patch masks.

use crate::depth_io::{ChannelStats, DepthImage};
use crate::normalization::{self, NormalizedInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("image {height}x{width} is too small for patch size {patch}")]
    ImageTooSmall { height: usize, width: usize, patch: usize },
    #[error("invalid crop config: {0}")]
    InvalidConfig(String),
}

/// Probabilities and ranges of the depth augmentation menu.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_range: [f64; 2],
    pub noise_prob: f64,
    /// Gaussian σ as a fraction of the local depth.
    pub noise_rel_sigma: f64,
    pub hole_prob: f64,
    pub max_holes: usize,
    /// Largest hole side as a fraction of the view side.
    pub hole_max_frac: f64,
    pub stick_prob: f64,
    pub max_sticks: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_prob: 0.5,
            scale_range: [0.8, 1.25],
            noise_prob: 0.3,
            noise_rel_sigma: 0.005,
            hole_prob: 0.3,
            max_holes: 3,
            hole_max_frac: 0.25,
            stick_prob: 0.2,
            max_sticks: 4,
        }
    }
}

impl AugmentParams {
    /// Every probability zero: augmentation is the identity.
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            scale_prob: 0.0,
            noise_prob: 0.0,
            hole_prob: 0.0,
            stick_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Axis-aligned rectangle in view-relative coordinates (`[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RelRect {
    pub const FULL: RelRect = RelRect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };
}

/// Thin invalid line segment in view-relative coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelSegment {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// One realization of the augmentation menu; resolution independent.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AugmentOps {
    pub flip: bool,
    pub scale: Option<f64>,
    pub noise_rel_sigma: Option<f64>,
    pub holes: Vec<RelRect>,
    pub sticks: Vec<RelSegment>,
    pub noise_seed: u64,
}

pub fn sample_ops(p: &AugmentParams, rng: &mut impl Rng) -> AugmentOps {
    let mut ops = AugmentOps {
        noise_seed: rng.random(),
        ..Default::default()
    };
    ops.flip = rng.random::<f64>() < p.flip_prob;
    if rng.random::<f64>() < p.scale_prob {
        let [lo, hi] = p.scale_range;
        ops.scale = Some(if hi > lo { rng.random_range(lo..=hi) } else { lo });
    }
    if rng.random::<f64>() < p.noise_prob {
        ops.noise_rel_sigma = Some(p.noise_rel_sigma);
    }
    if rng.random::<f64>() < p.hole_prob && p.max_holes > 0 {
        for _ in 0..rng.random_range(1..=p.max_holes) {
            let w = rng.random_range(0.02..=p.hole_max_frac.max(0.02));
            let h = rng.random_range(0.02..=p.hole_max_frac.max(0.02));
            let x0 = rng.random_range(0.0..=(1.0 - w).max(0.0));
            let y0 = rng.random_range(0.0..=(1.0 - h).max(0.0));
            ops.holes.push(RelRect { x0, y0, x1: x0 + w, y1: y0 + h });
        }
    }
    if rng.random::<f64>() < p.stick_prob && p.max_sticks > 0 {
        for _ in 0..rng.random_range(1..=p.max_sticks) {
            let x0: f64 = rng.random();
            let y0: f64 = rng.random();
            let ang = rng.random_range(0.0..std::f64::consts::PI);
            let len = rng.random_range(0.1..0.5);
            ops.sticks.push(RelSegment {
                x0,
                y0,
                x1: x0 + len * ang.cos(),
                y1: y0 + len * ang.sin(),
            });
        }
    }
    ops
}

fn invalidate(img: &mut DepthImage, y: usize, x: usize) {
    let i = y * img.width + x;
    img.valid[i] = false;
    img.depth[i] = 0.0;
}

/// Apply a realized augmentation in meters. Flip, then scale, noise, holes, sticks.
pub fn apply_ops(image: &DepthImage, ops: &AugmentOps) -> DepthImage {
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    if ops.flip {
        for y in 0..h {
            for x in 0..w {
                let s = y * w + (w - 1 - x);
                out.depth[y * w + x] = image.depth[s];
                out.valid[y * w + x] = image.valid[s];
            }
        }
    }
    if let Some(s) = ops.scale {
        for (d, &ok) in out.depth.iter_mut().zip(&out.valid) {
            if ok {
                *d = (*d as f64 * s) as f32;
            }
        }
    }
    if let Some(sigma) = ops.noise_rel_sigma {
        let mut rng = ChaCha8Rng::seed_from_u64(ops.noise_seed);
        for i in 0..out.depth.len() {
            if !out.valid[i] {
                continue;
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let d = out.depth[i] as f64 * (1.0 + sigma * z);
            if d > 0.0 && d.is_finite() {
                out.depth[i] = d as f32;
            } else {
                out.depth[i] = 0.0;
                out.valid[i] = false;
            }
        }
    }
    for r in &ops.holes {
        let ys = ((r.y0 * h as f64).floor().max(0.0) as usize).min(h);
        let ye = ((r.y1 * h as f64).ceil().max(0.0) as usize).min(h);
        let xs = ((r.x0 * w as f64).floor().max(0.0) as usize).min(w);
        let xe = ((r.x1 * w as f64).ceil().max(0.0) as usize).min(w);
        for y in ys..ye {
            for x in xs..xe {
                invalidate(&mut out, y, x);
            }
        }
    }
    for s in &ops.sticks {
        let (px0, py0) = (s.x0 * w as f64, s.y0 * h as f64);
        let (px1, py1) = (s.x1 * w as f64, s.y1 * h as f64);
        let steps = (((px1 - px0).hypot(py1 - py0)) * 2.0).ceil().max(1.0) as usize;
        for t in 0..=steps {
            let f = t as f64 / steps as f64;
            let x = px0 + f * (px1 - px0);
            let y = py0 + f * (py1 - py0);
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                invalidate(&mut out, y as usize, x as usize);
            }
        }
    }
    out
}

/// Sample and apply the augmentation menu.
pub fn depth_augment(image: &DepthImage, params: &AugmentParams, rng: &mut impl Rng) -> DepthImage {
    let ops = sample_ops(params, rng);
    apply_ops(image, &ops)
}

/// Boolean patch grid; `true` marks a masked patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl PatchMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![false; h * w] }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }
}

/// Block-wise mask covering exactly `round(ratio·h·w)` patches.
pub fn generate_patch_mask(h: usize, w: usize, ratio: f64, rng: &mut impl Rng) -> PatchMask {
    let total = h * w;
    let target = ((ratio.clamp(0.0, 1.0) * total as f64).round() as usize).min(total);
    let mut mask = PatchMask::empty(h, w);
    let mut masked = 0;
    let mut failures = 0;
    let log_ar = (0.3f64.ln(), (1.0f64 / 0.3).ln());
    while masked < target && failures < 50 {
        let remaining = target - masked;
        let min_area = remaining.min(4) as f64;
        let area = rng.random_range(min_area..=remaining as f64);
        let ar = rng.random_range(log_ar.0..=log_ar.1).exp();
        let bh = ((area * ar).sqrt().round() as usize).clamp(1, h);
        let bw = ((area / ar).sqrt().round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - bh);
        let left = rng.random_range(0..=w - bw);
        let fresh = (top..top + bh)
            .flat_map(|y| (left..left + bw).map(move |x| (y, x)))
            .filter(|&(y, x)| !mask.bits[y * w + x])
            .count();
        if fresh == 0 || fresh > remaining {
            failures += 1;
            continue;
        }
        for y in top..top + bh {
            for x in left..left + bw {
                mask.bits[y * w + x] = true;
            }
        }
        masked += fresh;
    }
    // top up with single patches when blocks no longer fit
    while masked < target {
        let free: Vec<usize> = (0..total).filter(|&i| !mask.bits[i]).collect();
        let i = free[rng.random_range(0..free.len())];
        mask.bits[i] = true;
        masked += 1;
    }
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub global_count: usize,
    pub local_count: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub patch_size: usize,
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    pub mask_ratio_range: [f64; 2],
    pub mask_sample_prob: f64,
    /// Upsample (bilinear, in meters) images smaller than the global crop.
    pub upsample_small: bool,
    pub augment: AugmentParams,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            global_count: 2,
            local_count: 8,
            global_size: 224,
            local_size: 98,
            patch_size: 14,
            global_scale: [0.32, 1.0],
            local_scale: [0.05, 0.32],
            mask_ratio_range: [0.1, 0.5],
            mask_sample_prob: 0.5,
            upsample_small: true,
            augment: AugmentParams::default(),
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.to_string()));
        if self.patch_size == 0 {
            return bad("patch_size must be positive");
        }
        if self.global_size == 0 || self.global_size % self.patch_size != 0 {
            return bad("global_size must be a positive multiple of patch_size");
        }
        if self.local_size == 0 || self.local_size % self.patch_size != 0 {
            return bad("local_size must be a positive multiple of patch_size");
        }
        if self.global_count < 2 {
            return bad("global_count must be at least 2");
        }
        let [lo, hi] = self.mask_ratio_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("mask_ratio_range must satisfy 0 <= lo <= hi <= 1");
        }
        for r in [self.global_scale, self.local_scale] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return bad("crop scale ranges must satisfy 0 < lo <= hi <= 1");
            }
        }
        if !(0.0..=1.0).contains(&self.mask_sample_prob) {
            return bad("mask_sample_prob must be in [0, 1]");
        }
        Ok(())
    }

    pub fn global_grid(&self) -> usize {
        self.global_size / self.patch_size
    }

    pub fn local_grid(&self) -> usize {
        self.local_size / self.patch_size
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CropBox {
    pub fn full(image: &DepthImage) -> Self {
        Self { x: 0.0, y: 0.0, w: image.width as f64, h: image.height as f64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

/// Everything random about one view, independent of output resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPlan {
    pub kind: ViewKind,
    pub crop: CropBox,
    pub ops: AugmentOps,
    /// Patch-mask ratio for masked global views.
    pub mask_ratio: Option<f64>,
    pub mask_seed: u64,
}

/// Random-resized-crop box: area fraction in `scale`, aspect in [3/4, 4/3].
pub fn sample_crop_box(h: usize, w: usize, scale: [f64; 2], rng: &mut impl Rng) -> CropBox {
    let area = (h * w) as f64;
    let log_r = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale[0]..=scale[1]);
        let ar = rng.random_range(log_r.0..=log_r.1).exp();
        let cw = (target * ar).sqrt();
        let ch = (target / ar).sqrt();
        if cw <= w as f64 && ch <= h as f64 {
            let x = rng.random_range(0.0..=(w as f64 - cw));
            let y = rng.random_range(0.0..=(h as f64 - ch));
            return CropBox { x, y, w: cw, h: ch };
        }
    }
    let side = (h.min(w)) as f64;
    CropBox {
        x: (w as f64 - side) / 2.0,
        y: (h as f64 - side) / 2.0,
        w: side,
        h: side,
    }
}

/// Masked bilinear resampling of `crop` to `out_h×out_w`: invalid neighbours
/// are excluded, a pixel is valid when its nearest source pixel is.
pub fn resample_depth(image: &DepthImage, crop: &CropBox, out_h: usize, out_w: usize) -> DepthImage {
    let (h, w) = (image.height, image.width);
    let mut depth = vec![0f32; out_h * out_w];
    let mut valid = vec![false; out_h * out_w];
    for oy in 0..out_h {
        let sy = (crop.y + (oy as f64 + 0.5) * crop.h / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = (crop.x + (ox as f64 + 0.5) * crop.w / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let ny = if fy < 0.5 { y0 } else { y1 };
            let nx = if fx < 0.5 { x0 } else { x1 };
            if !image.valid[ny * w + nx] {
                continue;
            }
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let (mut acc, mut wsum) = (0.0f64, 0.0f64);
            for (yy, xx, wt) in taps {
                if wt > 0.0 && image.valid[yy * w + xx] {
                    acc += wt * image.depth[yy * w + xx] as f64;
                    wsum += wt;
                }
            }
            let i = oy * out_w + ox;
            depth[i] = (acc / wsum) as f32;
            valid[i] = true;
        }
    }
    DepthImage { height: out_h, width: out_w, depth, valid }
}

/// Normalize a view; a view with every pixel invalid gets the fill values.
pub fn normalize_view(image: &DepthImage, stats: Option<&ChannelStats>) -> NormalizedInput {
    match normalization::normalize(image, stats) {
        Ok(n) => n,
        Err(_) => {
            let n = image.len();
            let mut channels = Vec::with_capacity(3 * n);
            for c in 0..3 {
                let v = normalization::INVALID_FILL[c];
                let v = stats.map_or(v, |s| (v - s.mean[c]) / s.std[c]);
                channels.extend(std::iter::repeat_n(v as f32, n));
            }
            NormalizedInput {
                height: image.height,
                width: image.width,
                channels,
                valid: image.valid.clone(),
            }
        }
    }
}

/// Upsample so the short side reaches `min_side`, when needed.
pub fn ensure_min_side(image: &DepthImage, min_side: usize) -> DepthImage {
    let short = image.height.min(image.width);
    if short >= min_side {
        return image.clone();
    }
    let f = min_side as f64 / short as f64;
    let oh = ((image.height as f64 * f).round() as usize).max(min_side);
    let ow = ((image.width as f64 * f).round() as usize).max(min_side);
    resample_depth(image, &CropBox::full(image), oh, ow)
}

/// Sample `G` global then `L` local view plans for an image of `h×w`.
pub fn plan_views(h: usize, w: usize, cfg: &CropConfig, rng: &mut impl Rng) -> Vec<ViewPlan> {
    let mut plans = Vec::with_capacity(cfg.global_count + cfg.local_count);
    for i in 0..cfg.global_count + cfg.local_count {
        let kind = if i < cfg.global_count { ViewKind::Global } else { ViewKind::Local };
        let scale = if kind == ViewKind::Global { cfg.global_scale } else { cfg.local_scale };
        let crop = sample_crop_box(h, w, scale, rng);
        let ops = sample_ops(&cfg.augment, rng);
        let mask_ratio = if kind == ViewKind::Global && rng.random::<f64>() < cfg.mask_sample_prob {
            let [lo, hi] = cfg.mask_ratio_range;
            Some(if hi > lo { rng.random_range(lo..=hi) } else { lo })
        } else {
            None
        };
        plans.push(ViewPlan { kind, crop, ops, mask_ratio, mask_seed: rng.random() });
    }
    plans
}

/// Crop → resize to `size` → augment in meters → normalize.
pub fn render_view(image: &DepthImage, plan: &ViewPlan, size: usize, stats: Option<&ChannelStats>) -> NormalizedInput {
    let resized = resample_depth(image, &plan.crop, size, size);
    let augmented = apply_ops(&resized, &plan.ops);
    normalize_view(&augmented, stats)
}

/// Patch mask for a plan at a given token grid.
pub fn plan_mask(plan: &ViewPlan, grid: usize) -> PatchMask {
    match plan.mask_ratio {
        Some(r) => generate_patch_mask(grid, grid, r, &mut ChaCha8Rng::seed_from_u64(plan.mask_seed)),
        None => PatchMask::empty(grid, grid),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropSet {
    pub globals: Vec<NormalizedInput>,
    pub locals: Vec<NormalizedInput>,
    /// One mask per global view (all-false when the view is unmasked).
    pub global_masks: Vec<PatchMask>,
    /// Local views are never masked.
    pub local_masks: Vec<PatchMask>,
}

/// Prepare an image for cropping under `cfg` (upsampling if allowed).
pub fn prepare_source(image: &DepthImage, cfg: &CropConfig) -> Result<DepthImage, AugmentError> {
    let short = image.height.min(image.width);
    if short < cfg.global_size {
        if !cfg.upsample_small && short <= 2 * cfg.patch_size {
            return Err(AugmentError::ImageTooSmall {
                height: image.height,
                width: image.width,
                patch: cfg.patch_size,
            });
        }
        if cfg.upsample_small {
            return Ok(ensure_min_side(image, cfg.global_size));
        }
    }
    Ok(image.clone())
}

pub fn multi_crop(
    image: &DepthImage,
    cfg: &CropConfig,
    stats: Option<&ChannelStats>,
    rng: &mut impl Rng,
) -> Result<CropSet, AugmentError> {
    cfg.validate()?;
    let src = prepare_source(image, cfg)?;
    let plans = plan_views(src.height, src.width, cfg, rng);
    let mut set = CropSet {
        globals: Vec::new(),
        locals: Vec::new(),
        global_masks: Vec::new(),
        local_masks: Vec::new(),
    };
    for p in &plans {
        match p.kind {
            ViewKind::Global => {
                set.globals.push(render_view(&src, p, cfg.global_size, stats));
                set.global_masks.push(plan_mask(p, cfg.global_grid()));
            }
            ViewKind::Local => {
                set.locals.push(render_view(&src, p, cfg.local_size, stats));
                set.local_masks.push(PatchMask::empty(cfg.local_grid(), cfg.local_grid()));
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalization::normalize;

    fn ramp(h: usize, w: usize) -> DepthImage {
        let d = (0..h * w).map(|i| 0.5 + (i % w) as f32 * 0.1 + (i / w) as f32 * 0.05).collect();
        DepthImage::from_raw(h, w, d).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let im = ramp(6, 5);
        let out = depth_augment(&im, &AugmentParams::none(), &mut rng(1));
        assert_eq!(out, im);
    }

    #[test]
    fn scale_jitter_multiplies() {
        let im = DepthImage::from_raw(1, 2, vec![4.0, 0.0]).unwrap();
        let ops = AugmentOps { scale: Some(1.25), ..Default::default() };
        let out = apply_ops(&im, &ops);
        assert_eq!(out.depth, vec![5.0, 0.0]);
        assert_eq!(out.valid, im.valid);
    }

    #[test]
    fn full_hole_invalidates_everything() {
        let ops = AugmentOps { holes: vec![RelRect::FULL], ..Default::default() };
        let out = apply_ops(&ramp(4, 4), &ops);
        assert!(out.valid.iter().all(|v| !v));
        assert!(out.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn flip_mirrors_columns_and_sticks_cut_lines() {
        let im = ramp(3, 4);
        let out = apply_ops(&im, &AugmentOps { flip: true, ..Default::default() });
        assert_eq!(out.at(1, 0), im.at(1, 3));
        let stick = RelSegment { x0: 0.0, y0: 0.5, x1: 1.0, y1: 0.5 };
        let out = apply_ops(&ramp(8, 8), &AugmentOps { sticks: vec![stick], ..Default::default() });
        assert!((0..8).all(|x| !out.valid[4 * 8 + x]));
        assert_eq!(out.valid_count(), 56);
    }

    #[test]
    fn noise_never_goes_negative() {
        let im = ramp(16, 16);
        let ops = AugmentOps { noise_rel_sigma: Some(5.0), noise_seed: 3, ..Default::default() };
        let out = apply_ops(&im, &ops);
        for (&d, &v) in out.depth.iter().zip(&out.valid) {
            assert!(d >= 0.0);
            assert_eq!(v, d > 0.0);
        }
        assert!(out.valid_count() < 256);
    }

    #[test]
    fn mask_ratio_extremes_and_count() {
        assert_eq!(generate_patch_mask(16, 16, 0.0, &mut rng(0)).count(), 0);
        assert_eq!(generate_patch_mask(16, 16, 1.0, &mut rng(0)).count(), 256);
        for s in 0..20 {
            let c = generate_patch_mask(16, 16, 0.3, &mut rng(s)).count();
            assert!((76..=77).contains(&c), "{c}");
        }
        assert_eq!(generate_patch_mask(4, 4, 0.5, &mut rng(9)), generate_patch_mask(4, 4, 0.5, &mut rng(9)));
    }

    fn small_cfg() -> CropConfig {
        CropConfig {
            global_size: 32,
            local_size: 16,
            patch_size: 8,
            local_count: 3,
            ..Default::default()
        }
    }

    #[test]
    fn crop_geometry() {
        let cfg = CropConfig { local_count: 8, ..Default::default() };
        assert_eq!(cfg.global_grid(), 16);
        assert_eq!(cfg.local_grid(), 7);
        let set = multi_crop(&ramp(40, 50), &small_cfg(), None, &mut rng(4)).unwrap();
        assert_eq!(set.globals.len(), 2);
        assert_eq!(set.locals.len(), 3);
        for g in &set.globals {
            assert_eq!((g.height, g.width, g.channels.len()), (32, 32, 3 * 32 * 32));
        }
        for m in &set.global_masks {
            assert_eq!((m.h, m.w), (4, 4));
        }
        assert!(set.local_masks.iter().all(|m| m.bits.len() == 4 && !m.any()));
    }

    #[test]
    fn crops_are_seed_deterministic() {
        let a = multi_crop(&ramp(40, 50), &small_cfg(), None, &mut rng(8)).unwrap();
        let b = multi_crop(&ramp(40, 50), &small_cfg(), None, &mut rng(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_view_is_normalized_source() {
        let im = ramp(32, 32);
        let plan = ViewPlan {
            kind: ViewKind::Global,
            crop: CropBox::full(&im),
            ops: AugmentOps::default(),
            mask_ratio: None,
            mask_seed: 0,
        };
        assert_eq!(render_view(&im, &plan, 32, None), normalize(&im, None).unwrap());
    }

    #[test]
    fn jitter_precedes_normalization() {
        let im = DepthImage::from_raw(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let plan = ViewPlan {
            kind: ViewKind::Global,
            crop: CropBox::full(&im),
            ops: AugmentOps { scale: Some(1.25), ..Default::default() },
            mask_ratio: None,
            mask_seed: 0,
        };
        let v = render_view(&im, &plan, 2, None);
        let want = (4.0f64 * 1.25).ln_1p() / 10f64.ln_1p();
        assert!((v.at(1, 1, 0) as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn small_images_are_upsampled_or_rejected() {
        let cfg = small_cfg();
        let tiny = ramp(10, 12);
        let set = multi_crop(&tiny, &cfg, None, &mut rng(2)).unwrap();
        assert_eq!(set.globals[0].height, 32);
        let strict = CropConfig { upsample_small: false, ..small_cfg() };
        assert!(matches!(multi_crop(&tiny, &strict, None, &mut rng(2)), Err(AugmentError::ImageTooSmall { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(CropConfig::default().validate().is_ok());
        let bad = CropConfig { global_size: 100, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CropConfig { global_count: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CropConfig { mask_ratio_range: [0.6, 0.5], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resample_skips_holes() {
        let im = DepthImage::from_raw(2, 2, vec![1.0, 0.0, 3.0, 5.0]).unwrap();
        let out = resample_depth(&im, &CropBox::full(&im), 4, 4);
        // the top-right 2×2 block has the hole as nearest source pixel
        for (y, x) in [(0, 2), (0, 3), (1, 2), (1, 3)] {
            assert!(!out.valid[y * 4 + x]);
        }
        assert_eq!(out.valid_count(), 12);
        for (&d, &v) in out.depth.iter().zip(&out.valid) {
            if v {
                assert!((1.0..=5.0).contains(&d));
            }
        }
    }
}
