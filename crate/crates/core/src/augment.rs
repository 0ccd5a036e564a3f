//! Paired strong augmentation for dense prediction.
//!
//! One sampled [`AugmentSpec`] is applied three ways: to images (bilinear,
//! with photometric jitter), to label masks (nearest neighbour, photometric
//! part skipped) and to per-pixel class distributions (bilinear, then
//! renormalised). All three go through the single coordinate map
//! [`AugmentSpec::source_coord`], so a pixel lands in the same place in the
//! image, its label and its target distribution.
//!
//! Pixels that map outside the frame, and pixels inside the Cutout
//! rectangle, are filled with the dataset mean in images and become
//! ignore / invalid in masks and dense maps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{BoolMask, IntMask, Tensor};

/// Probability that an op fires once drawn, and its magnitude bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpConfig {
    pub prob: f32,
    #[serde(default)]
    pub magnitude: f32,
}

/// RandAugment-style policy over a fixed pool of six dense-safe ops plus an
/// independent Cutout draw.
///
/// Magnitudes: `translate_*` is the largest shift in pixels, `scale` the
/// largest deviation from 1 (at most 0.25), `brightness` the largest
/// additive delta, `contrast` the largest deviation of the gain from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub n_ops: usize,
    pub flip: OpConfig,
    pub translate_x: OpConfig,
    pub translate_y: OpConfig,
    pub scale: OpConfig,
    pub brightness: OpConfig,
    pub contrast: OpConfig,
    pub p_cut: f32,
    /// Cutout side lengths as fractions of H and W.
    pub cutout_min: f32,
    pub cutout_max: f32,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_ops: 3,
            flip: OpConfig { prob: 0.5, magnitude: 0.0 },
            translate_x: OpConfig { prob: 0.8, magnitude: 12.0 },
            translate_y: OpConfig { prob: 0.8, magnitude: 12.0 },
            scale: OpConfig { prob: 0.8, magnitude: 0.25 },
            brightness: OpConfig { prob: 0.8, magnitude: 0.25 },
            contrast: OpConfig { prob: 0.8, magnitude: 0.4 },
            p_cut: 0.5,
            cutout_min: 0.2,
            cutout_max: 0.45,
        }
    }
}

impl PolicyConfig {
    /// Policy under which every draw is the identity.
    pub fn disabled() -> Self {
        let off = OpConfig { prob: 0.0, magnitude: 0.0 };
        Self {
            n_ops: 0,
            flip: off,
            translate_x: off,
            translate_y: off,
            scale: off,
            brightness: off,
            contrast: off,
            p_cut: 0.0,
            cutout_min: 0.0,
            cutout_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ops = [
            ("flip", self.flip),
            ("translate_x", self.translate_x),
            ("translate_y", self.translate_y),
            ("scale", self.scale),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
        ];
        for (name, op) in ops {
            if !(0.0..=1.0).contains(&op.prob) {
                return Err(format!("{name}.prob {} outside [0, 1]", op.prob));
            }
            if !(op.magnitude >= 0.0) {
                return Err(format!("{name}.magnitude {} must be >= 0", op.magnitude));
            }
        }
        if self.n_ops > 6 {
            return Err(format!("n_ops {} exceeds the pool of 6 ops", self.n_ops));
        }
        if self.scale.magnitude > 0.25 {
            return Err(format!("scale.magnitude {} exceeds 0.25", self.scale.magnitude));
        }
        if self.contrast.magnitude >= 1.0 {
            return Err(format!("contrast.magnitude {} must be < 1", self.contrast.magnitude));
        }
        if !(0.0..=1.0).contains(&self.p_cut) {
            return Err(format!("p_cut {} outside [0, 1]", self.p_cut));
        }
        if !(0.0 <= self.cutout_min && self.cutout_min <= self.cutout_max && self.cutout_max <= 1.0) {
            return Err(format!(
                "cutout size range [{}, {}] must satisfy 0 <= min <= max <= 1",
                self.cutout_min, self.cutout_max
            ));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in output pixel coordinates, as fractions of the
/// frame so one spec applies at any resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoutRect {
    pub top: f32,
    pub left: f32,
    pub height: f32,
    pub width: f32,
}

impl CutoutRect {
    fn pixel_bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let y0 = (self.top * h as f32).floor() as usize;
        let x0 = (self.left * w as f32).floor() as usize;
        let y1 = ((self.top + self.height) * h as f32).ceil().min(h as f32) as usize;
        let x1 = ((self.left + self.width) * w as f32).ceil().min(w as f32) as usize;
        (y0.min(h), x0.min(w), y1, x1)
    }

    pub fn contains(&self, row: usize, col: usize, h: usize, w: usize) -> bool {
        let (y0, x0, y1, x1) = self.pixel_bounds(h, w);
        row >= y0 && row < y1 && col >= x0 && col < x1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
    /// Zoom about the image centre; values > 1 enlarge content.
    pub scale: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub cutout: Option<CutoutRect>,
    pub identity: bool,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            flip: false,
            dx: 0,
            dy: 0,
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            cutout: None,
            identity: true,
        }
    }

    fn refresh_identity(&mut self) {
        self.identity = !self.flip
            && self.dx == 0
            && self.dy == 0
            && self.scale == 1.0
            && self.brightness == 0.0
            && self.contrast == 1.0
            && self.cutout.is_none();
    }

    pub fn has_photometric(&self) -> bool {
        self.brightness != 0.0 || self.contrast != 1.0
    }

    /// Source position `(row, col)` in the input that output pixel
    /// `(row, col)` reads from. Shared by every `apply_*` function.
    pub fn source_coord(&self, row: usize, col: usize, h: usize, w: usize) -> (f32, f32) {
        let cy = (h as f32 - 1.0) * 0.5;
        let cx = (w as f32 - 1.0) * 0.5;
        let mut y = row as f32 - self.dy as f32;
        let mut x = col as f32 - self.dx as f32;
        if self.scale != 1.0 {
            y = cy + (y - cy) / self.scale;
            x = cx + (x - cx) / self.scale;
        }
        if self.flip {
            x = (w as f32 - 1.0) - x;
        }
        (y, x)
    }

    /// Whether a source position lies inside the input frame (its nearest
    /// pixel exists).
    pub fn in_frame(sy: f32, sx: f32, h: usize, w: usize) -> bool {
        sy >= -0.5 && sy < h as f32 - 0.5 && sx >= -0.5 && sx < w as f32 - 0.5
    }

    /// Output pixels that carry a usable label: in frame and outside the
    /// Cutout rectangle.
    pub fn valid_mask(&self, h: usize, w: usize) -> BoolMask {
        let data = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                let (sy, sx) = self.source_coord(r, c, h, w);
                Self::in_frame(sy, sx, h, w)
                    && !self.cutout.is_some_and(|cut| cut.contains(r, c, h, w))
            })
            .collect();
        BoolMask::new(h, w, data).expect("sized")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PoolOp {
    Flip,
    TranslateX,
    TranslateY,
    Scale,
    Brightness,
    Contrast,
}

const POOL: [PoolOp; 6] = [
    PoolOp::Flip,
    PoolOp::TranslateX,
    PoolOp::TranslateY,
    PoolOp::Scale,
    PoolOp::Brightness,
    PoolOp::Contrast,
];

/// Draws one spec. Deterministic in `seed`.
pub fn sample_spec(seed: u64, policy: &PolicyConfig) -> AugmentSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = AugmentSpec::identity();
    let chosen: Vec<PoolOp> = POOL
        .choose_multiple(&mut rng, policy.n_ops.min(POOL.len()))
        .copied()
        .collect();
    // Fixed evaluation order keeps draws independent of pool order.
    for op in POOL {
        if !chosen.contains(&op) {
            continue;
        }
        let cfg = match op {
            PoolOp::Flip => policy.flip,
            PoolOp::TranslateX => policy.translate_x,
            PoolOp::TranslateY => policy.translate_y,
            PoolOp::Scale => policy.scale,
            PoolOp::Brightness => policy.brightness,
            PoolOp::Contrast => policy.contrast,
        };
        if !rng.gen_bool(cfg.prob as f64) {
            continue;
        }
        let m = cfg.magnitude;
        let signed = |rng: &mut ChaCha8Rng| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        match op {
            PoolOp::Flip => spec.flip = true,
            PoolOp::TranslateX => spec.dx = signed(&mut rng).round() as i32,
            PoolOp::TranslateY => spec.dy = signed(&mut rng).round() as i32,
            PoolOp::Scale => spec.scale = 1.0 + signed(&mut rng).clamp(-0.25, 0.25),
            PoolOp::Brightness => spec.brightness = signed(&mut rng),
            PoolOp::Contrast => spec.contrast = 1.0 + signed(&mut rng),
        }
    }
    if policy.p_cut > 0.0 && rng.gen_bool(policy.p_cut as f64) {
        let lo = policy.cutout_min;
        let hi = policy.cutout_max;
        let height = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let width = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        if height > 0.0 && width > 0.0 {
            let top = rng.gen_range(0.0..=(1.0 - height));
            let left = rng.gen_range(0.0..=(1.0 - width));
            spec.cutout = Some(CutoutRect { top, left, height, width });
        }
    }
    spec.refresh_identity();
    spec
}

fn bilinear_at(plane: &[f32], h: usize, w: usize, sy: f32, sx: f32) -> f32 {
    let y = sy.clamp(0.0, (h - 1) as f32);
    let x = sx.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    match t.shape() {
        &[c, h, w] => (c, h, w),
        other => panic!("augmentation expects a [C, H, W] tensor, got {other:?}"),
    }
}

/// Applies the spec to an image. `fill` is the per-channel dataset mean
/// used for out-of-frame and Cutout pixels.
pub fn apply_image(spec: &AugmentSpec, img: &Tensor, fill: &[f32]) -> Tensor {
    if spec.identity {
        return img.clone();
    }
    let (c, h, w) = chw(img);
    assert_eq!(fill.len(), c, "one fill value per channel");
    let src = img.data();
    let mut out = vec![0.0f32; c * h * w];
    for r in 0..h {
        for col in 0..w {
            let (sy, sx) = spec.source_coord(r, col, h, w);
            let inside = AugmentSpec::in_frame(sy, sx, h, w);
            for k in 0..c {
                out[(k * h + r) * w + col] = if inside {
                    bilinear_at(&src[k * h * w..(k + 1) * h * w], h, w, sy, sx)
                } else {
                    fill[k]
                };
            }
        }
    }
    if spec.has_photometric() {
        for k in 0..c {
            let plane = &mut out[k * h * w..(k + 1) * h * w];
            let mean = plane.iter().sum::<f32>() / (h * w) as f32;
            for v in plane.iter_mut() {
                *v = ((*v - mean) * spec.contrast + mean + spec.brightness).clamp(0.0, 1.0);
            }
        }
    }
    if let Some(cut) = spec.cutout {
        for r in 0..h {
            for col in 0..w {
                if cut.contains(r, col, h, w) {
                    for k in 0..c {
                        out[(k * h + r) * w + col] = fill[k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("sized")
}

/// Nearest-neighbour transport of a label map; unusable pixels become
/// `ignore_index`.
pub fn apply_mask(spec: &AugmentSpec, mask: &IntMask, ignore_index: u8) -> IntMask {
    if spec.identity {
        return mask.clone();
    }
    let (h, w) = (mask.height(), mask.width());
    let mut out = IntMask::filled(h, w, ignore_index);
    for r in 0..h {
        for col in 0..w {
            if spec.cutout.is_some_and(|cut| cut.contains(r, col, h, w)) {
                continue;
            }
            let (sy, sx) = spec.source_coord(r, col, h, w);
            if AugmentSpec::in_frame(sy, sx, h, w) {
                let yy = ((sy + 0.5).floor() as usize).min(h - 1);
                let xx = ((sx + 0.5).floor() as usize).min(w - 1);
                out.set(r, col, mask.get(yy, xx));
            }
        }
    }
    out
}

/// Bilinear transport of per-pixel distributions followed by per-pixel
/// renormalisation. Returns the transported map and its validity mask.
pub fn apply_dense(spec: &AugmentSpec, probs: &Tensor) -> (Tensor, BoolMask) {
    let (c, h, w) = chw(probs);
    if spec.identity {
        return (probs.clone(), BoolMask::filled(h, w, true));
    }
    let src = probs.data();
    let mut out = vec![0.0f32; c * h * w];
    for r in 0..h {
        for col in 0..w {
            let (sy, sx) = spec.source_coord(r, col, h, w);
            let mut sum = 0.0f32;
            for k in 0..c {
                let v = bilinear_at(&src[k * h * w..(k + 1) * h * w], h, w, sy, sx).max(0.0);
                out[(k * h + r) * w + col] = v;
                sum += v;
            }
            for k in 0..c {
                let idx = (k * h + r) * w + col;
                out[idx] = if sum > 0.0 { out[idx] / sum } else { 1.0 / c as f32 };
            }
        }
    }
    (
        Tensor::new(vec![c, h, w], out).expect("sized"),
        spec.valid_mask(h, w),
    )
}
