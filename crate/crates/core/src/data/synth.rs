//! Procedural scenes of textured shapes on a shaded background.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, Result, Sample};
use crate::engine::{IntMask, Tensor};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Including background (class 0).
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Relative placement weight of each foreground class (length
    /// `num_classes - 1`). Empty means uniform.
    pub placement_rates: Vec<f32>,
    /// Shape area range as fractions of the image area.
    pub area_min: f32,
    pub area_max: f32,
    pub noise_std: f32,
    /// Probability that a shape is drawn with its class's own texture
    /// family; otherwise the family is random.
    pub texture_cue: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            height: 64,
            width: 64,
            num_train: 600,
            num_val: 100,
            min_shapes: 1,
            max_shapes: 4,
            placement_rates: Vec::new(),
            area_min: 0.025,
            area_max: 0.06,
            noise_std: 0.04,
            texture_cue: 0.75,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes {} must be in 2..=255", self.num_classes));
        }
        if self.height < 32 || self.width < 32 {
            return bad(format!("image size {}x{} below 32x32", self.height, self.width));
        }
        if self.min_shapes > self.max_shapes {
            return bad(format!(
                "min_shapes {} exceeds max_shapes {}",
                self.min_shapes, self.max_shapes
            ));
        }
        if !self.placement_rates.is_empty() {
            if self.placement_rates.len() != self.num_classes - 1 {
                return bad(format!(
                    "placement_rates has {} entries, expected {}",
                    self.placement_rates.len(),
                    self.num_classes - 1
                ));
            }
            if self.placement_rates.iter().any(|r| !(*r >= 0.0))
                || self.placement_rates.iter().sum::<f32>() <= 0.0
            {
                return bad("placement_rates must be nonnegative with a positive sum".into());
            }
        }
        if !(0.0 < self.area_min && self.area_min <= self.area_max && self.area_max <= 0.1) {
            return bad(format!(
                "shape area range [{}, {}] must satisfy 0 < min <= max <= 0.1",
                self.area_min, self.area_max
            ));
        }
        if !(0.0..=1.0).contains(&self.texture_cue) {
            return bad(format!("texture_cue {} outside [0, 1]", self.texture_cue));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be >= 0", self.noise_std));
        }
        Ok(())
    }

    /// Normalised foreground placement rates.
    pub fn rates(&self) -> Vec<f32> {
        let raw = if self.placement_rates.is_empty() {
            vec![1.0; self.num_classes - 1]
        } else {
            self.placement_rates.clone()
        };
        let s: f32 = raw.iter().sum();
        raw.iter().map(|r| r / s).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

const TRAIN_STREAM: u64 = 0;
const VAL_STREAM: u64 = 1;

/// Generates the train and validation sets. Every sample is drawn from its
/// own seed, so generation order does not affect content.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    cfg.validate()?;
    let make = |stream: u64, count: usize, prefix: &str| -> Vec<Sample> {
        let base = derive_seed(seed, stream);
        (0..count)
            .into_par_iter()
            .map(|i| {
                let (image, mask) = render(cfg, derive_seed(base, i as u64));
                Sample { id: format!("{prefix}_{i:05}"), image, mask: Some(mask) }
            })
            .collect()
    };
    Ok(SynthDataset {
        train: make(TRAIN_STREAM, cfg.num_train, "train"),
        val: make(VAL_STREAM, cfg.num_val, "val"),
    })
}

#[derive(Clone, Copy)]
enum Kind {
    Disk,
    Rect,
    Triangle,
}

/// Shape kind and preferred texture family of a foreground class. Classes
/// beyond the first three reuse kinds with a shifted texture family.
fn class_style(class: usize) -> (Kind, usize) {
    let k = class - 1;
    let kind = match k % 3 {
        0 => Kind::Disk,
        1 => Kind::Rect,
        _ => Kind::Triangle,
    };
    (kind, (k + k / 3) % 3)
}

struct Shape {
    kind: Kind,
    cx: f32,
    cy: f32,
    /// disk: radius; rect: half extents; triangle: vertices
    a: f32,
    b: f32,
    verts: [(f32, f32); 3],
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match self.kind {
            Kind::Disk => (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.a * self.a,
            Kind::Rect => (x - self.cx).abs() <= self.a && (y - self.cy).abs() <= self.b,
            Kind::Triangle => {
                let [p0, p1, p2] = self.verts;
                let edge = |(ax, ay): (f32, f32), (bx, by): (f32, f32)| {
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                let (d0, d1, d2) = (edge(p0, p1), edge(p1, p2), edge(p2, p0));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn place_shape(rng: &mut ChaCha8Rng, kind: Kind, area: f32, h: usize, w: usize) -> Shape {
    let (a, b, reach) = match kind {
        Kind::Disk => {
            let r = (area / std::f32::consts::PI).sqrt();
            (r, r, r)
        }
        Kind::Rect => {
            let aspect: f32 = rng.gen_range(0.5..2.0);
            let half_w = (area * aspect).sqrt() * 0.5;
            let half_h = area / (4.0 * half_w);
            (half_w, half_h, 0.0)
        }
        Kind::Triangle => {
            let side = (4.0 * area / 3f32.sqrt()).sqrt();
            let r = side / 3f32.sqrt();
            (r, r, r)
        }
    };
    let (ext_x, ext_y) = match kind {
        Kind::Rect => (a, b),
        _ => (reach, reach),
    };
    let cx = rng.gen_range(ext_x..(w as f32 - 1.0 - ext_x));
    let cy = rng.gen_range(ext_y..(h as f32 - 1.0 - ext_y));
    let mut verts = [(0.0, 0.0); 3];
    if let Kind::Triangle = kind {
        let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        for (k, v) in verts.iter_mut().enumerate() {
            let t = theta + k as f32 * std::f32::consts::TAU / 3.0;
            *v = (cx + a * t.cos(), cy + a * t.sin());
        }
    }
    Shape { kind, cx, cy, a, b, verts }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Per-pixel colour of one texture family.
struct Texture {
    family: usize,
    c0: [f32; 3],
    c1: [f32; 3],
    gx: f32,
    gy: f32,
    period: f32,
    angle: f32,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng, family: usize) -> Self {
        Self {
            family,
            c0: random_color(rng),
            c1: random_color(rng),
            gx: rng.gen_range(-0.2..0.2),
            gy: rng.gen_range(-0.2..0.2),
            period: rng.gen_range(3.0..6.0),
            angle: rng.gen_range(0.0..std::f32::consts::PI),
        }
    }

    fn color(&self, x: f32, y: f32, w: f32, h: f32, ch: usize) -> f32 {
        match self.family {
            0 => self.c0[ch] + self.gx * (x / w - 0.5) + self.gy * (y / h - 0.5),
            1 => {
                let u = x * self.angle.cos() + y * self.angle.sin();
                if (u / self.period).floor() as i64 % 2 == 0 { self.c0[ch] } else { self.c1[ch] }
            }
            _ => {
                let cell = self.period.floor().max(2.0);
                let parity = ((x / cell).floor() + (y / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 { self.c0[ch] } else { self.c1[ch] }
            }
        }
    }
}

fn render(cfg: &SynthConfig, seed: u64) -> (Tensor, IntMask) {
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Texture::sample(&mut rng, 0);
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                img[ch * plane + y * w + x] = background.color(x as f32, y as f32, w as f32, h as f32, ch);
            }
        }
    }
    let mut mask = IntMask::filled(h, w, 0);
    let classes = WeightedIndex::new(cfg.rates()).expect("validated rates");
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    for _ in 0..count {
        let class = classes.sample(&mut rng) + 1;
        let (kind, preferred) = class_style(class);
        let family = if rng.gen_bool(cfg.texture_cue as f64) { preferred } else { rng.gen_range(0..3) };
        let area = rng.gen_range(cfg.area_min..=cfg.area_max) * plane as f32;
        let shape = place_shape(&mut rng, kind, area, h, w);
        let tex = Texture::sample(&mut rng, family);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f32, y as f32) {
                    mask.set(y, x, class as u8);
                    for ch in 0..3 {
                        img[ch * plane + y * w + x] = tex.color(x as f32, y as f32, w as f32, h as f32, ch);
                    }
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, cfg.noise_std).expect("validated std");
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    // Quantise so that images survive an 8-bit round trip unchanged.
    for v in img.iter_mut() {
        *v = super::netpbm::to_byte(*v) as f32 / 255.0;
    }
    (Tensor::new(vec![3, h, w], img).expect("sized"), mask)
}
