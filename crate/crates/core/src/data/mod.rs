//! Datasets: synthetic generation, on-disk layout, labelled/unlabelled
//! splitting and two-pool minibatch sampling.
//!
//! The training view of an unlabelled sample ([`UnlabelledSample`]) has no
//! mask field. Ground truth for those samples lives in [`HiddenTruth`],
//! which only evaluation code reads.

pub mod netpbm;
mod sampler;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, IntMask, Tensor};

pub use sampler::{Minibatch, PoolRef, Sampler};
pub use synth::{synth_generate, SynthConfig, SynthDataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: Option<IntMask>,
}

impl Sample {
    pub fn is_labelled(&self) -> bool {
        self.mask.is_some()
    }

    /// Converts a sample that must carry a mask, e.g. for validation.
    pub fn into_labelled(self) -> Result<LabelledSample> {
        match self.mask {
            Some(mask) => Ok(LabelledSample { id: self.id, image: self.image, mask }),
            None => Err(DataError::Split(format!("sample `{}` has no mask", self.id))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSample {
    pub id: String,
    pub image: Tensor,
    pub mask: IntMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabelledSample {
    pub id: String,
    pub image: Tensor,
}

/// Ground truth of unlabelled samples, kept for measuring pseudo-mask
/// quality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HiddenTruth(BTreeMap<String, IntMask>);

impl HiddenTruth {
    pub fn get(&self, id: &str) -> Option<&IntMask> {
        self.0.get(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &IntMask)> {
        self.0.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub labelled: Vec<LabelledSample>,
    pub unlabelled: Vec<UnlabelledSample>,
    pub hidden: HiddenTruth,
}

impl SplitData {
    /// Every training image in `L` then `U` order.
    pub fn all_images(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.labelled
            .iter()
            .map(|s| (s.id.as_str(), &s.image))
            .chain(self.unlabelled.iter().map(|s| (s.id.as_str(), &s.image)))
    }

    pub fn len(&self) -> usize {
        self.labelled.len() + self.unlabelled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelledAmount {
    Fraction(f64),
    Count(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub labelled: LabelledAmount,
    pub seed: u64,
}

/// Shuffles with `spec.seed` and takes the first `count` samples as
/// labelled. Both parts keep the input order.
pub fn split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<SplitData> {
    let n = samples.len();
    let count = match spec.labelled {
        LabelledAmount::Count(c) => c,
        LabelledAmount::Fraction(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(DataError::Split(format!("fraction {f} outside [0, 1]")));
            }
            (f * n as f64).round() as usize
        }
    };
    if count == 0 {
        return Err(DataError::Split("labelled set would be empty".into()));
    }
    if count > n {
        return Err(DataError::Split(format!("count {count} exceeds {n} samples")));
    }
    if let Some(s) = samples.iter().find(|s| s.mask.is_none()) {
        return Err(DataError::Split(format!("sample {} has no mask", s.id)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut is_l = vec![false; n];
    for &i in &order[..count] {
        is_l[i] = true;
    }
    let flags: Vec<bool> = is_l;
    Ok(assemble(samples, &flags))
}

fn assemble(samples: Vec<Sample>, labelled: &[bool]) -> SplitData {
    let mut out = SplitData {
        labelled: Vec::new(),
        unlabelled: Vec::new(),
        hidden: HiddenTruth::default(),
    };
    for (s, &l) in samples.into_iter().zip(labelled) {
        match (l, s.mask) {
            (true, Some(mask)) => out.labelled.push(LabelledSample { id: s.id, image: s.image, mask }),
            (_, mask) => {
                if let Some(m) = mask {
                    out.hidden.0.insert(s.id.clone(), m);
                }
                out.unlabelled.push(UnlabelledSample { id: s.id, image: s.image });
            }
        }
    }
    out
}

/// Per-channel mean over a set of `[C, H, W]` images.
pub fn channel_mean<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Vec<f32> {
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for img in images {
        let c = img.shape()[0];
        let plane = img.numel() / c;
        if sums.is_empty() {
            sums = vec![0.0; c];
        }
        for (k, s) in sums.iter_mut().enumerate() {
            *s += img.data()[k * plane..(k + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        count += plane;
    }
    sums.iter().map(|s| (s / count.max(1) as f64) as f32).collect()
}

/// Writes `images/<id>.ppm`, `masks/<id>.pgm` (for samples with masks) and
/// `split.txt`. `labelled[i]` sets the flag of `samples[i]`.
pub fn save_dataset(dir: &Path, samples: &[Sample], labelled: &[bool]) -> Result<()> {
    if samples.len() != labelled.len() {
        return Err(DataError::Split("one flag per sample required".into()));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut listing = String::new();
    for (s, &l) in samples.iter().zip(labelled) {
        check_id(&s.id)?;
        netpbm::write_ppm(&dir.join("images").join(format!("{}.ppm", s.id)), &s.image)?;
        if let Some(m) = &s.mask {
            netpbm::write_pgm(&dir.join("masks").join(format!("{}.pgm", s.id)), m)?;
        } else if l {
            return Err(DataError::Split(format!("labelled sample {} has no mask", s.id)));
        }
        listing.push_str(&format!("{} {}\n", s.id, if l { 'L' } else { 'U' }));
    }
    fs::write(dir.join("split.txt"), listing)?;
    Ok(())
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\') {
        return Err(DataError::Format(format!("sample id {id:?} is not a plain file stem")));
    }
    Ok(())
}

/// Reads a dataset directory. Returns samples in `split.txt` order with
/// their flags. Masks are optional for `U` entries.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Sample>, Vec<bool>)> {
    let listing = fs::read_to_string(dir.join("split.txt"))?;
    let mut samples = Vec::new();
    let mut flags = Vec::new();
    for (lineno, line) in listing.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || DataError::Format(format!("split.txt line {}: {line:?}", lineno + 1));
        let mut parts = line.split_whitespace();
        let (id, flag) = (parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
        if parts.next().is_some() {
            return Err(bad());
        }
        let l = match flag {
            "L" => true,
            "U" => false,
            _ => return Err(bad()),
        };
        check_id(id)?;
        let image = netpbm::read_ppm(&dir.join("images").join(format!("{id}.ppm")))?;
        let mask_path = dir.join("masks").join(format!("{id}.pgm"));
        let mask = if mask_path.exists() {
            let m = netpbm::read_pgm(&mask_path)?;
            if (m.height(), m.width()) != (image.shape()[1], image.shape()[2]) {
                return Err(DataError::Format(format!("{id}: mask and image sizes differ")));
            }
            Some(m)
        } else if l {
            return Err(DataError::Format(format!("labelled sample {id} has no mask")));
        } else {
            None
        };
        samples.push(Sample { id: id.to_string(), image, mask });
        flags.push(l);
    }
    Ok((samples, flags))
}

/// Loads a dataset directory as a training split, honouring `split.txt`.
pub fn load_split(dir: &Path) -> Result<SplitData> {
    let (samples, flags) = load_dataset(dir)?;
    if !flags.iter().any(|&l| l) {
        return Err(DataError::Split(format!("{}: no labelled samples", dir.display())));
    }
    Ok(assemble(samples, &flags))
}

/// Checks that every mask value is a class id or the ignore value.
pub fn check_masks<'a>(
    masks: impl IntoIterator<Item = (&'a str, &'a IntMask)>,
    num_classes: usize,
    ignore_index: u8,
) -> Result<()> {
    for (id, m) in masks {
        if let Some(v) = m.data().iter().find(|&&v| v != ignore_index && v as usize >= num_classes) {
            return Err(DataError::Format(format!(
                "{id}: class id {v} out of range for {num_classes} classes"
            )));
        }
    }
    Ok(())
}
