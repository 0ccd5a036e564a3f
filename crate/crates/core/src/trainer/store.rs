//! Pseudo-masks handed from one stage to the next.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use super::{Result, TrainError};
use crate::data::netpbm;
use crate::engine::IntMask;

/// Which stage's network produced the masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generation {
    /// Initial masks from the stage-1 network.
    Stage1,
    /// Refined masks from the stage-2 network.
    Stage2,
}

impl Generation {
    pub fn tag(self) -> &'static str {
        match self {
            Generation::Stage1 => "stage1",
            Generation::Stage2 => "stage2",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "stage1" => Some(Generation::Stage1),
            "stage2" => Some(Generation::Stage2),
            _ => None,
        }
    }
}

impl fmt::Display for Generation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Immutable once built: stages only read from it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMaskStore {
    masks: BTreeMap<String, IntMask>,
    generation: Generation,
    checkpoint_hash: String,
}

const MANIFEST: &str = "manifest.txt";

impl PseudoMaskStore {
    pub fn new(
        masks: BTreeMap<String, IntMask>,
        generation: Generation,
        checkpoint_hash: impl Into<String>,
    ) -> Self {
        Self { masks, generation, checkpoint_hash: checkpoint_hash.into() }
    }

    pub fn get(&self, id: &str) -> Option<&IntMask> {
        self.masks.get(id)
    }

    pub fn masks(&self) -> &BTreeMap<String, IntMask> {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn generation(&self) -> Generation {
        self.generation
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    /// Errors with the first id that has no mask.
    pub fn check_covers<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for id in ids {
            if !self.masks.contains_key(id) {
                return Err(TrainError::IncompleteStore(id.to_string()));
            }
        }
        Ok(())
    }

    /// Writes `masks/<id>.pgm` and a manifest with one
    /// `<id> <generation> <checkpoint hash>` line per mask.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("masks"))?;
        let mut manifest = String::new();
        for (id, m) in &self.masks {
            netpbm::write_pgm(&dir.join("masks").join(format!("{id}.pgm")), m)?;
            manifest.push_str(&format!("{id} {} {}\n", self.generation, self.checkpoint_hash));
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| {
            TrainError::Sequencing(format!("no pseudo-mask store at {}: {e}", dir.display()))
        })?;
        let mut masks = BTreeMap::new();
        let mut header: Option<(Generation, String)> = None;
        for (n, line) in text.lines().enumerate() {
            let bad = || TrainError::Store(format!("{} line {}: {line:?}", path.display(), n + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [id, tag, hash] = parts[..] else {
                return Err(bad());
            };
            let generation = Generation::from_tag(tag).ok_or_else(bad)?;
            match &header {
                None => header = Some((generation, hash.to_string())),
                Some((g, h)) if *g != generation || h != hash => {
                    return Err(TrainError::Store(format!(
                        "{}: mixed generations or checkpoints",
                        path.display()
                    )))
                }
                Some(_) => {}
            }
            let m = netpbm::read_pgm(&dir.join("masks").join(format!("{id}.pgm")))?;
            masks.insert(id.to_string(), m);
        }
        let (generation, hash) =
            header.ok_or_else(|| TrainError::Store(format!("{} is empty", path.display())))?;
        Ok(Self { masks, generation, checkpoint_hash: hash })
    }
}
