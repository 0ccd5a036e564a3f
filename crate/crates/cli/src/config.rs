//! Run configuration file.
//!
//! TOML with one table per section. Every key is optional; unknown keys
//! are errors reported with their full path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tssl_core::augment::PolicyConfig;
use tssl_core::data::{LabelledAmount, SynthConfig};
use tssl_core::loss::ConsistencyTarget;
use tssl_core::net::{desk_arch, BlockSpec};
use tssl_core::trainer::{Ablation, PipelinePlan, RunSettings, StagePlan};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub arch: ArchSection,
    pub augment: PolicyConfig,
    pub loss: LossSection,
    pub stage1: StageSection,
    pub stage2: StageSection,
    pub stage3: StageSection,
    pub ablation: Ablation,
    pub seeds: Seeds,
    pub output: OutputSection,
}

/// Where the images come from. With `path` set, the directory must hold
/// `train/` and `val/` in the dataset layout written by `tssl synth`;
/// otherwise the synthetic generator runs in memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// `{ fraction = 0.05 }` or `{ count = 30 }`.
    pub labelled: LabelledAmount,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { labelled: LabelledAmount::Fraction(0.05) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Halve the widths of the auxiliary branch's own blocks.
    pub aux_half_width: bool,
    pub blocks: Vec<BlockSpec>,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self { in_channels: 3, num_classes: 4, aux_half_width: true, blocks: desk_arch() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub consistency_target: ConsistencyTarget,
    pub weak_flip: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { consistency_target: ConsistencyTarget::Soft, weak_flip: true }
    }
}

/// A stage plan without its seed, which comes from `seeds.train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub steps: usize,
    pub lr: f32,
    pub b1: usize,
    pub b2: usize,
    pub lambda_con: f32,
    pub lambda_pl: f32,
    pub ema_alpha: f32,
    pub eval_every: usize,
}

impl Default for StageSection {
    fn default() -> Self {
        let p = StagePlan::default();
        Self {
            steps: p.steps,
            lr: p.lr,
            b1: p.b1,
            b2: p.b2,
            lambda_con: p.lambda_con,
            lambda_pl: p.lambda_pl,
            ema_alpha: p.ema_alpha,
            eval_every: p.eval_every,
        }
    }
}

impl StageSection {
    fn plan(&self, seed: u64) -> StagePlan {
        StagePlan {
            steps: self.steps,
            lr: self.lr,
            b1: self.b1,
            b2: self.b2,
            lambda_con: self.lambda_con,
            lambda_pl: self.lambda_pl,
            ema_alpha: self.ema_alpha,
            eval_every: self.eval_every,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Synthetic generation and the labelled/unlabelled split.
    pub data: u64,
    /// Initialisation, sampling and augmentation of every stage.
    pub train: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Record wall-clock milliseconds in metrics files.
    pub timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), timing: false }
    }
}

pub const SNAPSHOT_NAME: &str = "config.resolved.toml";

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path.is_empty() || path == "." {
                CliError::Config(msg)
            } else {
                CliError::Config(format!("{path}: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.dataset.path.is_none() && self.dataset.synth.num_classes != self.arch.num_classes {
            return bad(format!(
                "dataset.synth.num_classes ({}) differs from arch.num_classes ({})",
                self.dataset.synth.num_classes, self.arch.num_classes
            ));
        }
        self.dataset.synth.validate().map_err(|e| CliError::Config(format!("dataset.synth: {e}")))?;
        self.augment.validate().map_err(|e| CliError::Config(format!("augment: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            arch: self.arch.blocks.clone(),
            in_channels: self.arch.in_channels,
            num_classes: self.arch.num_classes,
            aux_half_width: self.arch.aux_half_width,
            policy: self.augment.clone(),
            consistency_target: self.loss.consistency_target,
            weak_flip: self.loss.weak_flip,
            ablation: self.ablation,
            timing: self.output.timing,
            ..RunSettings::default()
        }
    }

    /// Stage `k` is seeded `seeds.train * 10 + k`, as in
    /// [`PipelinePlan::seeded`].
    pub fn pipeline(&self) -> PipelinePlan {
        let s = self.seeds.train * 10;
        PipelinePlan {
            stages: [self.stage1.plan(s + 1), self.stage2.plan(s + 2), self.stage3.plan(s + 3)],
            settings: self.settings(),
        }
    }
}
