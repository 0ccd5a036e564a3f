//! Stage runners for the three-stage scheme and the pipeline that chains
//! them through pseudo-mask stores.
//!
//! Stage 1 trains `f` on labelled data. Stages 2 and 3 start from freshly
//! initialised weights, add an auxiliary branch trained on the previous
//! store, and keep an EMA teacher that is updated once after every
//! optimizer step. Only stores cross stage boundaries.

mod metrics;
mod store;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{sample_spec, AugmentSpec, PolicyConfig};
use crate::data::{DataError, LabelledSample, PoolRef, Sampler, SplitData};
use crate::engine::{adam_step, checkpoint, AdamConfig, AdamState, EngineError, IntMask, Tape, Tensor};
use crate::eval::{self, ConfusionMatrix, EvalError};
use crate::loss::{
    loss_stage, mirror, BatchItem, ConsistencyTarget, LossError, LossOptions, LossWeights,
    StageBatch, IGNORE_INDEX,
};
use crate::net::{desk_arch, AuxKind, BlockSpec, MultiTaskNet, NetConfig, NetError};
use crate::seed::derive_seed;

pub use metrics::{metrics_csv, read_metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use store::{Generation, PseudoMaskStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("labelled set is empty")]
    EmptyLabelled,
    #[error("pseudo-mask store has no mask for `{0}`")]
    IncompleteStore(String),
    #[error("stage sequencing: {0}")]
    Sequencing(String),
    #[error("pseudo-mask store: {0}")]
    Store(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Settings of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub steps: usize,
    pub lr: f32,
    pub b1: usize,
    pub b2: usize,
    pub lambda_con: f32,
    pub lambda_pl: f32,
    pub ema_alpha: f32,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            b1: 4,
            b2: 4,
            lambda_con: 0.5,
            lambda_pl: 0.5,
            ema_alpha: 0.99,
            eval_every: 375,
            seed: 0,
        }
    }
}

impl StagePlan {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_con: self.lambda_con, lambda_pl: self.lambda_pl }
    }

    fn validate(&self, stage: u8) -> Result<()> {
        let bad = |m: String| Err(TrainError::Plan(format!("stage {stage}: {m}")));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if stage == 1 && self.b2 == 0 {
            return bad("stage 1 trains on sub-batch 2, so b2 must be >= 1".into());
        }
        if self.b1 + self.b2 == 0 {
            return bad("b1 + b2 must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        self.weights().validate().map_err(TrainError::from)
    }
}

/// Switches that remove one component of stages 2 and 3.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Drop the consistency term.
    pub cr: bool,
    /// Drop the auxiliary branch and its pseudo-mask term.
    pub t2: bool,
    /// Replace strong augmentation by identity operators.
    pub sa: bool,
    /// Use the stage-2 style branch (fewer shared blocks) in stage 3.
    pub n2: bool,
    /// Pin the teacher to the student instead of averaging.
    pub ema: bool,
}

impl Ablation {
    pub fn parse_flag(&mut self, flag: &str) -> std::result::Result<(), String> {
        match flag {
            "cr" => self.cr = true,
            "t2" => self.t2 = true,
            "sa" => self.sa = true,
            "n2" => self.n2 = true,
            "ema" => self.ema = true,
            other => return Err(format!("unknown ablation `{other}` (expected cr|t2|sa|n2|ema)")),
        }
        Ok(())
    }
}

/// Settings shared by every stage of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub arch: Vec<BlockSpec>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub aux_half_width: bool,
    pub policy: PolicyConfig,
    pub consistency_target: ConsistencyTarget,
    /// Random horizontal flips of sub-batch 2.
    pub weak_flip: bool,
    pub ablation: Ablation,
    /// Record wall-clock time in metrics rows. Off keeps metrics files
    /// byte-identical across runs.
    pub timing: bool,
    pub adam: AdamConfig,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            arch: desk_arch(),
            in_channels: 3,
            num_classes: 4,
            aux_half_width: true,
            policy: PolicyConfig::default(),
            consistency_target: ConsistencyTarget::Soft,
            weak_flip: true,
            ablation: Ablation::default(),
            timing: false,
            adam: AdamConfig::default(),
        }
    }
}

impl RunSettings {
    /// Auxiliary branch used in `stage` under the current ablations.
    pub fn aux_kind(&self, stage: u8) -> AuxKind {
        match stage {
            1 => AuxKind::None,
            _ if self.ablation.t2 => AuxKind::None,
            2 => AuxKind::Stage2,
            _ if self.ablation.n2 => AuxKind::Stage2,
            _ => AuxKind::Stage3,
        }
    }

    pub fn net_config(&self, aux_kind: AuxKind) -> NetConfig {
        NetConfig {
            arch: self.arch.clone(),
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            aux_kind,
            aux_half_width: self.aux_half_width,
        }
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            consistency: !self.ablation.cr,
            pseudo: !self.ablation.t2,
            target: self.consistency_target,
        }
    }

    fn policy(&self) -> PolicyConfig {
        if self.ablation.sa {
            PolicyConfig::disabled()
        } else {
            self.policy.clone()
        }
    }
}

/// Training split, validation set and the image fill colour.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub split: SplitData,
    pub val: Vec<LabelledSample>,
    /// Per-channel mean of the training images.
    pub fill: Vec<f32>,
}

impl TrainData {
    pub fn new(split: SplitData, val: Vec<LabelledSample>) -> Self {
        let fill = crate::data::channel_mean(split.all_images().map(|(_, img)| img));
        Self { split, val, fill }
    }
}

#[derive(Debug)]
pub struct StageOutcome {
    pub stage: u8,
    pub net: MultiTaskNet,
    pub checkpoint: Vec<(String, Tensor)>,
    pub checkpoint_hash: String,
    pub rows: Vec<MetricsRow>,
    pub val_miou: f64,
    /// Validation mIoU of the EMA teacher (stages 2 and 3).
    pub teacher_val_miou: Option<f64>,
}

const INIT_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const AUG_STREAM: u64 = 3;
const FLIP_STREAM: u64 = 4;
const EVAL_CHUNK: usize = 32;

/// Argmax masks of `f` for a list of images.
pub fn predict_all<'a>(
    net: &MultiTaskNet,
    images: impl Iterator<Item = &'a Tensor>,
) -> Result<Vec<IntMask>> {
    let images: Vec<&Tensor> = images.collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
        out.extend(net.predict_masks(&Tensor::stack(&owned)?)?);
    }
    Ok(out)
}

fn teacher_masks(net: &MultiTaskNet, images: &[&Tensor]) -> Result<Vec<IntMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let owned: Vec<Tensor> = chunk.iter().map(|t| (*t).clone()).collect();
        let probs = net.forward_teacher(&Tensor::stack(&owned)?)?;
        for i in 0..owned.len() {
            out.push(crate::engine::argmax_channels(&probs.sample(i)?)?);
        }
    }
    Ok(out)
}

/// Validation mIoU of `f`.
pub fn evaluate(net: &MultiTaskNet, val: &[LabelledSample], classes: usize) -> Result<f64> {
    let preds = predict_all(net, val.iter().map(|s| &s.image))?;
    score(&preds, val.iter().map(|s| &s.mask), classes)
}

fn score<'a>(
    preds: &[IntMask],
    gts: impl Iterator<Item = &'a IntMask>,
    classes: usize,
) -> Result<f64> {
    let pairs: Vec<(&IntMask, &IntMask)> = preds.iter().zip(gts).collect();
    Ok(eval::miou(&eval::confusion_of(&pairs, classes, IGNORE_INDEX)?)?.mean)
}

/// mIoU of `f`'s argmax on the unlabelled images against their hidden
/// ground truth; `None` when no hidden truth exists.
fn unlabelled_miou(net: &MultiTaskNet, split: &SplitData, classes: usize) -> Result<Option<f64>> {
    let scored: Vec<_> = split
        .unlabelled
        .iter()
        .filter_map(|s| split.hidden.get(&s.id).map(|gt| (&s.image, gt)))
        .collect();
    if scored.is_empty() {
        return Ok(None);
    }
    let preds = predict_all(net, scored.iter().map(|(img, _)| *img))?;
    Ok(Some(score(&preds, scored.iter().map(|(_, gt)| *gt), classes)?))
}

/// Pixelwise argmax of `f` for every training sample (`L ∪ U`).
pub fn generate_pseudo(
    net: &MultiTaskNet,
    split: &SplitData,
    generation: Generation,
    checkpoint_hash: &str,
) -> Result<PseudoMaskStore> {
    let ids: Vec<&str> = split.all_images().map(|(id, _)| id).collect();
    let preds = predict_all(net, split.all_images().map(|(_, img)| img))?;
    let masks: BTreeMap<String, IntMask> =
        ids.into_iter().map(str::to_string).zip(preds).collect();
    Ok(PseudoMaskStore::new(masks, generation, checkpoint_hash))
}

fn build_batch(
    stage: u8,
    step: usize,
    plan: &StagePlan,
    settings: &RunSettings,
    policy: &PolicyConfig,
    data: &TrainData,
    sampler: &mut Sampler,
) -> Result<StageBatch> {
    let b1 = if stage == 1 { 0 } else { plan.b1 };
    let mb = sampler.next_minibatch(b1, plan.b2)?;
    let aug_seed = derive_seed(derive_seed(plan.seed, AUG_STREAM), step as u64);
    let mut flip_rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(plan.seed, FLIP_STREAM), step as u64));
    let split = &data.split;
    let mut items = Vec::with_capacity(mb.sub1.len() + mb.sub2.len());
    for (i, r) in mb.sub1.iter().enumerate() {
        let (id, image) = match *r {
            PoolRef::Labelled(k) => (&split.labelled[k].id, &split.labelled[k].image),
            PoolRef::Unlabelled(k) => (&split.unlabelled[k].id, &split.unlabelled[k].image),
        };
        items.push(BatchItem {
            id: id.clone(),
            image: image.clone(),
            mask: None,
            flipped: false,
            spec: sample_spec(derive_seed(aug_seed, i as u64), policy),
        });
    }
    let sub2_start = items.len();
    for &k in &mb.sub2 {
        let s = &split.labelled[k];
        let flip = settings.weak_flip && flip_rng.gen_bool(0.5);
        let (image, mask) = if flip {
            let mut spec = AugmentSpec::identity();
            spec.flip = true;
            spec.identity = false;
            (crate::augment::apply_image(&spec, &s.image, &data.fill), mirror(&s.mask))
        } else {
            (s.image.clone(), s.mask.clone())
        };
        items.push(BatchItem {
            id: s.id.clone(),
            image,
            mask: Some(mask),
            flipped: flip,
            spec: AugmentSpec::identity(),
        });
    }
    Ok(StageBatch { items, sub2_start, fill: data.fill.clone() })
}

/// Trains one stage from fresh weights. `store` is required for stages 2
/// and 3 unless the auxiliary branch is ablated.
pub fn run_stage(
    stage: u8,
    plan: &StagePlan,
    settings: &RunSettings,
    data: &TrainData,
    store: Option<&PseudoMaskStore>,
) -> Result<StageOutcome> {
    if !(1..=3).contains(&stage) {
        return Err(TrainError::Plan(format!("stage {stage} is not 1, 2 or 3")));
    }
    plan.validate(stage)?;
    settings.policy.validate().map_err(TrainError::Plan)?;
    if data.split.labelled.is_empty() {
        return Err(TrainError::EmptyLabelled);
    }
    let opts = settings.loss_options();
    if stage > 1 && opts.pseudo {
        let store = store.ok_or_else(|| {
            TrainError::Sequencing(format!("stage {stage} needs the previous stage's pseudo-masks"))
        })?;
        store.check_covers(data.split.all_images().map(|(id, _)| id))?;
    }
    let classes = settings.num_classes;
    let net = MultiTaskNet::build(
        settings.net_config(settings.aux_kind(stage)),
        derive_seed(plan.seed, INIT_STREAM),
    )?;
    let params = net.trainable_params();
    let adam = AdamConfig { lr: plan.lr, ..settings.adam.clone() };
    let mut state = AdamState::new(&params, adam);
    let n_unlabelled = if stage == 1 { 0 } else { data.split.unlabelled.len() };
    let mut sampler = Sampler::new(data.split.labelled.len(), n_unlabelled, derive_seed(plan.seed, SAMPLER_STREAM));
    let policy = settings.policy();
    let started = Instant::now();

    let mut rows = Vec::new();
    let mut sums = [0.0f64; 3];
    let mut since = 0usize;
    for step in 1..=plan.steps {
        let batch = build_batch(stage, step, plan, settings, &policy, data, &mut sampler)?;
        let mut tape = Tape::new();
        let loss = loss_stage(&net, &mut tape, &batch, store, plan.weights(), stage, opts)?;
        params.zero_grad();
        tape.backward(loss.total)?;
        adam_step(&params, &mut state)?;
        if stage > 1 {
            if settings.ablation.ema {
                net.reset_teacher()?;
            } else {
                net.update_teacher(plan.ema_alpha)?;
            }
        }
        for (s, v) in sums.iter_mut().zip([loss.seg, loss.con, loss.pl]) {
            *s += v as f64;
        }
        since += 1;
        if step % plan.eval_every == 0 || step == plan.steps {
            let val_miou = evaluate(&net, &data.val, classes)?;
            let pseudo_miou = unlabelled_miou(&net, &data.split, classes)?;
            rows.push(MetricsRow {
                step,
                stage,
                loss_seg: sums[0] / since as f64,
                loss_con: sums[1] / since as f64,
                loss_pl: sums[2] / since as f64,
                val_miou,
                pseudo_miou,
                wall_ms: if settings.timing { started.elapsed().as_millis() as u64 } else { 0 },
            });
            sums = [0.0; 3];
            since = 0;
        }
    }
    let val_miou = rows.last().map(|r| r.val_miou).unwrap_or(f64::NAN);
    let teacher_val_miou = if stage > 1 {
        let imgs: Vec<&Tensor> = data.val.iter().map(|s| &s.image).collect();
        let preds = teacher_masks(&net, &imgs)?;
        Some(score(&preds, data.val.iter().map(|s| &s.mask), classes)?)
    } else {
        None
    };
    let ckpt = net.checkpoint_tensors();
    let hash = checkpoint::digest(&ckpt);
    Ok(StageOutcome {
        stage,
        net,
        checkpoint: ckpt,
        checkpoint_hash: hash,
        rows,
        val_miou,
        teacher_val_miou,
    })
}

pub fn run_stage1(plan: &StagePlan, settings: &RunSettings, data: &TrainData) -> Result<StageOutcome> {
    run_stage(1, plan, settings, data, None)
}

/// Stage 2, followed by regeneration of the pseudo-masks with the new `f`.
pub fn run_stage2(
    plan: &StagePlan,
    settings: &RunSettings,
    data: &TrainData,
    store_hat: &PseudoMaskStore,
) -> Result<(StageOutcome, PseudoMaskStore)> {
    if store_hat.generation() != Generation::Stage1 {
        return Err(TrainError::Sequencing("stage 2 expects stage-1 pseudo-masks".into()));
    }
    let out = run_stage(2, plan, settings, data, Some(store_hat))?;
    let tilde = generate_pseudo(&out.net, &data.split, Generation::Stage2, &out.checkpoint_hash)?;
    Ok((out, tilde))
}

pub fn run_stage3(
    plan: &StagePlan,
    settings: &RunSettings,
    data: &TrainData,
    store_tilde: &PseudoMaskStore,
) -> Result<StageOutcome> {
    if store_tilde.generation() != Generation::Stage2 {
        return Err(TrainError::Sequencing("stage 3 expects stage-2 pseudo-masks".into()));
    }
    run_stage(3, plan, settings, data, Some(store_tilde))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelinePlan {
    pub stages: [StagePlan; 3],
    pub settings: RunSettings,
}

impl PipelinePlan {
    /// Three copies of `base`, with stage `k` seeded `seed * 10 + k`.
    pub fn seeded(base: &StagePlan, settings: RunSettings, seed: u64) -> Self {
        let plan = |k: u64| StagePlan { seed: seed * 10 + k, ..base.clone() };
        Self { stages: [plan(1), plan(2), plan(3)], settings }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: u8,
    pub steps: usize,
    pub val_miou: f64,
    pub teacher_val_miou: Option<f64>,
    pub checkpoint_hash: String,
}

#[derive(Debug)]
pub struct PipelineResult {
    pub records: Vec<StageRecord>,
    pub rows: Vec<MetricsRow>,
    /// Quality of the stage-1 and stage-2 stores against hidden truth.
    pub pseudo_quality: [Option<f64>; 2],
    pub stores: [PseudoMaskStore; 2],
    pub final_checkpoint: Vec<(String, Tensor)>,
}

fn store_quality(store: &PseudoMaskStore, split: &SplitData, classes: usize) -> Result<Option<f64>> {
    if split.hidden.is_empty() {
        return Ok(None);
    }
    Ok(Some(eval::pseudo_quality(store.masks(), &split.hidden, classes, IGNORE_INDEX)?.mean))
}

fn record(o: &StageOutcome, steps: usize) -> StageRecord {
    StageRecord {
        stage: o.stage,
        steps,
        val_miou: o.val_miou,
        teacher_val_miou: o.teacher_val_miou,
        checkpoint_hash: o.checkpoint_hash.clone(),
    }
}

/// Runs all three stages. With `out`, writes `stage{k}.ckpt`,
/// `metrics_stage{k}.csv` and the stores `pseudo_stage1/`, `pseudo_stage2/`.
pub fn run_pipeline(plan: &PipelinePlan, data: &TrainData, out: Option<&Path>) -> Result<PipelineResult> {
    let s = &plan.settings;
    let classes = s.num_classes;
    let persist = |o: &StageOutcome| -> Result<()> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            checkpoint::save(&dir.join(format!("stage{}.ckpt", o.stage)), &o.checkpoint)?;
            write_metrics_csv(&dir.join(format!("metrics_stage{}.csv", o.stage)), &o.rows)?;
        }
        Ok(())
    };

    let s1 = run_stage1(&plan.stages[0], s, data)?;
    persist(&s1)?;
    let hat = generate_pseudo(&s1.net, &data.split, Generation::Stage1, &s1.checkpoint_hash)?;
    if let Some(dir) = out {
        hat.save(&dir.join("pseudo_stage1"))?;
    }
    let (s2, tilde) = run_stage2(&plan.stages[1], s, data, &hat)?;
    persist(&s2)?;
    if let Some(dir) = out {
        tilde.save(&dir.join("pseudo_stage2"))?;
    }
    let s3 = run_stage3(&plan.stages[2], s, data, &tilde)?;
    persist(&s3)?;

    let pseudo_quality = [store_quality(&hat, &data.split, classes)?, store_quality(&tilde, &data.split, classes)?];
    let records = vec![
        record(&s1, plan.stages[0].steps),
        record(&s2, plan.stages[1].steps),
        record(&s3, plan.stages[2].steps),
    ];
    let mut rows = s1.rows;
    rows.extend(s2.rows);
    rows.extend(s3.rows);
    Ok(PipelineResult {
        records,
        rows,
        pseudo_quality,
        stores: [hat, tilde],
        final_checkpoint: s3.checkpoint,
    })
}

/// Confusion matrix of `f` on a labelled set.
pub fn confusion(net: &MultiTaskNet, samples: &[LabelledSample], classes: usize) -> Result<ConfusionMatrix> {
    let preds = predict_all(net, samples.iter().map(|s| &s.image))?;
    let pairs: Vec<(&IntMask, &IntMask)> = preds.iter().zip(samples.iter().map(|s| &s.mask)).collect();
    Ok(eval::confusion_of(&pairs, classes, IGNORE_INDEX)?)
}
