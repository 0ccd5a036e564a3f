//! Training losses and their composition over the two sub-batches.
//!
//! A stage-2/3 minibatch is laid out as sub-batch 1 followed by sub-batch 2.
//! Sub-batch 2 carries ground truth and identity augmentation specs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{apply_dense, apply_image, apply_mask, AugmentSpec};
use crate::engine::{argmax_channels, BoolMask, EngineError, IntMask, Tape, Tensor, Var};
use crate::net::{AuxKind, MultiTaskNet, NetError};
use crate::trainer::PseudoMaskStore;

pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("sample `{0}` has no ground-truth mask")]
    Unlabelled(String),
    #[error("no pseudo-mask for sample `{0}`")]
    MissingPseudoMask(String),
    #[error("stage {stage} cannot run on a network with auxiliary branch {aux:?}")]
    StageMismatch { stage: u8, aux: AuxKind },
    #[error("stage {0} needs a pseudo-mask store")]
    MissingStore(u8),
    #[error("invalid stage {0}")]
    InvalidStage(u8),
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_con: f32,
    pub lambda_pl: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_con: 0.5, lambda_pl: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_con >= 0.0 && self.lambda_pl >= 0.0)
            || !self.lambda_con.is_finite()
            || !self.lambda_pl.is_finite()
        {
            return Err(LossError::Weights(format!(
                "lambda_con = {}, lambda_pl = {} must be finite and >= 0",
                self.lambda_con, self.lambda_pl
            )));
        }
        Ok(())
    }
}

/// Target form of the consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyTarget {
    /// Teacher distribution, transported by the augmentation.
    #[default]
    Soft,
    /// Argmax of the transported teacher distribution.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOptions {
    /// Include the consistency term.
    pub consistency: bool,
    /// Include the auxiliary pseudo-mask term.
    pub pseudo: bool,
    pub target: ConsistencyTarget,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { consistency: true, pseudo: true, target: ConsistencyTarget::Soft }
    }
}

#[derive(Clone, Debug)]
pub struct BatchItem {
    pub id: String,
    pub image: Tensor,
    /// Ground truth; required for sub-batch 2.
    pub mask: Option<IntMask>,
    /// The sample was mirrored before entering the batch (a weak flip); its
    /// pseudo-mask is mirrored to match.
    pub flipped: bool,
    pub spec: AugmentSpec,
}

#[derive(Clone, Debug)]
pub struct StageBatch {
    pub items: Vec<BatchItem>,
    /// Index of the first sub-batch-2 item.
    pub sub2_start: usize,
    /// Per-channel fill value for augmented images.
    pub fill: Vec<f32>,
}

impl StageBatch {
    pub fn sub2(&self) -> &[BatchItem] {
        &self.items[self.sub2_start..]
    }
}

/// Scalar loss node plus the detached values of its terms.
#[derive(Clone, Copy, Debug)]
pub struct StageLoss {
    pub total: Var,
    pub seg: f32,
    pub con: f32,
    pub pl: f32,
}

fn stack_images<'a>(images: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let items: Vec<Tensor> = images.cloned().collect();
    if items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    Ok(Tensor::stack(&items)?)
}

fn ground_truth(items: &[BatchItem]) -> Result<Vec<IntMask>> {
    items
        .iter()
        .map(|it| it.mask.clone().ok_or_else(|| LossError::Unlabelled(it.id.clone())))
        .collect()
}

pub fn mirror(mask: &IntMask) -> IntMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = mask.clone();
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, mask.get(r, w - 1 - c));
        }
    }
    out
}

fn pseudo_target(item: &BatchItem, store: &PseudoMaskStore) -> Result<IntMask> {
    let m = store.get(&item.id).ok_or_else(|| LossError::MissingPseudoMask(item.id.clone()))?;
    let m = if item.flipped { mirror(m) } else { m.clone() };
    Ok(apply_mask(&item.spec, &m, IGNORE_INDEX))
}

/// Mean of `per_sample` scalar nodes.
fn mean_of(tape: &mut Tape, per_sample: &[Var]) -> Result<Var> {
    let mut acc = per_sample[0];
    for &v in &per_sample[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / per_sample.len() as f32))
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Supervised cross-entropy of `f` on labelled items (no augmentation).
pub fn loss_seg(net: &MultiTaskNet, tape: &mut Tape, items: &[BatchItem]) -> Result<Var> {
    let masks = ground_truth(items)?;
    let x = stack_images(items.iter().map(|it| &it.image))?;
    let xv = tape.constant(x);
    let logits = net.forward_f(tape, xv)?;
    Ok(tape.softmax_ce_hard(logits, &masks, IGNORE_INDEX)?)
}

fn seg_from_logits(tape: &mut Tape, f_logits: Var, batch: &StageBatch) -> Result<Var> {
    let sub2 = batch.sub2();
    if sub2.is_empty() {
        return Ok(zero(tape));
    }
    let masks = ground_truth(sub2)?;
    let slice = tape.slice_batch(f_logits, batch.sub2_start, sub2.len())?;
    Ok(tape.softmax_ce_hard(slice, &masks, IGNORE_INDEX)?)
}

/// Teacher targets for every item: transported distribution and validity.
fn teacher_targets(net: &MultiTaskNet, items: &[BatchItem]) -> Result<Vec<(Tensor, BoolMask)>> {
    let x = stack_images(items.iter().map(|it| &it.image))?;
    let probs = net.forward_teacher(&x)?;
    items
        .iter()
        .enumerate()
        .map(|(i, it)| Ok(apply_dense(&it.spec, &probs.sample(i)?)))
        .collect()
}

fn augmented_input(items: &[BatchItem], fill: &[f32]) -> Result<Tensor> {
    let views: Vec<Tensor> = items.iter().map(|it| apply_image(&it.spec, &it.image, fill)).collect();
    stack_images(views.iter())
}

fn con_from_logits(
    net: &MultiTaskNet,
    tape: &mut Tape,
    f_logits: Var,
    items: &[BatchItem],
    target: ConsistencyTarget,
) -> Result<Var> {
    let targets = teacher_targets(net, items)?;
    let mut per_sample = Vec::with_capacity(items.len());
    for (i, (probs, valid)) in targets.into_iter().enumerate() {
        let s = tape.slice_batch(f_logits, i, 1)?;
        let shape = probs.shape().to_vec();
        let l = match target {
            ConsistencyTarget::Soft => {
                let t = probs.reshape(vec![1, shape[0], shape[1], shape[2]])?;
                tape.softmax_ce_soft(s, &t, &[valid])?
            }
            ConsistencyTarget::Hard => {
                let mut hard = argmax_channels(&probs)?;
                for (v, &ok) in hard.data_mut().iter_mut().zip(valid.data()) {
                    if !ok {
                        *v = IGNORE_INDEX;
                    }
                }
                tape.softmax_ce_hard(s, &[hard], IGNORE_INDEX)?
            }
        };
        per_sample.push(l);
    }
    mean_of(tape, &per_sample)
}

fn pl_from_logits(
    tape: &mut Tape,
    aux_logits: Var,
    items: &[BatchItem],
    store: &PseudoMaskStore,
) -> Result<Var> {
    let mut per_sample = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let target = pseudo_target(it, store)?;
        let s = tape.slice_batch(aux_logits, i, 1)?;
        per_sample.push(tape.softmax_ce_hard(s, &[target], IGNORE_INDEX)?);
    }
    mean_of(tape, &per_sample)
}

/// Consistency between the student on augmented inputs and the transported
/// teacher prediction on clean inputs, averaged over samples.
pub fn loss_con(
    net: &MultiTaskNet,
    tape: &mut Tape,
    items: &[BatchItem],
    fill: &[f32],
    target: ConsistencyTarget,
) -> Result<Var> {
    let xv = tape.constant(augmented_input(items, fill)?);
    let logits = net.forward_f(tape, xv)?;
    con_from_logits(net, tape, logits, items, target)
}

/// Cross-entropy of the auxiliary branch on augmented inputs against the
/// transported pseudo-masks, averaged over samples.
pub fn loss_pl(
    net: &MultiTaskNet,
    tape: &mut Tape,
    items: &[BatchItem],
    fill: &[f32],
    store: &PseudoMaskStore,
) -> Result<Var> {
    let xv = tape.constant(augmented_input(items, fill)?);
    let logits = net.forward_aux(tape, xv)?;
    pl_from_logits(tape, logits, items, store)
}

fn check_stage(net: &MultiTaskNet, stage: u8, opts: &LossOptions) -> Result<()> {
    let aux = net.aux_kind();
    let ok = match stage {
        1 => aux == AuxKind::None,
        2 | 3 if !opts.pseudo => aux == AuxKind::None,
        2 => aux == AuxKind::Stage2,
        // A stage-2 style branch in stage 3 is the N2 ablation.
        3 => matches!(aux, AuxKind::Stage2 | AuxKind::Stage3),
        s => return Err(LossError::InvalidStage(s)),
    };
    if ok {
        Ok(())
    } else {
        Err(LossError::StageMismatch { stage, aux })
    }
}

/// Stage 1: supervised loss on sub-batch 2. Stages 2 and 3: supervised loss
/// on sub-batch 2 plus weighted consistency and pseudo-mask terms over the
/// whole minibatch. The network's trunk runs once on the augmented batch.
pub fn loss_stage(
    net: &MultiTaskNet,
    tape: &mut Tape,
    batch: &StageBatch,
    store: Option<&PseudoMaskStore>,
    weights: LossWeights,
    stage: u8,
    opts: LossOptions,
) -> Result<StageLoss> {
    weights.validate()?;
    check_stage(net, stage, &opts)?;
    if stage == 1 {
        let sub2 = batch.sub2();
        if sub2.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        let total = loss_seg(net, tape, sub2)?;
        let seg = tape.value(total).item()?;
        return Ok(StageLoss { total, seg, con: 0.0, pl: 0.0 });
    }
    if batch.items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let store = match (opts.pseudo, store) {
        (true, None) => return Err(LossError::MissingStore(stage)),
        (_, s) => s,
    };
    let xv = tape.constant(augmented_input(&batch.items, &batch.fill)?);
    let (f_logits, aux_logits) = if opts.pseudo {
        let (f, a) = net.forward_both(tape, xv)?;
        (f, Some(a))
    } else {
        (net.forward_f(tape, xv)?, None)
    };
    let seg = seg_from_logits(tape, f_logits, batch)?;
    let mut total = seg;
    let mut values = (tape.value(seg).item()?, 0.0, 0.0);
    if opts.consistency {
        let con = con_from_logits(net, tape, f_logits, &batch.items, opts.target)?;
        values.1 = tape.value(con).item()?;
        let weighted = tape.scale(con, weights.lambda_con);
        total = tape.add(total, weighted)?;
    }
    if let (Some(aux), Some(store)) = (aux_logits, store) {
        let pl = pl_from_logits(tape, aux, &batch.items, store)?;
        values.2 = tape.value(pl).item()?;
        let weighted = tape.scale(pl, weights.lambda_pl);
        total = tape.add(total, weighted)?;
    }
    Ok(StageLoss { total, seg: values.0, con: values.1, pl: values.2 })
}

