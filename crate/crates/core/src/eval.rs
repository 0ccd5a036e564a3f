//! Confusion matrices and IoU scores.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::HiddenTruth;
use crate::engine::IntMask;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    Shape { pred: (usize, usize), gt: (usize, usize) },
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: u8, classes: usize },
    #[error("no class has a nonzero union; nothing was scored")]
    NothingScored,
    #[error("no ground truth for sample `{0}`")]
    MissingTruth(String),
    #[error("no prediction for sample `{0}`")]
    MissingPrediction(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes], ignored: 0 }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &IntMask, gt: &IntMask, ignore_index: u8) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(EvalError::Shape {
                pred: (pred.height(), pred.width()),
                gt: (gt.height(), gt.width()),
            });
        }
        let check = |id: u8| {
            if id as usize >= self.classes {
                Err(EvalError::ClassOutOfRange { id, classes: self.classes })
            } else {
                Ok(())
            }
        };
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != ignore_index {
                check(g)?;
                check(p)?;
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore_index {
                self.ignored += 1;
            } else {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    /// `(TP, TP + FP + FN)` of class `c`.
    pub fn iou_fraction(&self, c: usize) -> (u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        (tp, row + col - tp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let per_class: Vec<Option<f64>> = (0..cm.classes())
        .map(|c| {
            let (tp, union) = cm.iou_fraction(c);
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(EvalError::NothingScored);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// Confusion matrix over paired masks, accumulated per image in parallel.
pub fn confusion_of<'a>(
    pairs: &[(&'a IntMask, &'a IntMask)],
    classes: usize,
    ignore_index: u8,
) -> Result<ConfusionMatrix> {
    let parts: Vec<Result<ConfusionMatrix>> = pairs
        .par_iter()
        .map(|(pred, gt)| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(pred, gt, ignore_index)?;
            Ok(cm)
        })
        .collect();
    let mut total = ConfusionMatrix::new(classes);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// mIoU of stored pseudo-masks against the hidden ground truth of the
/// unlabelled samples.
pub fn pseudo_quality(
    store: &BTreeMap<String, IntMask>,
    hidden: &HiddenTruth,
    classes: usize,
    ignore_index: u8,
) -> Result<IouReport> {
    let mut pairs = Vec::with_capacity(hidden.len());
    for (id, gt) in hidden.iter() {
        let pred = store.get(id).ok_or_else(|| EvalError::MissingPrediction(id.clone()))?;
        pairs.push((pred, gt));
    }
    if pairs.is_empty() {
        return Err(EvalError::MissingTruth("<no unlabelled samples with ground truth>".into()));
    }
    miou(&confusion_of(&pairs, classes, ignore_index)?)
}
