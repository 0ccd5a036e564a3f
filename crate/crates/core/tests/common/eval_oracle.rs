//! mIoU from explicit pixel sets, compared as exact fractions.

use std::collections::BTreeSet;

use rand::Rng;

use super::rng;
use tssl_core::engine::IntMask;
use tssl_core::eval::{miou, ConfusionMatrix};

/// `(|G ∩ P|, |G ∪ P|)` per class over all images.
pub fn set_iou(preds: &[IntMask], gts: &[IntMask], classes: usize, ignore: u8) -> Vec<(u64, u64)> {
    (0..classes)
        .map(|c| {
            let mut g = BTreeSet::new();
            let mut p = BTreeSet::new();
            for (img, (pm, gm)) in preds.iter().zip(gts).enumerate() {
                for (i, (&pv, &gv)) in pm.data().iter().zip(gm.data()).enumerate() {
                    if gv == ignore {
                        continue;
                    }
                    if gv as usize == c {
                        g.insert((img, i));
                    }
                    if pv as usize == c {
                        p.insert((img, i));
                    }
                }
            }
            (g.intersection(&p).count() as u64, g.union(&p).count() as u64)
        })
        .collect()
}

/// Random trials; returns the number of disagreements (per-class fraction
/// or mean) between the confusion-matrix path and the set oracle.
pub fn miou_oracle_suite(seed: u64, trials: usize) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let classes = r.gen_range(2..6usize);
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let n = r.gen_range(1..4);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..n {
            let pick = |r: &mut rand_chacha::ChaCha8Rng, ign: bool| {
                (0..h * w)
                    .map(|_| if ign && r.gen_bool(0.1) { 255 } else { r.gen_range(0..classes as u8) })
                    .collect::<Vec<u8>>()
            };
            preds.push(IntMask::new(h, w, pick(&mut r, false)).unwrap());
            gts.push(IntMask::new(h, w, pick(&mut r, true)).unwrap());
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (p, g) in preds.iter().zip(&gts) {
            cm.accumulate(p, g, 255).unwrap();
        }
        let oracle = set_iou(&preds, &gts, classes, 255);
        for (c, &(num, den)) in oracle.iter().enumerate() {
            let (tp, union) = cm.iou_fraction(c);
            // exact equality of fractions by cross-multiplication
            if tp * den != num * union || (den == 0) != (union == 0) {
                bad += 1;
            }
        }
        let present: Vec<f64> = oracle.iter().filter(|f| f.1 > 0).map(|&(a, b)| a as f64 / b as f64).collect();
        match miou(&cm) {
            Ok(rep) => {
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                if rep.mean != mean {
                    bad += 1;
                }
            }
            Err(_) => bad += (!present.is_empty()) as usize,
        }
    }
    bad
}
