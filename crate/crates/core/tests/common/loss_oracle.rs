//! Loss terms recomposed from detached network outputs and scalar-loop
//! cross-entropies.

use super::fixtures::{random_batch, store_for, tiny_net};
use super::oracles::{ce_hard_ref, ce_soft_ref, to_f64};
use super::rng;
use tssl_core::augment::{apply_dense, apply_image, apply_mask};
use tssl_core::engine::{Tape, Tensor};
use tssl_core::loss::{loss_con, loss_pl, loss_seg, BatchItem, ConsistencyTarget, IGNORE_INDEX};
use tssl_core::net::{AuxKind, MultiTaskNet};
use tssl_core::trainer::{Generation, PseudoMaskStore};

fn aux_logits(net: &MultiTaskNet, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let a = net.forward_aux(&mut t, xv).unwrap();
    t.value(a).clone()
}

fn augmented(items: &[BatchItem], fill: &[f32]) -> Tensor {
    let v: Vec<Tensor> = items.iter().map(|it| apply_image(&it.spec, &it.image, fill)).collect();
    Tensor::stack(&v).unwrap()
}

pub fn seg_ref(net: &MultiTaskNet, items: &[BatchItem]) -> f64 {
    let x = Tensor::stack(&items.iter().map(|i| i.image.clone()).collect::<Vec<_>>()).unwrap();
    let logits = net.predict_f(&x).unwrap();
    let (n, c, h, w) = logits.dims4().unwrap();
    let target: Vec<u8> = items.iter().flat_map(|i| i.mask.as_ref().unwrap().data().to_vec()).collect();
    ce_hard_ref(&to_f64(&logits), n, c, h * w, &target, IGNORE_INDEX)
}

pub fn con_ref(net: &MultiTaskNet, items: &[BatchItem], fill: &[f32]) -> f64 {
    let clean = Tensor::stack(&items.iter().map(|i| i.image.clone()).collect::<Vec<_>>()).unwrap();
    let probs = net.forward_teacher(&clean).unwrap();
    let logits = net.predict_f(&augmented(items, fill)).unwrap();
    let (_, c, h, w) = logits.dims4().unwrap();
    let mut total = 0.0;
    for (i, it) in items.iter().enumerate() {
        let (q, valid) = apply_dense(&it.spec, &probs.sample(i).unwrap());
        total += ce_soft_ref(&to_f64(&logits.sample(i).unwrap()), 1, c, h * w, &to_f64(&q), valid.data());
    }
    total / items.len() as f64
}

pub fn pl_ref(net: &MultiTaskNet, items: &[BatchItem], fill: &[f32], store: &PseudoMaskStore) -> f64 {
    let logits = aux_logits(net, &augmented(items, fill));
    let (_, c, h, w) = logits.dims4().unwrap();
    let mut total = 0.0;
    for (i, it) in items.iter().enumerate() {
        let target = apply_mask(&it.spec, store.get(&it.id).unwrap(), IGNORE_INDEX);
        total += ce_hard_ref(&to_f64(&logits.sample(i).unwrap()), 1, c, h * w, target.data(), IGNORE_INDEX);
    }
    total / items.len() as f64
}

/// Largest deviation of the three loss terms from their recomposed values
/// over `trials` random nets and batches.
pub fn loss_oracle_suite(seed: u64, trials: usize) -> [(&'static str, f64); 3] {
    let mut worst = [0.0f64; 3];
    for t in 0..trials as u64 {
        let mut r = rng(seed * 1000 + t);
        let kind = if t % 2 == 0 { AuxKind::Stage2 } else { AuxKind::Stage3 };
        let net = tiny_net(kind, seed + t);
        // Make the teacher differ from the student.
        net.update_teacher(1.0).unwrap();
        for (_, p) in net.f_params().iter() {
            let v = p.value();
            let moved: Vec<f32> = v.data().iter().map(|x| x * 0.9 + 0.01).collect();
            p.set_value(Tensor::new(v.shape().to_vec(), moved).unwrap()).unwrap();
        }
        let batch = random_batch(&mut r, 3, 2, 12);
        let store = store_for(&mut r, &batch, Generation::Stage1);
        let value = |f: &dyn Fn(&mut Tape) -> tssl_core::engine::Var| {
            let mut tape = Tape::new();
            let v = f(&mut tape);
            tape.value(v).item().unwrap() as f64
        };
        let seg = value(&|tp| loss_seg(&net, tp, batch.sub2()).unwrap());
        let con = value(&|tp| loss_con(&net, tp, &batch.items, &batch.fill, ConsistencyTarget::Soft).unwrap());
        let pl = value(&|tp| loss_pl(&net, tp, &batch.items, &batch.fill, &store).unwrap());
        worst[0] = worst[0].max((seg - seg_ref(&net, batch.sub2())).abs());
        worst[1] = worst[1].max((con - con_ref(&net, &batch.items, &batch.fill)).abs());
        worst[2] = worst[2].max((pl - pl_ref(&net, &batch.items, &batch.fill, &store)).abs());
    }
    [("L_seg", worst[0]), ("L_con", worst[1]), ("L_pl", worst[2])]
}
