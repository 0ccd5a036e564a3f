//! Which parameters each loss can reach, probed by finite differences.

use tssl_core::engine::{Param, ParamSet, Tape};
use tssl_core::loss::{loss_pl, loss_seg, loss_stage, LossOptions, LossWeights};
use tssl_core::net::AuxKind;
use tssl_core::trainer::{Generation, PseudoMaskStore};

use super::fixtures::{random_batch, store_for, tiny_net};
use super::{check, rng, Check};


/// Evaluates `loss` with one scalar of `p` shifted by `delta`, restoring it
/// afterwards.
fn shifted(p: &Param, index: usize, delta: f32, loss: &dyn Fn() -> f32) -> f32 {
    let orig = p.value();
    let mut moved = orig.clone();
    moved.data_mut()[index] += delta;
    p.set_value(moved).unwrap();
    let l = loss();
    p.set_value(orig).unwrap();
    l
}

/// Central differences at a few coordinates of every parameter in `set`;
/// returns the largest absolute difference `L(+h) - L(-h)` observed.
fn max_fd_change(set: &ParamSet, loss: &dyn Fn() -> f32, per_param: usize) -> (f32, usize) {
    let mut worst = 0.0f32;
    let mut probes = 0;
    for (_, p) in set.iter() {
        let n = p.numel();
        let m = per_param.min(n);
        for k in 0..m {
            let idx = k * n / m;
            let up = shifted(p, idx, 1e-2, loss);
            let down = shifted(p, idx, -1e-2, loss);
            worst = worst.max((up - down).abs());
            probes += 1;
        }
    }
    (worst, probes)
}

fn grads_all_zero(set: &ParamSet) -> bool {
    set.iter()
        .all(|(_, p)| p.grad().map_or(true, |g| g.data().iter().all(|&v| v == 0.0)))
}

fn subset(set: &ParamSet, prefix: &str, blocks: &[usize]) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, p) in set.iter() {
        if blocks.iter().any(|b| name.starts_with(&format!("{prefix}.block{b}."))) {
            out.push(name, p.clone()).unwrap();
        }
    }
    out
}

fn suite_for(kind: AuxKind, seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let net = tiny_net(kind, seed);
    let batch = random_batch(&mut r, 2, 2, 12);
    let generation = if kind == AuxKind::Stage2 { Generation::Stage1 } else { Generation::Stage2 };
    let store: PseudoMaskStore = store_for(&mut r, &batch, generation);
    let n = 5;
    let shared = kind.shared_blocks(n);
    let f_head = subset(&net.f_params(), "f", &((shared + 1)..=n).collect::<Vec<_>>());
    let f_shared = subset(&net.f_params(), "f", &(1..=shared).collect::<Vec<_>>());
    let aux_head = net.aux_own_params();
    let teacher = net.teacher_params();
    let stage = if kind == AuxKind::Stage2 { 2 } else { 3 };
    let tag = format!("{kind:?}").to_lowercase();
    let mut out = Vec::new();

    let pl = || {
        let mut t = Tape::new();
        let l = loss_pl(&net, &mut t, &batch.items, &batch.fill, &store).unwrap();
        t.value(l).item().unwrap()
    };
    let seg = || {
        let mut t = Tape::new();
        let l = loss_seg(&net, &mut t, batch.sub2()).unwrap();
        t.value(l).item().unwrap()
    };

    let (d, probes) = max_fd_change(&f_head, &pl, 20);
    out.push(check(
        &format!("{tag}: L_pl does not depend on f's own head"),
        d == 0.0 && probes >= 20,
        format!("{probes} probes, max |L(+h)-L(-h)| = {d:e}"),
    ));
    let (d, probes) = max_fd_change(&aux_head, &seg, 20);
    out.push(check(
        &format!("{tag}: L_seg does not depend on the aux head"),
        d == 0.0 && probes >= 20,
        format!("{probes} probes, max |L(+h)-L(-h)| = {d:e}"),
    ));
    let (d, probes) = max_fd_change(&f_shared, &pl, 6);
    out.push(check(
        &format!("{tag}: L_pl reaches the shared blocks"),
        d > 0.0,
        format!("{probes} probes, max |L(+h)-L(-h)| = {d:e}"),
    ));

    // Analytic side: backward through the full stage loss.
    let params = net.trainable_params();
    params.zero_grad();
    teacher.zero_grad();
    let mut t = Tape::new();
    let l = loss_stage(&net, &mut t, &batch, Some(&store), LossWeights::default(), stage, LossOptions::default()).unwrap();
    t.backward(l.total).unwrap();
    let teacher_untouched = teacher.iter().all(|(_, p)| p.grad().is_none());
    out.push(check(
        &format!("{tag}: stage loss leaves the teacher without gradient"),
        teacher_untouched,
        format!("{} teacher tensors checked", teacher.len()),
    ));

    params.zero_grad();
    let mut t = Tape::new();
    let l = loss_pl(&net, &mut t, &batch.items, &batch.fill, &store).unwrap();
    t.backward(l).unwrap();
    out.push(check(
        &format!("{tag}: backward of L_pl gives f's own head zero gradient"),
        grads_all_zero(&f_head),
        String::new(),
    ));
    params.zero_grad();
    let mut t = Tape::new();
    let l = loss_seg(&net, &mut t, batch.sub2()).unwrap();
    t.backward(l).unwrap();
    out.push(check(
        &format!("{tag}: backward of L_seg gives the aux head zero gradient"),
        grads_all_zero(&aux_head),
        String::new(),
    ));
    out
}

pub fn partition_suite(seed: u64) -> Vec<Check> {
    let mut out = suite_for(AuxKind::Stage2, seed);
    out.extend(suite_for(AuxKind::Stage3, seed + 1));
    out
}

