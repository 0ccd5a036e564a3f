//! Gradient and forward-oracle suites over every differentiable engine op.

use rand::Rng;

use tssl_core::engine::{BoolMask, IntMask, Tape, Tensor};

use super::oracles::*;
use super::rng;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const PROBES: usize = 24;
pub const ORACLE_TOL: f64 = 1e-5;

/// One finite-difference report per op.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    // conv2d: stride 1 / pad 1 and stride 2 / pad 1, gradients to x, w, b.
    for (name, stride) in [("conv2d(stride=1)", 1usize), ("conv2d(stride=2)", 2)] {
        let x = random_tensor(&mut r, &[2, 3, 6, 5], -1.0, 1.0);
        let w = random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut r, &[4], -0.5, 0.5);
        let rep = grad_check(
            &mut r,
            &[x, w, b],
            |t, v| t.conv2d(v[0], v[1], v[2], stride, 1).unwrap(),
            |xs| conv2d_ref(&xs[0], (2, 3, 6, 5), &xs[1], (4, 3, 3), &xs[2], stride, 1).0,
            PROBES,
            FD_STEP,
        );
        out.push((name, rep));
    }
    {
        let x = random_tensor(&mut r, &[2, 5, 4, 4], -1.0, 1.0);
        let w = random_tensor(&mut r, &[3, 5, 1, 1], -0.5, 0.5);
        let b = random_tensor(&mut r, &[3], -0.5, 0.5);
        let rep = grad_check(
            &mut r,
            &[x, w, b],
            |t, v| t.conv2d(v[0], v[1], v[2], 1, 0).unwrap(),
            |xs| conv2d_ref(&xs[0], (2, 5, 4, 4), &xs[1], (3, 1, 1), &xs[2], 1, 0).0,
            PROBES,
            FD_STEP,
        );
        out.push(("conv2d(1x1)", rep));
    }
    {
        let x = random_tensor_off_zero(&mut r, &[2, 3, 4, 4], 0.05);
        let rep = grad_check(
            &mut r,
            &[x],
            |t, v| t.relu(v[0]),
            |xs| xs[0].iter().map(|v| v.max(0.0)).collect(),
            PROBES,
            FD_STEP,
        );
        out.push(("relu", rep));
    }
    {
        let x = random_tensor(&mut r, &[2, 2, 6, 6], -1.0, 1.0);
        let rep = grad_check(
            &mut r,
            &[x],
            |t, v| t.avg_pool2d(v[0], 2, 2).unwrap(),
            |xs| avg_pool_ref(&xs[0], 4, 6, 6, 2, 2),
            PROBES,
            FD_STEP,
        );
        out.push(("avg_pool2d", rep));
    }
    {
        let x = random_tensor(&mut r, &[1, 2, 3, 4], -1.0, 1.0);
        let rep = grad_check(
            &mut r,
            &[x],
            |t, v| t.bilinear_upsample(v[0], 7, 9).unwrap(),
            |xs| upsample_ref(&xs[0], 2, 3, 4, 7, 9),
            PROBES,
            FD_STEP,
        );
        out.push(("bilinear_upsample", rep));
    }
    {
        let (n, c, h, w) = (2usize, 4usize, 3usize, 3usize);
        let logits = random_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
        let targets: Vec<IntMask> = (0..n)
            .map(|_| {
                let data = (0..h * w)
                    .map(|_| if r.gen_bool(0.2) { 255 } else { r.gen_range(0..c as u8) })
                    .collect();
                IntMask::new(h, w, data).unwrap()
            })
            .collect();
        let flat: Vec<u8> = targets.iter().flat_map(|m| m.data().to_vec()).collect();
        let rep = grad_check(
            &mut r,
            &[logits],
            |t, v| t.softmax_ce_hard(v[0], &targets, 255).unwrap(),
            |xs| vec![ce_hard_ref(&xs[0], n, c, h * w, &flat, 255)],
            PROBES,
            FD_STEP,
        );
        out.push(("softmax_ce_hard", rep));
    }
    {
        let (n, c, plane) = (2usize, 3usize, 6usize);
        let logits = random_tensor(&mut r, &[n, c, 1, plane], -2.0, 2.0);
        let target = random_distribution(&mut r, n, c, plane);
        let masks: Vec<BoolMask> = (0..n)
            .map(|_| BoolMask::new(1, plane, (0..plane).map(|_| r.gen_bool(0.7)).collect()).unwrap())
            .collect();
        let flat: Vec<bool> = masks.iter().flat_map(|m| m.data().to_vec()).collect();
        let t64 = to_f64(&target);
        let rep = grad_check(
            &mut r,
            &[logits],
            |t, v| t.softmax_ce_soft(v[0], &target, &masks).unwrap(),
            |xs| vec![ce_soft_ref(&xs[0], n, c, plane, &t64, &flat)],
            PROBES,
            FD_STEP,
        );
        out.push(("softmax_ce_soft", rep));
    }
    {
        let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let b = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let rep = grad_check(
            &mut r,
            &[a, b],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let m = t.mul(s, v[1]).unwrap();
                t.scale(m, -1.5)
            },
            |xs| {
                xs[0]
                    .iter()
                    .zip(&xs[1])
                    .map(|(a, b)| -1.5 * (a + b) * b)
                    .collect()
            },
            PROBES,
            FD_STEP,
        );
        out.push(("add/mul/scale", rep));
    }
    {
        let x = random_tensor(&mut r, &[4, 2, 3], -1.0, 1.0);
        let rep = grad_check(
            &mut r,
            &[x],
            |t, v| {
                let s = t.slice_batch(v[0], 1, 2).unwrap();
                let m = t.mul(s, s).unwrap();
                t.sum(m)
            },
            |xs| vec![xs[0][6..18].iter().map(|v| v * v).sum()],
            PROBES,
            FD_STEP,
        );
        out.push(("slice_batch/sum", rep));
    }
    {
        // Composite: conv -> relu -> conv -> upsample -> hard CE, the shape of
        // one network block stack.
        let x = random_tensor(&mut r, &[2, 2, 6, 6], -1.0, 1.0);
        let w1 = random_tensor(&mut r, &[3, 2, 3, 3], -0.6, 0.6);
        let b1 = random_tensor(&mut r, &[3], 0.05, 0.3);
        let w2 = random_tensor(&mut r, &[4, 3, 1, 1], -0.6, 0.6);
        let b2 = random_tensor(&mut r, &[4], -0.3, 0.3);
        let targets: Vec<IntMask> = (0..2)
            .map(|_| IntMask::new(6, 6, (0..36).map(|_| r.gen_range(0..4u8)).collect()).unwrap())
            .collect();
        let flat: Vec<u8> = targets.iter().flat_map(|m| m.data().to_vec()).collect();
        let rep = grad_check(
            &mut r,
            &[x, w1, b1, w2, b2],
            |t, v| {
                let h = t.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
                let h = t.relu(h);
                let o = t.conv2d(h, v[3], v[4], 1, 0).unwrap();
                let up = t.bilinear_upsample(o, 6, 6).unwrap();
                t.softmax_ce_hard(up, &targets, 255).unwrap()
            },
            |xs| {
                let (h, oh, ow) = conv2d_ref(&xs[0], (2, 2, 6, 6), &xs[1], (3, 3, 3), &xs[2], 2, 1);
                let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
                let (o, _, _) = conv2d_ref(&h, (2, 3, oh, ow), &xs[3], (4, 1, 1), &xs[4], 1, 0);
                let up = upsample_ref(&o, 8, oh, ow, 6, 6);
                vec![ce_hard_ref(&up, 2, 4, 36, &flat, 255)]
            },
            PROBES,
            FD_STEP,
        );
        out.push(("composite block stack", rep));
    }
    out
}

/// Largest absolute deviation between engine forward values and the f64
/// references, per op, over `trials` random instances.
pub fn forward_oracle_suite(seed: u64, trials: usize) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 5];
    for _ in 0..trials {
        // conv2d, including the 1x2x5x5 case
        let stride = r.gen_range(1..3);
        let x = random_tensor(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
        let w = random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[3], -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, stride, 1).unwrap();
        let (reference, _, _) =
            conv2d_ref(&to_f64(&x), (1, 2, 5, 5), &to_f64(&w), (3, 3, 3), &to_f64(&b), stride, 1);
        worst[0] = worst[0].max(max_dev(t.value(y), &reference));

        let x = random_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
        let xv = t.constant(x.clone());
        let y = t.avg_pool2d(xv, 3, 3).unwrap();
        worst[1] = worst[1].max(max_dev(t.value(y), &avg_pool_ref(&to_f64(&x), 6, 6, 6, 3, 3)));

        let x = random_tensor(&mut r, &[1, 2, 2, 2], -1.0, 1.0);
        let xv = t.constant(x.clone());
        let y = t.bilinear_upsample(xv, 4, 4).unwrap();
        worst[2] = worst[2].max(max_dev(t.value(y), &upsample_ref(&to_f64(&x), 2, 2, 2, 4, 4)));

        let (n, c, h, wd) = (2usize, 4usize, 4usize, 4usize);
        let logits = random_tensor(&mut r, &[n, c, h, wd], -3.0, 3.0);
        let targets: Vec<IntMask> = (0..n)
            .map(|_| {
                let d = (0..h * wd)
                    .map(|_| if r.gen_bool(0.1) { 255 } else { r.gen_range(0..c as u8) })
                    .collect();
                IntMask::new(h, wd, d).unwrap()
            })
            .collect();
        let flat: Vec<u8> = targets.iter().flat_map(|m| m.data().to_vec()).collect();
        let lv = t.constant(logits.clone());
        let l = t.softmax_ce_hard(lv, &targets, 255).unwrap();
        let reference = ce_hard_ref(&to_f64(&logits), n, c, h * wd, &flat, 255);
        worst[3] = worst[3].max((t.value(l).item().unwrap() as f64 - reference).abs());

        let target = random_distribution(&mut r, n, c, h * wd);
        let target = target.reshape(vec![n, c, h, wd]).unwrap();
        let masks: Vec<BoolMask> = (0..n)
            .map(|_| BoolMask::new(h, wd, (0..h * wd).map(|_| r.gen_bool(0.8)).collect()).unwrap())
            .collect();
        let flat: Vec<bool> = masks.iter().flat_map(|m| m.data().to_vec()).collect();
        let l = t.softmax_ce_soft(lv, &target, &masks).unwrap();
        let reference = ce_soft_ref(&to_f64(&logits), n, c, h * wd, &to_f64(&target), &flat);
        worst[4] = worst[4].max((t.value(l).item().unwrap() as f64 - reference).abs());
    }
    vec![
        ("conv2d", worst[0]),
        ("avg_pool2d", worst[1]),
        ("bilinear_upsample", worst[2]),
        ("softmax_ce_hard", worst[3]),
        ("softmax_ce_soft", worst[4]),
    ]
}

fn max_dev(t: &Tensor, reference: &[f64]) -> f64 {
    assert_eq!(t.numel(), reference.len());
    t.data()
        .iter()
        .zip(reference)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max)
}
