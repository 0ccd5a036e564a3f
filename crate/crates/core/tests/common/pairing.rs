//! Image, mask and dense-map transports checked against one coordinate
//! remapping oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracles::{random_distribution, random_tensor};
use super::{check, rng, Check};
use tssl_core::augment::{apply_dense, apply_image, apply_mask, sample_spec, AugmentSpec, PolicyConfig};
use tssl_core::engine::{argmax_channels, IntMask, Tensor};

pub const GRID: usize = 8;

/// Source pixel of output `(r, c)` under an integer shift and optional
/// mirror, or `None` when it falls outside the input.
pub fn remap(r: usize, c: usize, dx: i32, dy: i32, flip: bool, h: usize, w: usize) -> Option<(usize, usize)> {
    let sr = r as i64 - dy as i64;
    let mut sc = c as i64 - dx as i64;
    if flip {
        sc = w as i64 - 1 - sc;
    }
    ((0..h as i64).contains(&sr) && (0..w as i64).contains(&sc)).then(|| (sr as usize, sc as usize))
}

pub fn rigid(dx: i32, dy: i32, flip: bool) -> AugmentSpec {
    let mut s = AugmentSpec::identity();
    s.dx = dx;
    s.dy = dy;
    s.flip = flip;
    s.identity = dx == 0 && dy == 0 && !flip;
    s
}

fn random_labels(r: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> IntMask {
    IntMask::new(h, w, (0..h * w).map(|_| r.gen_range(0..classes)).collect()).unwrap()
}

/// Every integer shift in `[-GRID, GRID]^2`, with and without mirroring.
fn all_rigid_specs() -> Vec<(i32, i32, bool)> {
    let g = GRID as i32;
    let mut out = Vec::new();
    for dy in -g..=g {
        for dx in -g..=g {
            for flip in [false, true] {
                out.push((dx, dy, flip));
            }
        }
    }
    out
}

pub fn pairing_suite(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let (h, w, classes) = (GRID, GRID, 4usize);
    let fill = [0.5f32, 0.25, 0.75];
    let mut out = Vec::new();

    let mut mismatches = [0usize; 4];
    let specs = all_rigid_specs();
    for &(dx, dy, flip) in &specs {
        let spec = rigid(dx, dy, flip);
        let img = random_tensor(&mut r, &[3, h, w], 0.0, 1.0);
        let mask = random_labels(&mut r, h, w, classes as u8);
        let probs = random_distribution(&mut r, 1, classes, h * w).reshape(vec![classes, h, w]).unwrap();

        let ai = apply_image(&spec, &img, &fill);
        let am = apply_mask(&spec, &mask, 255);
        let (ad, valid) = apply_dense(&spec, &probs);
        let arg_of_dense = argmax_channels(&ad).unwrap();
        let mask_of_arg = apply_mask(&spec, &argmax_channels(&probs).unwrap(), 255);
        for row in 0..h {
            for col in 0..w {
                let src = remap(row, col, dx, dy, flip, h, w);
                let px = row * w + col;
                for k in 0..3 {
                    let expected = match src {
                        Some((sr, sc)) => img.data()[(k * h + sr) * w + sc],
                        None => fill[k],
                    };
                    if ai.data()[k * h * w + px] != expected {
                        mismatches[0] += 1;
                    }
                }
                let expected_mask = src.map_or(255, |(sr, sc)| mask.get(sr, sc));
                if am.get(row, col) != expected_mask {
                    mismatches[1] += 1;
                }
                if valid.data()[px] != src.is_some() {
                    mismatches[2] += 1;
                }
                if src.is_some() && arg_of_dense.get(row, col) != mask_of_arg.get(row, col) {
                    mismatches[3] += 1;
                }
                if src.is_none() && mask_of_arg.get(row, col) != 255 {
                    mismatches[3] += 1;
                }
            }
        }
    }
    let n = specs.len();
    out.push(check("image transport matches the remap oracle", mismatches[0] == 0, format!("{n} specs, {} mismatches", mismatches[0])));
    out.push(check("mask transport matches the remap oracle", mismatches[1] == 0, format!("{n} specs, {} mismatches", mismatches[1])));
    out.push(check("dense validity matches the remap oracle", mismatches[2] == 0, format!("{n} specs, {} mismatches", mismatches[2])));
    out.push(check("argmax commutes with transport", mismatches[3] == 0, format!("{n} specs, {} mismatches", mismatches[3])));

    // Flip involution on all three kinds of input.
    let mut bad = 0;
    let flip = rigid(0, 0, true);
    for _ in 0..64 {
        let img = random_tensor(&mut r, &[3, h, w], 0.0, 1.0);
        let mask = random_labels(&mut r, h, w, 4);
        let probs = random_distribution(&mut r, 1, 4, h * w).reshape(vec![4, h, w]).unwrap();
        bad += (apply_image(&flip, &apply_image(&flip, &img, &fill), &fill) != img) as usize;
        bad += (apply_mask(&flip, &apply_mask(&flip, &mask, 255), 255) != mask) as usize;
        let once = apply_dense(&flip, &probs).0;
        let twice = apply_dense(&flip, &once).0;
        bad += (twice.max_abs_diff(&probs) > 1e-6) as usize;
    }
    out.push(check("flip is an involution", bad == 0, format!("64 trials x 3 inputs, {bad} failures")));

    // Random full specs: ignore pixels of B coincide with invalid pixels of
    // the dense transport.
    let policy = PolicyConfig::default();
    let mut bad = 0;
    for s in 0..500u64 {
        let spec = sample_spec(seed.wrapping_mul(1000) + s, &policy);
        let marked = apply_mask(&spec, &IntMask::filled(h, w, 0), 255);
        let (_, valid) = apply_dense(&spec, &Tensor::full(&[2, h, w], 0.5));
        bad += marked
            .data()
            .iter()
            .zip(valid.data())
            .filter(|(&m, &v)| (m == 255) == v)
            .count();
    }
    out.push(check("ignore pixels of masks equal invalid pixels of dense maps", bad == 0, format!("500 random specs, {bad} disagreeing pixels")));
    out
}
