//! Independent f64 reference implementations used as test oracles.
//!
//! Nothing here calls into the engine's kernels; each reference is a direct
//! transcription of the textbook definition with nested loops.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tssl_core::engine::{Param, Tape, Tensor, Var};

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled by a
/// finite-difference step.
pub fn random_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (k, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for s in 0..n {
        for o in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c + ci) * h + y as usize) * w + xx as usize]
                                    * wt[((o * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((s * k + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

pub fn avg_pool_ref(x: &[f64], planes: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f64> {
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        acc += x[(p * h + oy * s + i) * w + ox * s + j];
                    }
                }
                out.push(acc / (k * k) as f64);
            }
        }
    }
    out
}

/// Bilinear resampling with half-pixel centres: output pixel `o` samples
/// the input at `max(0, (o + 1/2) * in/out - 1/2)`, reading the two nearest
/// source pixels (the upper one clamped to the last index).
pub fn upsample_ref(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let lo = src.floor() as usize;
        let lo = lo.min(inp - 1);
        ((lo), (lo + 1).min(inp - 1), src - lo as f64)
    };
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, w, ow);
                let at = |y: usize, xx: usize| x[(p * h + y) * w + xx];
                out.push(
                    (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                        + (1.0 - fy) * fx * at(y0, x1)
                        + fy * (1.0 - fx) * at(y1, x0)
                        + fy * fx * at(y1, x1),
                );
            }
        }
    }
    out
}

fn log_softmax_pixel(logits: &[f64], c: usize, plane: usize, s: usize, p: usize) -> Vec<f64> {
    let vals: Vec<f64> = (0..c).map(|k| logits[(s * c + k) * plane + p]).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    vals.iter().map(|v| v - lse).collect()
}

pub fn ce_hard_ref(logits: &[f64], n: usize, c: usize, plane: usize, target: &[u8], ignore: u8) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..n {
        for p in 0..plane {
            let t = target[s * plane + p];
            if t == ignore {
                continue;
            }
            total -= log_softmax_pixel(logits, c, plane, s, p)[t as usize];
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn ce_soft_ref(logits: &[f64], n: usize, c: usize, plane: usize, target: &[f64], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in 0..n {
        for p in 0..plane {
            if !mask[s * plane + p] {
                continue;
            }
            let ls = log_softmax_pixel(logits, c, plane, s, p);
            for k in 0..c {
                total -= target[(s * c + k) * plane + p] * ls[k];
            }
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Random per-pixel distributions over `c` classes, laid out `[n, c, plane]`.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize, c: usize, plane: usize) -> Tensor {
    let mut data = vec![0.0f32; n * c * plane];
    for s in 0..n {
        for p in 0..plane {
            let raw: Vec<f32> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            for k in 0..c {
                data[(s * c + k) * plane + p] = raw[k] / sum;
            }
        }
    }
    let h = plane;
    Tensor::new(vec![n, c, 1, h], data).unwrap()
}

/// Outcome of a finite-difference comparison.
#[derive(Debug)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Relative error with a small absolute floor so exactly-zero gradients are
/// compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Compares engine gradients against central finite differences of an f64
/// reference.
///
/// The scalar being differentiated is `sum(proj * op(inputs))` with a fixed
/// random projection `proj`. `engine` builds `op` on a tape from parameter
/// leaves; `reference` evaluates the same op in f64. `probes` coordinates are
/// drawn across all inputs.
pub fn grad_check(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    engine: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    probes: usize,
    h: f64,
) -> GradReport {
    let params: Vec<Param> = inputs.iter().map(|t| Param::new(t.clone())).collect();
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = engine(&mut tape, &leaves);
    let out_shape = tape.value(out).shape().to_vec();
    let proj = random_tensor(rng, &out_shape, -1.0, 1.0);
    let proj_v = tape.constant(proj.clone());
    let prod = tape.mul(out, proj_v).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| to_f64(&g))
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let proj64 = to_f64(&proj);
    let objective = |xs: &[Vec<f64>]| -> f64 {
        reference(xs)
            .iter()
            .zip(&proj64)
            .map(|(a, b)| a * b)
            .sum()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(to_f64).collect();
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..probes {
        let which = rng.gen_range(0..inputs.len());
        let idx = rng.gen_range(0..inputs[which].numel());
        let mut plus = base.clone();
        plus[which][idx] += h;
        let mut minus = base.clone();
        minus[which][idx] -= h;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        max_rel_err = max_rel_err.max(rel_err(grads[which][idx], numeric));
    }
    GradReport {
        probes,
        max_rel_err,
    }
}

/// Plain Adam in f64, written from the update equations.
pub struct AdamRef {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl AdamRef {
    pub fn new(n: usize, lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..w.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.b1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.b2.powi(self.t));
            w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
