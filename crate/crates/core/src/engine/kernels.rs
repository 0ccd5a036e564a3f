//! Forward and backward kernels over raw `[N, C, H, W]` buffers.
//!
//! Batch samples are processed in parallel; every reduction across samples
//! happens sequentially in sample order so results do not depend on the
//! thread count.

use rayon::prelude::*;

use super::error::{EngineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh % 2 == 0 || self.kw % 2 == 0 {
            return Err(EngineError::Invalid(format!(
                "conv kernel {}x{} must have odd extents",
                self.kh, self.kw
            )));
        }
        if self.stride == 0 {
            return Err(EngineError::Invalid("conv stride must be >= 1".into()));
        }
        if self.h + 2 * self.pad < self.kh || self.w + 2 * self.pad < self.kw {
            return Err(EngineError::Shape(format!(
                "conv kernel {}x{} larger than padded input {}x{}",
                self.kh,
                self.kw,
                self.h + 2 * self.pad,
                self.w + 2 * self.pad
            )));
        }
        Ok(())
    }
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &xc[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.w as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents cover every index touched by sgemm, and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation with zero padding; returns `[N, K, H', W']` data.
pub fn conv2d_forward(g: &ConvGeom, x: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let patch = g.patch();
    let mut out = vec![0.0f32; g.n * g.k * plane];
    let in_len = g.c * g.h * g.w;
    out.par_chunks_mut(g.k * plane)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * in_len..(n + 1) * in_len];
            for (k, row) in out_n.chunks_mut(plane).enumerate() {
                row.fill(bias[k]);
            }
            if g.is_pointwise() {
                gemm(g.k, patch, plane, weight, (patch, 1), x_n, (plane, 1), 1.0, out_n);
            } else {
                let mut col = vec![0.0f32; patch * plane];
                im2col(g, x_n, &mut col);
                gemm(g.k, patch, plane, weight, (patch, 1), &col, (plane, 1), 1.0, out_n);
            }
        });
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `dy`.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    need_dx: bool,
) -> ConvGrads {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let patch = g.patch();
    let in_len = g.c * g.h * g.w;
    let out_len = g.k * plane;

    let per_sample: Vec<(Vec<f32>, Vec<f32>, Option<Vec<f32>>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_len..(n + 1) * in_len];
            let dy_n = &dy[n * out_len..(n + 1) * out_len];
            let owned_col;
            let col: &[f32] = if g.is_pointwise() {
                x_n
            } else {
                let mut buf = vec![0.0f32; patch * plane];
                im2col(g, x_n, &mut buf);
                owned_col = buf;
                &owned_col
            };
            // dW_n = dY_n [K x P] * col^T [P x patch]
            let mut dw = vec![0.0f32; g.k * patch];
            gemm(g.k, plane, patch, dy_n, (plane, 1), col, (1, plane), 0.0, &mut dw);
            let db: Vec<f32> = dy_n.chunks(plane).map(|r| r.iter().sum()).collect();
            let dx = need_dx.then(|| {
                // dcol = W^T [patch x K] * dY_n [K x P]
                let mut dcol = vec![0.0f32; patch * plane];
                gemm(patch, g.k, plane, weight, (1, patch), dy_n, (plane, 1), 0.0, &mut dcol);
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut dx_n = vec![0.0f32; in_len];
                    col2im(g, &dcol, &mut dx_n);
                    dx_n
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![0.0f32; g.k * patch];
    let mut db = vec![0.0f32; g.k];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * in_len));
    for (dw_n, db_n, dx_n) in per_sample {
        dw.iter_mut().zip(&dw_n).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&db_n).for_each(|(a, b)| *a += b);
        if let (Some(dx), Some(dx_n)) = (dx.as_mut(), dx_n) {
            dx.extend_from_slice(&dx_n);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Average pooling without padding over each `[H, W]` plane.
pub fn avg_pool_forward(planes: usize, h: usize, w: usize, k: usize, s: usize, x: &[f32]) -> Vec<f32> {
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for i in 0..k {
                    let row = &src[(oy * s + i) * w + ox * s..];
                    acc += row[..k].iter().sum::<f32>();
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(planes: usize, h: usize, w: usize, k: usize, s: usize, dy: &[f32]) -> Vec<f32> {
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let inv = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * inv;
                for i in 0..k {
                    for j in 0..k {
                        dst[(oy * s + i) * w + ox * s + j] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for each output index along one axis, using
/// half-pixel centres (`src = (o + 0.5) * in / out - 0.5`, clamped at 0).
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let ratio = input as f32 / output as f32;
    (0..output)
        .map(|o| {
            let src = ((o as f32 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample_forward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[f32]) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0f32; planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, dst)| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    });
    out
}

pub fn upsample_backward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[f32]) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0f32; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    });
    dx
}

/// Numerically stable softmax over the channel axis of `[N, C, P]` data
/// (`P` = pixels per plane).
pub fn softmax_channels(n: usize, c: usize, plane: usize, logits: &[f32]) -> Vec<f32> {
    let mut probs = vec![0.0f32; logits.len()];
    probs
        .par_chunks_mut(c * plane)
        .zip(logits.par_chunks(c * plane))
        .for_each(|(pn, ln)| {
            for p in 0..plane {
                let mut max = f32::NEG_INFINITY;
                for k in 0..c {
                    max = max.max(ln[k * plane + p]);
                }
                let mut sum = 0.0f32;
                for k in 0..c {
                    let e = (ln[k * plane + p] - max).exp();
                    pn[k * plane + p] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for k in 0..c {
                    pn[k * plane + p] *= inv;
                }
            }
        });
    debug_assert_eq!(probs.len(), n * c * plane);
    probs
}

/// Log-softmax value of channel `k` at pixel `p` of sample-local logits.
fn log_softmax_at(ln: &[f32], c: usize, plane: usize, p: usize, k: usize) -> f32 {
    let mut max = f32::NEG_INFINITY;
    for j in 0..c {
        max = max.max(ln[j * plane + p]);
    }
    let mut sum = 0.0f32;
    for j in 0..c {
        sum += (ln[j * plane + p] - max).exp();
    }
    ln[k * plane + p] - max - sum.ln()
}

/// Hard-label cross entropy averaged over non-ignored pixels.
/// Returns `(loss, d loss / d logits)`.
pub fn ce_hard(
    n: usize,
    c: usize,
    plane: usize,
    logits: &[f32],
    target: &[u8],
    ignore: u8,
) -> Result<(f32, Vec<f32>)> {
    if let Some(&bad) = target
        .iter()
        .find(|&&t| t != ignore && t as usize >= c)
    {
        return Err(EngineError::ClassOutOfRange { id: bad, classes: c });
    }
    let count = target.iter().filter(|&&t| t != ignore).count();
    let mut grad = vec![0.0f32; logits.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let probs = softmax_channels(n, c, plane, logits);
    let inv = 1.0 / count as f32;
    let mut total = 0.0f64;
    for s in 0..n {
        let ln = &logits[s * c * plane..(s + 1) * c * plane];
        let pn = &probs[s * c * plane..(s + 1) * c * plane];
        let gn = &mut grad[s * c * plane..(s + 1) * c * plane];
        let tn = &target[s * plane..(s + 1) * plane];
        for p in 0..plane {
            let t = tn[p];
            if t == ignore {
                continue;
            }
            total -= log_softmax_at(ln, c, plane, p, t as usize) as f64;
            for k in 0..c {
                gn[k * plane + p] = pn[k * plane + p] * inv;
            }
            gn[t as usize * plane + p] -= inv;
        }
    }
    Ok(((total / count as f64) as f32, grad))
}

/// Soft-target cross entropy averaged over pixels where `mask` is set.
pub fn ce_soft(
    n: usize,
    c: usize,
    plane: usize,
    logits: &[f32],
    target: &[f32],
    mask: &[bool],
) -> (f32, Vec<f32>) {
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![0.0f32; logits.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let probs = softmax_channels(n, c, plane, logits);
    let inv = 1.0 / count as f32;
    let mut total = 0.0f64;
    for s in 0..n {
        let base = s * c * plane;
        let ln = &logits[base..base + c * plane];
        for p in 0..plane {
            if !mask[s * plane + p] {
                continue;
            }
            let mut max = f32::NEG_INFINITY;
            for k in 0..c {
                max = max.max(ln[k * plane + p]);
            }
            let lse = max
                + (0..c)
                    .map(|k| (ln[k * plane + p] - max).exp())
                    .sum::<f32>()
                    .ln();
            let mut tsum = 0.0f32;
            for k in 0..c {
                let q = target[base + k * plane + p];
                total -= (q * (ln[k * plane + p] - lse)) as f64;
                tsum += q;
            }
            for k in 0..c {
                let idx = base + k * plane + p;
                grad[idx] = (probs[idx] * tsum - target[idx]) * inv;
            }
        }
    }
    ((total / count as f64) as f32, grad)
}
