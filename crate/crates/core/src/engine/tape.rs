//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every forward op appends a node holding its output value plus whatever
//! it needs for the backward pass. [`Tape::backward`] consumes the tape,
//! walks it in reverse and accumulates gradients into the [`Param`]s that
//! were registered as leaves. Calling backward on several tapes without
//! zeroing grads in between accumulates.

use super::error::{EngineError, Result};
use super::kernels::{self, ConvGeom};
use super::param::Param;
use super::tensor::{BoolMask, IntMask, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(Param),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    Upsample(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    SliceBatch {
        x: Var,
        start: usize,
    },
    /// Loss node; `grad` is d loss / d logits for a unit upstream gradient.
    Loss {
        logits: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf whose gradient is accumulated into `param` by `backward`.
    pub fn param(&mut self, param: &Param) -> Var {
        self.push(param.value(), Op::Param(param.clone()), true)
    }

    /// Snapshot of `param` treated as a constant.
    pub fn frozen(&mut self, param: &Param) -> Var {
        self.constant(param.value())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (k, wc, kh, kw) = self.value(w).dims4()?;
        if wc != c {
            return Err(EngineError::Shape(format!(
                "conv2d: input has {c} channels but weight expects {wc}"
            )));
        }
        if self.value(b).shape() != [k] {
            return Err(EngineError::Shape(format!(
                "conv2d: bias shape {:?} should be [{k}]",
                self.value(b).shape()
            )));
        }
        if !self.value(x).is_finite() {
            return Err(EngineError::NonFinite("conv2d input"));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad,
        };
        geom.validate()?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, k, geom.out_h(), geom.out_w()], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(EngineError::Invalid(format!(
                "avg_pool2d window {k} stride {stride} does not fit {h}x{w}"
            )));
        }
        let out = kernels::avg_pool_forward(n * c, h, w, k, stride, self.value(x).data());
        let value = Tensor::new(vec![n, c, (h - k) / stride + 1, (w - k) / stride + 1], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::AvgPool { x, k, stride }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(EngineError::Invalid(format!(
                "bilinear_upsample {h}x{w} -> {out_h}x{out_w}"
            )));
        }
        let out = kernels::upsample_forward(n * c, h, w, out_h, out_w, self.value(x).data());
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Upsample(x), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(EngineError::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f32 = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Samples `start..start + len` of a batched tensor.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let n = *src
            .shape()
            .first()
            .ok_or_else(|| EngineError::Shape("slice_batch on a scalar".into()))?;
        if len == 0 || start + len > n {
            return Err(EngineError::Shape(format!(
                "slice_batch {start}..{} out of range for batch of {n}",
                start + len
            )));
        }
        let per = src.numel() / n;
        let mut shape = src.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, src.data()[start * per..(start + len) * per].to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SliceBatch { x, start }, rg))
    }

    /// Mean over non-ignored pixels of `-log softmax(logits)[target]`.
    ///
    /// `targets` holds one mask per batch sample. If every pixel is ignored
    /// the loss is 0 and no gradient flows.
    pub fn softmax_ce_hard(&mut self, logits: Var, targets: &[IntMask], ignore_index: u8) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        check_targets(n, h, w, targets.iter().map(|m| (m.height(), m.width())))?;
        let flat: Vec<u8> = targets.iter().flat_map(|m| m.data().iter().copied()).collect();
        let (loss, grad) =
            kernels::ce_hard(n, c, h * w, self.value(logits).data(), &flat, ignore_index)?;
        let grad = Tensor::new(vec![n, c, h, w], grad)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Loss { logits, grad }, rg))
    }

    /// Mean over masked-in pixels of `-sum_c q_c log softmax(logits)_c`.
    ///
    /// `target` is a detached `[N, C, H, W]` distribution; every pixel must be
    /// nonnegative and sum to 1 within 1e-4.
    pub fn softmax_ce_soft(&mut self, logits: Var, target: &Tensor, pixel_mask: &[BoolMask]) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        if target.shape() != self.value(logits).shape() {
            return Err(EngineError::Shape(format!(
                "softmax_ce_soft: target shape {:?} vs logits {:?}",
                target.shape(),
                self.value(logits).shape()
            )));
        }
        check_targets(n, h, w, pixel_mask.iter().map(|m| (m.height(), m.width())))?;
        let plane = h * w;
        let t = target.data();
        for s in 0..n {
            for p in 0..plane {
                let mut sum = 0.0f32;
                for k in 0..c {
                    let q = t[(s * c + k) * plane + p];
                    if !(q >= 0.0) {
                        return Err(EngineError::Invalid(format!(
                            "soft target has negative or NaN probability {q}"
                        )));
                    }
                    sum += q;
                }
                if (sum - 1.0).abs() > 1e-4 {
                    return Err(EngineError::Invalid(format!(
                        "soft target at sample {s} pixel {p} sums to {sum}"
                    )));
                }
            }
        }
        let flat: Vec<bool> = pixel_mask.iter().flat_map(|m| m.data().iter().copied()).collect();
        let (loss, grad) = kernels::ce_soft(n, c, plane, self.value(logits).data(), t, &flat);
        let grad = Tensor::new(vec![n, c, h, w], grad)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Loss { logits, grad }, rg))
    }

    /// Back-propagates from the scalar `loss`, accumulating into every
    /// reachable [`Param`] leaf. The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(EngineError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => p.accumulate_grad(&g)?,
                Op::Conv { x, w, b, geom } => {
                    let need_dx = self.requires_grad(*x);
                    let cg = kernels::conv2d_backward(
                        geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        need_dx,
                    );
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                    }
                    if self.requires_grad(*w) {
                        accumulate(&mut grads, *w, self.value(*w).shape(), cg.dw);
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, self.value(*b).shape(), cg.db);
                    }
                }
                Op::Relu(x) => {
                    let dx = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
                Op::AvgPool { x, k, stride } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let dx = kernels::avg_pool_backward(n * c, h, w, *k, *stride, g.data());
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
                Op::Upsample(x) => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let (_, _, oh, ow) = node.value.dims4()?;
                    let dx = kernels::upsample_backward(n * c, h, w, oh, ow, g.data());
                    accumulate(&mut grads, *x, self.value(*x).shape(), dx);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            accumulate(&mut grads, v, g.shape(), g.data().to_vec());
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if self.requires_grad(v) {
                            let d = g
                                .data()
                                .iter()
                                .zip(self.value(other).data())
                                .map(|(g, o)| g * o)
                                .collect();
                            accumulate(&mut grads, v, g.shape(), d);
                        }
                    }
                }
                Op::Scale(x, f) => {
                    let d = g.data().iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *x, g.shape(), d);
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    let shape = self.value(*x).shape();
                    accumulate(&mut grads, *x, shape, vec![s; shape.iter().product()]);
                }
                Op::SliceBatch { x, start } => {
                    let full = self.value(*x);
                    let per = full.numel() / full.shape()[0];
                    let mut d = vec![0.0f32; full.numel()];
                    d[start * per..start * per + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, full.shape(), d);
                }
                Op::Loss { logits, grad } => {
                    let s = g.data()[0];
                    let d = grad.data().iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *logits, grad.shape(), d);
                }
            }
        }
        Ok(())
    }
}

fn check_targets(
    n: usize,
    h: usize,
    w: usize,
    dims: impl ExactSizeIterator<Item = (usize, usize)>,
) -> Result<()> {
    if dims.len() != n {
        return Err(EngineError::Shape(format!(
            "{} target maps for a batch of {n}",
            dims.len()
        )));
    }
    for (th, tw) in dims {
        if (th, tw) != (h, w) {
            return Err(EngineError::Shape(format!(
                "target map {th}x{tw} does not match logits {h}x{w}"
            )));
        }
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(&delta)
            .for_each(|(a, d)| *a += d),
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape matches value"))
        }
    }
}
