//! Dense row-major `f32` arrays and the integer / boolean per-pixel maps
//! that travel alongside them.

use super::error::{EngineError, Result};

/// Dense n-dimensional array of 32-bit floats in row-major order.
///
/// `Tensor` is a plain value: it does not know about the differentiation
/// graph. Graph membership is tracked by [`super::tape::Var`] handles and
/// gradients of trainable leaves live on [`super::param::Param`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(EngineError::Shape(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(EngineError::Shape(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents of a rank-4 `[N, C, H, W]` tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(EngineError::Shape(format!(
                "expected a rank-4 [N, C, H, W] tensor, got shape {other:?}"
            ))),
        }
    }

    /// Copies out sample `index` of a batched `[N, ...]` tensor as `[...]`.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| EngineError::Shape("sample() on a scalar".into()))?;
        if index >= n {
            return Err(EngineError::Shape(format!(
                "sample index {index} out of range for batch of {n}"
            )));
        }
        let per = self.data.len() / n;
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[index * per..(index + 1) * per].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| EngineError::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(EngineError::Shape(format!(
                    "stack: shape {:?} differs from {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Per-pixel integer label map of shape `[H, W]` (class ids, or the ignore
/// value). Batched targets are stored as consecutive maps.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IntMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl IntMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(EngineError::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }
}

/// Per-pixel validity map of shape `[H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BoolMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height * width != data.len() {
            return Err(EngineError::Shape(format!(
                "bool mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Pixelwise argmax over the channel axis of a `[C, H, W]` tensor. Ties go
/// to the lowest class index.
pub fn argmax_channels(scores: &Tensor) -> Result<IntMask> {
    let (c, h, w) = match scores.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(EngineError::Shape(format!(
                "argmax expects [C, H, W], got {other:?}"
            )))
        }
    };
    if c == 0 || c > 255 {
        return Err(EngineError::Shape(format!(
            "argmax over {c} channels is not representable as a class id"
        )));
    }
    let plane = h * w;
    let data = scores.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0usize;
            let mut best_v = data[p];
            for k in 1..c {
                let v = data[k * plane + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
        .collect();
    IntMask::new(h, w, labels)
}
