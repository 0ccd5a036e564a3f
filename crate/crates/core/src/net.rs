//! Block-structured segmentation network with an auxiliary branch and an
//! EMA teacher copy.
//!
//! The segmentation branch `f` is a stack of `N` blocks; the last block is
//! the classifier, followed by a bilinear upsample back to input
//! resolution. The auxiliary branch reuses the *same parameter handles* for
//! its leading blocks and owns only its tail:
//!
//! * [`AuxKind::Stage2`]: shares blocks `1..=N-2`, owns `N-1` and `N`
//!   (block `N-1` optionally at half width).
//! * [`AuxKind::Stage3`]: shares blocks `1..=N-1`, owns block `N`.
//!
//! The teacher is an independent copy of `f`'s parameters that only
//! [`MultiTaskNet::update_teacher`] writes to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    self, argmax_channels, ema_update, EngineError, IntMask, Param, ParamSet, Tape, Tensor, Var,
};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("architecture needs at least 3 blocks, got {0}")]
    TooFewBlocks(usize),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("network has no auxiliary branch")]
    NoAuxBranch,
    #[error("checkpoint is missing `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    /// Reduces spatial resolution (some conv has stride > 1).
    Downsample,
    /// Resolution-preserving feature block.
    Trunk,
    /// Final block: its convs are followed by a 1x1 classifier to
    /// `num_classes` channels and a bilinear upsample to input resolution.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub index: usize,
    pub role: BlockRole,
    #[serde(default)]
    pub convs: Vec<ConvSpec>,
}

fn conv(out_channels: usize, kernel: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        out_channels,
        kernel,
        stride,
    }
}

/// Six-block desk architecture (widths 8/16/16/32/32): two stride-2 convs,
/// three trunk convs and a 1x1 classifier head.
pub fn desk_arch() -> Vec<BlockSpec> {
    vec![
        BlockSpec { index: 1, role: BlockRole::Downsample, convs: vec![conv(8, 3, 2)] },
        BlockSpec { index: 2, role: BlockRole::Downsample, convs: vec![conv(16, 3, 2)] },
        BlockSpec { index: 3, role: BlockRole::Trunk, convs: vec![conv(16, 3, 1)] },
        BlockSpec { index: 4, role: BlockRole::Trunk, convs: vec![conv(32, 3, 1)] },
        BlockSpec { index: 5, role: BlockRole::Trunk, convs: vec![conv(32, 3, 1)] },
        BlockSpec { index: 6, role: BlockRole::Classifier, convs: vec![] },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    None,
    Stage2,
    Stage3,
}

impl AuxKind {
    /// Number of leading blocks shared with `f`.
    pub fn shared_blocks(self, n_blocks: usize) -> usize {
        match self {
            AuxKind::None => n_blocks,
            AuxKind::Stage2 => n_blocks - 2,
            AuxKind::Stage3 => n_blocks - 1,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: Param,
    bias: Param,
    stride: usize,
    pad: usize,
    relu: bool,
}

#[derive(Clone, Debug)]
struct Block {
    layers: Vec<ConvLayer>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Leaves {
    Trainable,
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub arch: Vec<BlockSpec>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub aux_kind: AuxKind,
    /// Halve the width of the auxiliary branch's own block `N-1`
    /// (stage-2 branch only).
    pub aux_half_width: bool,
}

#[derive(Clone, Debug)]
pub struct MultiTaskNet {
    config: NetConfig,
    f_blocks: Vec<Block>,
    /// Auxiliary branch's own tail blocks (empty for `AuxKind::None`).
    aux_tail: Vec<Block>,
    teacher: Vec<Block>,
}

fn validate_arch(cfg: &NetConfig) -> Result<()> {
    let n = cfg.arch.len();
    if n < 3 {
        return Err(NetError::TooFewBlocks(n));
    }
    for (i, b) in cfg.arch.iter().enumerate() {
        if b.index != i + 1 {
            return Err(NetError::Arch(format!(
                "block at position {} has index {}",
                i + 1,
                b.index
            )));
        }
        let is_last = i + 1 == n;
        if is_last != (b.role == BlockRole::Classifier) {
            return Err(NetError::Arch(
                "exactly the last block must have role `classifier`".into(),
            ));
        }
        if !is_last && b.convs.is_empty() {
            return Err(NetError::Arch(format!("block {} has no convs", b.index)));
        }
        for c in &b.convs {
            if c.kernel % 2 == 0 || c.stride == 0 || c.out_channels == 0 {
                return Err(NetError::Arch(format!(
                    "block {}: conv {c:?} needs odd kernel, stride >= 1, channels >= 1",
                    b.index
                )));
            }
        }
    }
    if cfg.num_classes < 2 || cfg.num_classes > 255 {
        return Err(NetError::Arch(format!(
            "num_classes {} outside 2..=255",
            cfg.num_classes
        )));
    }
    if cfg.in_channels == 0 {
        return Err(NetError::Arch("in_channels must be >= 1".into()));
    }
    Ok(())
}

/// He-style fan-in initialisation (uniform with variance 2/fan_in), zero
/// bias.
fn init_block(rng: &mut ChaCha8Rng, spec: &BlockSpec, in_ch: usize, num_classes: usize, width_div: usize) -> (Block, usize) {
    let mut layers = Vec::new();
    let mut c_in = in_ch;
    let mut convs: Vec<(ConvSpec, bool)> = spec
        .convs
        .iter()
        .map(|c| {
            let mut c = *c;
            c.out_channels = (c.out_channels / width_div).max(1);
            (c, true)
        })
        .collect();
    if spec.role == BlockRole::Classifier {
        convs.push((conv(num_classes, 1, 1), false));
    }
    for (c, relu) in convs {
        let fan_in = c_in * c.kernel * c.kernel;
        let bound = (6.0 / fan_in as f32).sqrt();
        let n = c.out_channels * fan_in;
        let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push(ConvLayer {
            weight: Param::new(
                Tensor::new(vec![c.out_channels, c_in, c.kernel, c.kernel], w).expect("shape"),
            ),
            bias: Param::new(Tensor::zeros(&[c.out_channels])),
            stride: c.stride,
            pad: c.kernel / 2,
            relu,
        });
        c_in = c.out_channels;
    }
    (Block { layers }, c_in)
}

fn deep_clone_blocks(blocks: &[Block]) -> Vec<Block> {
    blocks
        .iter()
        .map(|b| Block {
            layers: b
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.deep_clone(),
                    bias: l.bias.deep_clone(),
                    ..l.clone()
                })
                .collect(),
        })
        .collect()
}

fn named_params(prefix: &str, first_index: usize, blocks: &[Block]) -> ParamSet {
    let mut set = ParamSet::new();
    for (bi, b) in blocks.iter().enumerate() {
        for (li, l) in b.layers.iter().enumerate() {
            let base = format!("{prefix}.block{}.conv{li}", first_index + bi);
            set.push(format!("{base}.weight"), l.weight.clone()).expect("unique");
            set.push(format!("{base}.bias"), l.bias.clone()).expect("unique");
        }
    }
    set
}

fn run_blocks(tape: &mut Tape, blocks: &[Block], mut x: Var, leaves: Leaves) -> Result<Var> {
    for b in blocks {
        for l in &b.layers {
            let (w, bias) = match leaves {
                Leaves::Trainable => (tape.param(&l.weight), tape.param(&l.bias)),
                Leaves::Frozen => (tape.frozen(&l.weight), tape.frozen(&l.bias)),
            };
            x = tape.conv2d(x, w, bias, l.stride, l.pad)?;
            if l.relu {
                x = tape.relu(x);
            }
        }
    }
    Ok(x)
}

impl MultiTaskNet {
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        validate_arch(&config)?;
        let n = config.arch.len();
        let mut f_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let mut f_blocks = Vec::with_capacity(n);
        let mut widths = vec![config.in_channels];
        let mut c = config.in_channels;
        for spec in &config.arch {
            let (block, out) = init_block(&mut f_rng, spec, c, config.num_classes, 1);
            f_blocks.push(block);
            c = out;
            widths.push(c);
        }

        let mut aux_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let shared = config.aux_kind.shared_blocks(n);
        let mut aux_tail = Vec::new();
        let mut c = widths[shared];
        for (i, spec) in config.arch.iter().enumerate().skip(shared) {
            let div = if config.aux_kind == AuxKind::Stage2 && config.aux_half_width && i == n - 2 {
                2
            } else {
                1
            };
            let (block, out) = init_block(&mut aux_rng, spec, c, config.num_classes, div);
            aux_tail.push(block);
            c = out;
        }

        let teacher = deep_clone_blocks(&f_blocks);
        Ok(Self {
            config,
            f_blocks,
            aux_tail,
            teacher,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn aux_kind(&self) -> AuxKind {
        self.config.aux_kind
    }

    fn n_blocks(&self) -> usize {
        self.f_blocks.len()
    }

    fn shared(&self) -> usize {
        self.config.aux_kind.shared_blocks(self.n_blocks())
    }

    /// Parameters of the segmentation branch `f`, blocks `1..=N`.
    pub fn f_params(&self) -> ParamSet {
        named_params("f", 1, &self.f_blocks)
    }

    /// Parameters the auxiliary branch owns (not shared with `f`).
    pub fn aux_own_params(&self) -> ParamSet {
        named_params("aux", self.shared() + 1, &self.aux_tail)
    }

    /// Full parameter view of the auxiliary branch: `f`'s handles for the
    /// shared blocks followed by its own tail.
    pub fn aux_params(&self) -> Result<ParamSet> {
        if self.config.aux_kind == AuxKind::None {
            return Err(NetError::NoAuxBranch);
        }
        let mut set = named_params("f", 1, &self.f_blocks[..self.shared()]);
        for (name, p) in self.aux_own_params().iter() {
            set.push(name, p.clone())?;
        }
        Ok(set)
    }

    pub fn teacher_params(&self) -> ParamSet {
        named_params("teacher", 1, &self.teacher)
    }

    /// Union of `f` and the auxiliary branch, each storage appearing once.
    pub fn trainable_params(&self) -> ParamSet {
        let mut set = self.f_params();
        for (name, p) in self.aux_own_params().iter() {
            set.push(name, p.clone()).expect("aux names never collide with f names");
        }
        set
    }

    fn upsample_to(&self, tape: &mut Tape, logits: Var, h: usize, w: usize) -> Result<Var> {
        Ok(tape.bilinear_upsample(logits, h, w)?)
    }

    fn input_dims(&self, tape: &Tape, x: Var) -> Result<(usize, usize)> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(NetError::Arch(format!(
                "input has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        Ok((h, w))
    }

    /// Logits of `f` at input resolution, with trainable leaves.
    pub fn forward_f(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (h, w) = self.input_dims(tape, x)?;
        let out = run_blocks(tape, &self.f_blocks, x, Leaves::Trainable)?;
        self.upsample_to(tape, out, h, w)
    }

    /// Logits of the auxiliary branch at input resolution.
    pub fn forward_aux(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_both(tape, x)?.1)
    }

    /// `(f logits, aux logits)` on the same input, evaluating the shared
    /// blocks once.
    pub fn forward_both(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        if self.config.aux_kind == AuxKind::None {
            return Err(NetError::NoAuxBranch);
        }
        let (h, w) = self.input_dims(tape, x)?;
        let k = self.shared();
        let trunk = run_blocks(tape, &self.f_blocks[..k], x, Leaves::Trainable)?;
        let f_out = run_blocks(tape, &self.f_blocks[k..], trunk, Leaves::Trainable)?;
        let a_out = run_blocks(tape, &self.aux_tail, trunk, Leaves::Trainable)?;
        Ok((
            self.upsample_to(tape, f_out, h, w)?,
            self.upsample_to(tape, a_out, h, w)?,
        ))
    }

    fn frozen_logits(&self, blocks: &[Block], x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (h, w) = self.input_dims(&tape, xv)?;
        let out = run_blocks(&mut tape, blocks, xv, Leaves::Frozen)?;
        let up = self.upsample_to(&mut tape, out, h, w)?;
        Ok(tape.value(up).clone())
    }

    /// Logits of `f` for a batch, outside any differentiation graph.
    pub fn predict_f(&self, x: &Tensor) -> Result<Tensor> {
        self.frozen_logits(&self.f_blocks, x)
    }

    /// Softmax probabilities of the teacher, detached.
    pub fn forward_teacher(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.frozen_logits(&self.teacher, x)?;
        let (n, c, h, w) = logits.dims4()?;
        let probs = engine::kernels::softmax_channels(n, c, h * w, logits.data());
        Ok(Tensor::new(vec![n, c, h, w], probs)?)
    }

    /// Pixelwise argmax of `f` for every image in the batch.
    pub fn predict_masks(&self, x: &Tensor) -> Result<Vec<IntMask>> {
        let logits = self.predict_f(x)?;
        let (n, ..) = logits.dims4()?;
        (0..n)
            .map(|i| Ok(argmax_channels(&logits.sample(i)?)?))
            .collect()
    }

    /// EMA step on the teacher: `teacher <- alpha * teacher + (1 - alpha) * f`.
    pub fn update_teacher(&self, alpha: f32) -> Result<()> {
        Ok(ema_update(&self.teacher_params(), &self.f_params().renamed("teacher"), alpha)?)
    }

    /// Copies `f` into the teacher.
    pub fn reset_teacher(&self) -> Result<()> {
        self.update_teacher(0.0)
    }

    /// Named tensors of `f`, the auxiliary branch's own blocks and the
    /// teacher.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.f_params().snapshot();
        out.extend(self.aux_own_params().snapshot());
        out.extend(self.teacher_params().snapshot());
        out
    }

    /// Loads every tensor this network owns from named checkpoint entries.
    pub fn load_tensors(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        let sets = [self.f_params(), self.aux_own_params(), self.teacher_params()];
        for set in &sets {
            assign(set, tensors)?;
        }
        Ok(())
    }

    /// Loads only `f` (the evaluation path); other entries are ignored.
    pub fn load_f(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        assign(&self.f_params(), tensors)
    }
}

fn assign(set: &ParamSet, tensors: &[(String, Tensor)]) -> Result<()> {
    for (name, p) in set.iter() {
        let t = tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NetError::MissingTensor(name.to_string()))?;
        p.set_value(t.clone())?;
    }
    Ok(())
}

/// Only the `f.` entries of a checkpoint: the model used at test time.
pub fn segmentation_view(tensors: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    tensors
        .iter()
        .filter(|(n, _)| n.starts_with("f."))
        .cloned()
        .collect()
}

trait Renamed {
    fn renamed(&self, prefix: &str) -> ParamSet;
}

impl Renamed for ParamSet {
    /// Same handles, with the branch prefix replaced.
    fn renamed(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, p) in self.iter() {
            let rest = name.split_once('.').map(|(_, r)| r).unwrap_or(name);
            out.push(format!("{prefix}.{rest}"), p.clone()).expect("unique");
        }
        out
    }
}
