//! Small networks, batches and stores for loss and branch tests.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracles::random_tensor;
use tssl_core::augment::{sample_spec, AugmentSpec, PolicyConfig};
use tssl_core::engine::{IntMask, Tensor};
use tssl_core::loss::{BatchItem, StageBatch};
use tssl_core::net::{AuxKind, BlockRole, BlockSpec, ConvSpec, MultiTaskNet, NetConfig};
use tssl_core::trainer::{Generation, PseudoMaskStore};

pub const CLASSES: usize = 4;

pub fn tiny_arch() -> Vec<BlockSpec> {
    let c = |out_channels, stride| vec![ConvSpec { out_channels, kernel: 3, stride }];
    vec![
        BlockSpec { index: 1, role: BlockRole::Downsample, convs: c(4, 2) },
        BlockSpec { index: 2, role: BlockRole::Trunk, convs: c(6, 1) },
        BlockSpec { index: 3, role: BlockRole::Trunk, convs: c(6, 1) },
        BlockSpec { index: 4, role: BlockRole::Trunk, convs: c(8, 1) },
        BlockSpec { index: 5, role: BlockRole::Classifier, convs: vec![] },
    ]
}

pub fn tiny_net(kind: AuxKind, seed: u64) -> MultiTaskNet {
    MultiTaskNet::build(
        NetConfig {
            arch: tiny_arch(),
            in_channels: 3,
            num_classes: CLASSES,
            aux_kind: kind,
            aux_half_width: true,
        },
        seed,
    )
    .unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, ignore_rate: f64) -> IntMask {
    let data = (0..h * w)
        .map(|_| {
            if rng.gen_bool(ignore_rate) {
                255
            } else {
                rng.gen_range(0..CLASSES as u8)
            }
        })
        .collect();
    IntMask::new(h, w, data).unwrap()
}

/// `n1` augmented items followed by `n2` labelled identity items.
pub fn random_batch(rng: &mut ChaCha8Rng, n1: usize, n2: usize, size: usize) -> StageBatch {
    let policy = PolicyConfig::default();
    let mut items = Vec::new();
    for i in 0..n1 + n2 {
        let labelled = i >= n1;
        items.push(BatchItem {
            id: format!("s{i}"),
            image: random_tensor(rng, &[3, size, size], 0.0, 1.0),
            mask: labelled.then(|| random_mask(rng, size, size, 0.1)),
            flipped: false,
            spec: if labelled { AugmentSpec::identity() } else { sample_spec(rng.gen(), &policy) },
        });
    }
    StageBatch { items, sub2_start: n1, fill: vec![0.5; 3] }
}

pub fn store_for(rng: &mut ChaCha8Rng, batch: &StageBatch, generation: Generation) -> PseudoMaskStore {
    let (h, w) = (batch.items[0].image.shape()[1], batch.items[0].image.shape()[2]);
    let masks: BTreeMap<String, IntMask> = batch
        .items
        .iter()
        .map(|it| (it.id.clone(), random_mask(rng, h, w, 0.0)))
        .collect();
    PseudoMaskStore::new(masks, generation, "test")
}

pub fn zero_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape())
}
