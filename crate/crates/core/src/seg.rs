//! Two-level U-Net segmenter trained with cross-entropy plus soft Dice.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vg_tensor::nn::{Conv2d, GroupNorm};
use vg_tensor::{checkpoint, ParamStore, Tape, Tensor, Var};

use crate::blocks::{argmax_labels, one_hot, NORM_GROUPS};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::train::{self, gather, LossHistory, TrainConfig};

const CHUNK: usize = 32;
const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub base: usize,
    pub classes: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { base: 16, classes: 3 }
    }
}

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, stride: usize, rng: &mut Stream) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), inputs, outputs, 3, stride, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), outputs, NORM_GROUPS.min(outputs)),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, store, x)?;
        let h = self.norm.forward(tape, store, h)?;
        Ok(tape.silu(h))
    }
}

#[derive(Debug, Clone)]
struct SegNet {
    config: SegConfig,
    enc1: ConvNorm,
    enc2: ConvNorm,
    down: ConvNorm,
    mid1: ConvNorm,
    mid2: ConvNorm,
    up: ConvNorm,
    dec: ConvNorm,
    head: Conv2d,
}

impl SegNet {
    fn new(store: &mut ParamStore, config: SegConfig, rng: &mut Stream) -> Self {
        let b = config.base;
        Self {
            config,
            enc1: ConvNorm::new(store, "enc1", 1, b, 1, rng),
            enc2: ConvNorm::new(store, "enc2", b, b, 1, rng),
            down: ConvNorm::new(store, "down", b, 2 * b, 2, rng),
            mid1: ConvNorm::new(store, "mid1", 2 * b, 2 * b, 1, rng),
            mid2: ConvNorm::new(store, "mid2", 2 * b, 2 * b, 1, rng),
            up: ConvNorm::new(store, "up", 2 * b, b, 1, rng),
            dec: ConvNorm::new(store, "dec", 2 * b, b, 1, rng),
            head: Conv2d::new(store, "head", b, config.classes, 1, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.enc1.forward(tape, store, x)?;
        let skip = self.enc2.forward(tape, store, h)?;
        let h = self.down.forward(tape, store, skip)?;
        let h = self.mid1.forward(tape, store, h)?;
        let h = self.mid2.forward(tape, store, h)?;
        let h = self.up.forward(tape, store, h)?;
        let h = tape.upsample_nearest(h, 2)?;
        let h = tape.concat(&[h, skip], 1)?;
        let h = self.dec.forward(tape, store, h)?;
        Ok(self.head.forward(tape, store, h)?)
    }
}

/// `1 − mean_k (2Σ p_k g_k + s) / (Σ p_k + Σ g_k + s)` over classes, with
/// sums taken over the whole batch.
pub fn soft_dice_loss(tape: &mut Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let probs = tape.softmax(logits, 1)?;
    let g = tape.leaf(targets.clone());
    let inter = tape.mul(probs, g)?;
    let inter = tape.sum_axes(inter, &[0, 2, 3])?;
    let ps = tape.sum_axes(probs, &[0, 2, 3])?;
    let gs = tape.sum_axes(g, &[0, 2, 3])?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_SMOOTH);
    let den = tape.add(ps, gs)?;
    let den = tape.add_scalar(den, DICE_SMOOTH);
    let inv = tape.reciprocal(den);
    let ratio = tape.mul(num, inv)?;
    let m = tape.mean(ratio);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Per-class segmentation network for `(n, 1, H, W)` images.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub store: ParamStore,
    net: SegNet,
}

impl Segmenter {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        if config.base == 0 || config.base % NORM_GROUPS != 0 || config.classes < 2 {
            return Err(Error::InvalidArgument(format!("unsupported segmenter {config:?}")));
        }
        let mut store = ParamStore::new();
        let net = SegNet::new(&mut store, config, &mut rng::stream(seed, "seg-init"));
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &SegConfig {
        &self.net.config
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.net.forward(tape, &self.store, x)
    }

    fn loss(net: &SegNet, tape: &mut Tape, store: &ParamStore, images: &Tensor, masks: &[Vec<u8>]) -> Result<Var> {
        let side = images.shape()[2];
        let x = tape.leaf(images.clone());
        let logits = net.forward(tape, store, x)?;
        let targets: Vec<usize> = masks.iter().flatten().map(|&l| l as usize).collect();
        let ce = tape.cross_entropy(logits, &targets)?;
        let dice = soft_dice_loss(tape, logits, &one_hot(masks, side, side)?)?;
        Ok(tape.add(ce, dice)?)
    }

    /// Trains on `(images, masks)` with shuffled minibatches.
    pub fn train(&mut self, images: &Tensor, masks: &[Vec<u8>], config: &TrainConfig, seed: u64) -> Result<LossHistory> {
        let n = images.shape()[0];
        if masks.len() != n {
            return Err(Error::InvalidArgument(format!("{n} images with {} masks", masks.len())));
        }
        let mut rng = rng::stream(seed, "seg-train");
        let net = &self.net;
        train::run_epochs("train-seg", &mut self.store, n, config, &mut rng, |tape, store, idx, _| {
            let batch_masks: Vec<Vec<u8>> = idx.iter().map(|&i| masks[i].clone()).collect();
            Self::loss(net, tape, store, &gather(images, idx), &batch_masks)
        })
    }

    /// Argmax label grids for `(n, 1, H, W)` images.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<Vec<u8>>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(gather(images, &idx));
            let logits = self.forward(&mut tape, x)?;
            out.extend(argmax_labels(tape.value(logits)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }

    pub fn load(config: SegConfig, path: &Path) -> Result<Self> {
        let mut seg = Self::new(config, 0)?;
        checkpoint::load_into(&mut seg.store, path)?;
        Ok(seg)
    }
}
