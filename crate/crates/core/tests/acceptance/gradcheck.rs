//! Parameter and input gradients of every trainable layer and network vs.
//! central finite differences, over 20 seeds. Failures panic.
//!
//! Parameters get uniform noise on top of their initialization so that
//! zero-initialized projections do not hide gradient paths. Large tensors
//! are checked on a seeded subset of coordinates. A gradient also passes
//! when its absolute gap to the numeric one is below 1e-8: biases followed
//! by a per-channel normalization have exactly zero gradient, and their
//! relative error would compare roundoff against roundoff. Coordinates
//! whose one-sided differences disagree sit on a ReLU kink and are skipped;
//! at most 2% of checked coordinates may be skipped per network.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ventrigen_core::blocks::one_hot;
use ventrigen_core::blocks::{CrossAttention, Mlp, ResBlock, SpadeBlock};
use ventrigen_core::diffusion::Condition;
use ventrigen_core::image::{lsgan_losses, ImageAeConfig, ImageAutoencoder, ImageDmConfig, PatchDiscriminator, SpadeDenoiser};
use ventrigen_core::mask::{ce_reconstruction_loss, kl_loss, reparameterize, MaskAeConfig, MaskAutoencoder, MaskDenoiser, MaskDmConfig};
use ventrigen_core::seg::{soft_dice_loss, SegConfig, Segmenter};
use vg_tensor::nn::{Conv2d, ConvTranspose2d, Embedding, GroupNorm, Linear};
use vg_tensor::{ParamStore, Tape, Tensor, Var};

const SEEDS: u64 = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Coordinates checked per tensor.
const COORDS: usize = 6;
const ABS_TOL: f64 = 1e-8;
/// One-sided difference gap that marks a kink inside the stencil.
const KINK: f64 = 1e-3;
const MAX_KINK_FRACTION: f64 = 0.02;

/// Central difference, or `None` when the stencil straddles a kink.
fn central(eval: impl Fn(f64) -> f64) -> Option<f64> {
    let (plus, zero, minus) = (eval(H), eval(0.0), eval(-H));
    let fwd = (plus - zero) / H;
    let bwd = (zero - minus) / H;
    ((fwd - bwd).abs() <= KINK).then(|| (plus - minus) / (2.0 * H))
}

/// Keeps the analytic/numeric pairs that are not on a kink.
fn paired(analytic: &[f64], picked: &[usize], numeric: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    picked.iter().zip(numeric).filter_map(|(&i, n)| n.map(|n| (analytic[i], n))).unzip()
}

trait Forward<M>: Fn(&mut Tape, &M, &[Var]) -> ventrigen_core::Result<Var> {}
impl<M, F: Fn(&mut Tape, &M, &[Var]) -> ventrigen_core::Result<Var>> Forward<M> for F {}

trait Model: Clone {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

/// A block together with the store holding its parameters.
#[derive(Clone)]
struct Owned<L: Clone> {
    store: ParamStore,
    layer: L,
}

impl<L: Clone> Model for Owned<L> {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

macro_rules! model_with_store {
    ($($t:ty),*) => {$(
        impl Model for $t {
            fn store(&self) -> &ParamStore {
                &self.store
            }
            fn store_mut(&mut self) -> &mut ParamStore {
                &mut self.store
            }
        }
    )*};
}

model_with_store!(
    MaskAutoencoder,
    MaskDenoiser,
    ImageAutoencoder,
    SpadeDenoiser,
    PatchDiscriminator,
    Segmenter
);

fn owned<L: Clone>(build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> L, seed: u64) -> Owned<L> {
    let mut store = ParamStore::new();
    let layer = build(&mut store, &mut ChaCha8Rng::seed_from_u64(seed + 1000));
    Owned { store, layer }
}

fn jitter<M: Model>(model: &mut M, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = model.store().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let id = model.store().find(&name).unwrap();
        for v in model.store_mut().get_mut(id).values_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

/// Relative error, or zero when the absolute gap is negligible.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if diff < ABS_TOL {
        0.0
    } else {
        diff / scale
    }
}

/// `sum(f(model, inputs) ∘ R)` for fixed random weights `R`.
fn loss_value<M: Model>(model: &M, inputs: &[Tensor], weights: &[f64], f: &impl Forward<M>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, model, &vars).unwrap();
    tape.values(out).iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    index::sample(rng, n, n.min(COORDS)).into_vec()
}

fn check<M: Model, F>(name: &str, build: impl Fn(u64) -> M, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &M, &[Var]) -> ventrigen_core::Result<Var>,
{
    let (mut total, mut kinks) = (0usize, 0usize);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = build(seed);
        jitter(&mut model, &mut rng);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, &mut rng)).collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
        let out = f(&mut tape, &model, &vars).unwrap();
        let n = tape.value(out).numel();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = tape.constant(tape.shape(out).to_vec().as_slice(), weights.clone()).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let mut grads = model.clone();
        grads.store_mut().zero_grad();
        tape.accumulate_into(grads.store_mut());

        for (k, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).unwrap().to_vec();
            let picked = coords(input.numel(), &mut rng);
            let numeric: Vec<Option<f64>> = picked
                .iter()
                .map(|&i| {
                    central(|d| {
                        let mut p = inputs.clone();
                        p[k].values_mut()[i] += d;
                        loss_value(&model, &p, &weights, &f)
                    })
                })
                .collect();
            total += picked.len();
            kinks += numeric.iter().filter(|n| n.is_none()).count();
            let (a, numeric) = paired(&analytic, &picked, &numeric);
            let err = rel_err(&a, &numeric);
            assert!(err < TOL, "{name}: seed {seed}, input {k}: relative error {err:e}");
        }

        let names: Vec<String> = model.store().iter().map(|(n, _)| n.to_string()).collect();
        for pname in names {
            let id = model.store().find(&pname).unwrap();
            let size = model.store().get(id).numel();
            let analytic = grads.store().get(id).grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; size]);
            let picked = coords(size, &mut rng);
            let numeric: Vec<Option<f64>> = picked
                .iter()
                .map(|&i| {
                    central(|d| {
                        let mut m = model.clone();
                        m.store_mut().get_mut(id).values_mut()[i] += d;
                        loss_value(&m, &inputs, &weights, &f)
                    })
                })
                .collect();
            total += picked.len();
            kinks += numeric.iter().filter(|n| n.is_none()).count();
            let (a, numeric) = paired(&analytic, &picked, &numeric);
            let err = rel_err(&a, &numeric);
            assert!(err < TOL, "{name}: seed {seed}, parameter {pname}: relative error {err:e}");
        }
    }
    assert!(
        (kinks as f64) <= MAX_KINK_FRACTION * total as f64,
        "{name}: {kinks} of {total} coordinates on a kink"
    );
}

fn labels(n: usize, side: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| (0..side * side).map(|_| rng.gen_range(0..3u8)).collect()).collect()
}

fn tensor_layers() {
    check(
        "linear",
        |s| owned(|st, r| Linear::new(st, "l", 5, 4, r), s),
        &[&[3, 5]],
        |t, m, v| Ok(m.layer.forward(t, &m.store, v[0])?),
    );
    check(
        "conv2d",
        |s| owned(|st, r| Conv2d::new(st, "c", 2, 3, 3, 1, r), s),
        &[&[2, 2, 5, 5]],
        |t, m, v| Ok(m.layer.forward(t, &m.store, v[0])?),
    );
    check(
        "conv2d_stride2",
        |s| owned(|st, r| Conv2d::new(st, "c", 2, 3, 3, 2, r), s),
        &[&[1, 2, 6, 6]],
        |t, m, v| Ok(m.layer.forward(t, &m.store, v[0])?),
    );
    check(
        "conv_transpose2d",
        |s| owned(|st, r| ConvTranspose2d::upsample2x(st, "u", 2, 3, r), s),
        &[&[1, 2, 3, 3]],
        |t, m, v| Ok(m.layer.forward(t, &m.store, v[0])?),
    );
    check(
        "group_norm",
        |s| owned(|st, _| GroupNorm::new(st, "g", 8, 4), s),
        &[&[2, 8, 3, 3]],
        |t, m, v| Ok(m.layer.forward(t, &m.store, v[0])?),
    );
    check(
        "embedding",
        |s| owned(|st, r| Embedding::new(st, "e", 3, 4, r), s),
        &[],
        |t, m, _| {
            let grid = labels(2, 3, 1);
            let flat: Vec<usize> = grid.iter().flatten().map(|&l| l as usize).collect();
            Ok(m.layer.forward(t, &m.store, &flat, [2, 3, 3])?)
        },
    );
}

fn building_blocks() {
    check(
        "mlp",
        |s| owned(|st, r| Mlp::new(st, "m", 4, 6, r), s),
        &[&[3, 4]],
        |t, m, v| m.layer.forward(t, &m.store, v[0]),
    );
    check(
        "resblock_emb",
        |s| owned(|st, r| ResBlock::new(st, "r", 8, 16, Some(5), r), s),
        &[&[2, 8, 4, 4], &[2, 5]],
        |t, m, v| m.layer.forward(t, &m.store, v[0], Some(v[1])),
    );
    check(
        "resblock_plain",
        |s| owned(|st, r| ResBlock::new(st, "r", 8, 8, None, r), s),
        &[&[1, 8, 4, 4]],
        |t, m, v| m.layer.forward(t, &m.store, v[0], None),
    );
    check(
        "cross_attention",
        |s| owned(|st, r| CrossAttention::new(st, "a", 8, 6, 4, r), s),
        &[&[2, 8, 3, 3], &[2, 6]],
        |t, m, v| m.layer.forward(t, &m.store, v[0], v[1]),
    );
    check(
        "spade",
        |s| owned(|st, r| SpadeBlock::new(st, "s", 4, 5, r), s),
        &[&[2, 4, 4, 4]],
        |t, m, v| {
            let mask = t.leaf(one_hot(&labels(2, 4, 7), 4, 4)?);
            m.layer.forward(t, &m.store, v[0], mask)
        },
    );
}

fn mask_networks() {
    let ae_cfg = MaskAeConfig {
        grid: 8,
        embed_dim: 4,
        width: 8,
        latent_channels: 2,
        kl_weight: 1e-6,
    };
    check(
        "mask_ae_encode",
        |s| MaskAutoencoder::new(ae_cfg, s).unwrap(),
        &[],
        |t, m, _| {
            let (mu, logvar) = m.encode(t, &labels(2, 8, 3))?;
            Ok(t.concat(&[mu, logvar], 1)?)
        },
    );
    check(
        "mask_ae_decode",
        |s| MaskAutoencoder::new(ae_cfg, s).unwrap(),
        &[&[2, 2, 2, 2]],
        |t, m, v| m.decode(t, v[0]),
    );
    let dm_cfg = MaskDmConfig {
        latent_channels: 2,
        base: 8,
        emb_dim: 8,
        token_dim: 6,
        attn_width: 4,
        dropout: 0.2,
    };
    check(
        "mask_denoiser",
        |s| MaskDenoiser::new(dm_cfg, s).unwrap(),
        &[&[2, 2, 4, 4]],
        |t, m, v| m.forward(t, v[0], &[3, 17], &[Condition::new(0.7), Condition::unconditional(0.2)]),
    );
}

fn image_networks() {
    let ae_cfg = ImageAeConfig {
        grid: 8,
        width: 16,
        latent_channels: 2,
        spade_hidden: 4,
        disc_width: 4,
        kl_weight: 1e-6,
        lambda_adv: 0.05,
    };
    check(
        "image_ae_encode",
        |s| ImageAutoencoder::new(ae_cfg, s).unwrap(),
        &[&[2, 1, 8, 8]],
        |t, m, v| {
            let (mu, logvar) = m.encode(t, v[0])?;
            Ok(t.concat(&[mu, logvar], 1)?)
        },
    );
    check(
        "image_ae_decode",
        |s| ImageAutoencoder::new(ae_cfg, s).unwrap(),
        &[&[2, 2, 2, 2]],
        |t, m, v| m.decode(t, v[0], &labels(2, 8, 5)),
    );
    check(
        "discriminator",
        |s| PatchDiscriminator::new(4, s),
        &[&[2, 1, 16, 16]],
        |t, m, v| m.forward(t, v[0]),
    );
    let dm_cfg = ImageDmConfig {
        latent_channels: 2,
        base: 8,
        emb_dim: 8,
        spade_hidden: 4,
    };
    check(
        "spade_denoiser",
        |s| SpadeDenoiser::new(dm_cfg, s).unwrap(),
        &[&[2, 2, 4, 4]],
        |t, m, v| m.forward(t, v[0], &[5, 40], &labels(2, 8, 9)),
    );
}

fn segmenter_network() {
    let cfg = SegConfig { base: 8, classes: 3 };
    check(
        "segmenter",
        |s| Segmenter::new(cfg, s).unwrap(),
        &[&[2, 1, 6, 6]],
        |t, m, v| m.forward(t, v[0]),
    );
}

fn losses() {
    let none = |_| owned(|_, _| (), 0);
    check("soft_dice", none, &[&[2, 3, 3, 3]], |t, _, v| {
        soft_dice_loss(t, v[0], &one_hot(&labels(2, 3, 11), 3, 3)?)
    });
    check("kl", none, &[&[2, 2, 2, 2], &[2, 2, 2, 2]], |t, _, v| kl_loss(t, v[0], v[1]));
    check("reparameterize", none, &[&[2, 3], &[2, 3]], |t, _, v| {
        reparameterize(t, v[0], v[1], &mut ChaCha8Rng::seed_from_u64(4))
    });
    check("ce_reconstruction", none, &[&[2, 3, 3, 3]], |t, _, v| {
        ce_reconstruction_loss(t, v[0], &labels(2, 3, 13))
    });
    check("lsgan", none, &[&[2, 1, 2, 2], &[2, 1, 2, 2]], |t, _, v| {
        let (d, g) = lsgan_losses(t, v[0], v[1])?;
        Ok(t.concat(&[d, g], 0)?)
    });
}

/// Every group, by name.
pub const GROUPS: [(&str, fn()); 6] = [
    ("tensor layers", tensor_layers),
    ("building blocks", building_blocks),
    ("mask networks", mask_networks),
    ("image networks", image_networks),
    ("segmenter", segmenter_network),
    ("losses", losses),
];
