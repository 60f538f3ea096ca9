//! Second-stage generator: a mask-conditioned (SPADE) image autoencoder
//! trained with L1, KL and least-squares patch-adversarial terms, and a
//! latent denoiser whose upsampling path is modulated by the mask.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vg_tensor::nn::{Conv2d, GroupNorm};
use vg_tensor::optim::{Adam, AdamConfig};
use vg_tensor::{checkpoint, ParamStore, Tape, Tensor, Var};

use crate::blocks::{one_hot, timestep_features, Mlp, ResBlock, SpadeBlock, NORM_GROUPS};
use crate::diffusion::{self, Condition, DiffusionConfig, LatentNorm, NoiseSchedule};
use crate::error::{Error, Result};
use crate::mask::{kl_loss, reparameterize, LOGVAR_RANGE};
use crate::phantom::LabeledVolume;
use crate::rng::{self, Stream};
use crate::train::{self, batches, ensure_finite, gather, LossHistory, TrainConfig};

const CHUNK: usize = 32;
const LEAK: f64 = 0.2;

/// Images `(n, 1, H, W)` and label grids of a set of volumes.
pub fn split_volumes(volumes: &[LabeledVolume]) -> Result<(Tensor, Vec<Vec<u8>>)> {
    let images: Vec<Tensor> = volumes.iter().map(|v| v.image.clone()).collect();
    let masks = volumes.iter().map(|v| v.labels.clone()).collect();
    Ok((train::stack(&images)?, masks))
}

fn grid_of(masks: &[Vec<u8>]) -> Result<usize> {
    let len = masks.first().map_or(0, Vec::len);
    let g = (len as f64).sqrt().round() as usize;
    if g == 0 || g * g != len || masks.iter().any(|m| m.len() != len) {
        return Err(Error::InvalidArgument("masks must be equal-sized squares".into()));
    }
    Ok(g)
}

/// One-hot masks at each requested resolution, as tape constants.
fn mask_pyramid(tape: &mut Tape, masks: &[Vec<u8>], sizes: &[usize]) -> Result<Vec<Var>> {
    let g = grid_of(masks)?;
    sizes.iter().map(|&s| Ok(tape.leaf(one_hot(masks, g, s)?))).collect()
}

fn squared_offset_mean(tape: &mut Tape, x: Var, target: f64) -> Var {
    let d = tape.add_scalar(x, -target);
    let d = tape.square(d);
    tape.mean(d)
}

/// Least-squares GAN terms from discriminator scores:
/// `d = ½E[(real−1)²] + ½E[fake²]`, `g = ½E[(fake−1)²]`.
pub fn lsgan_losses(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<(Var, Var)> {
    let r = squared_offset_mean(tape, real_scores, 1.0);
    let f = squared_offset_mean(tape, fake_scores, 0.0);
    let d = tape.add(r, f)?;
    let d = tape.scale(d, 0.5);
    let g = squared_offset_mean(tape, fake_scores, 1.0);
    Ok((d, tape.scale(g, 0.5)))
}

/// Three stride-2 convolutions producing one realism score per patch.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub store: ParamStore,
    layers: [Conv2d; 3],
}

impl PatchDiscriminator {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let r = &mut rng::stream(seed, "disc-init");
        let layers = [
            Conv2d::new(&mut store, "disc.0", 1, width, 3, 2, r),
            Conv2d::new(&mut store, "disc.1", width, 2 * width, 3, 2, r),
            Conv2d::new(&mut store, "disc.2", 2 * width, 1, 3, 2, r),
        ];
        Self { store, layers }
    }

    /// Score grid `(n, 1, H/8, W/8)`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, LEAK);
            }
        }
        Ok(h)
    }
}

/// `(d_loss, g_loss)` for real and generated images scored by `disc`.
pub fn adversarial_losses(tape: &mut Tape, disc: &PatchDiscriminator, real: Var, fake: Var) -> Result<(Var, Var)> {
    let r = disc.forward(tape, real)?;
    let f = disc.forward(tape, fake)?;
    lsgan_losses(tape, r, f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageAeConfig {
    pub grid: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub spade_hidden: usize,
    pub disc_width: usize,
    pub kl_weight: f64,
    pub lambda_adv: f64,
}

impl Default for ImageAeConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            width: 32,
            latent_channels: 4,
            spade_hidden: 16,
            disc_width: 16,
            kl_weight: 1e-6,
            lambda_adv: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct ImageAeNet {
    config: ImageAeConfig,
    enc1: Conv2d,
    enc2: Conv2d,
    enc_res: ResBlock,
    enc_out: Conv2d,
    dec_in: Conv2d,
    spade16: SpadeBlock,
    dec_up1: Conv2d,
    spade32: SpadeBlock,
    dec_up2: Conv2d,
    spade64: SpadeBlock,
    dec_out: Conv2d,
}

impl ImageAeNet {
    fn new(store: &mut ParamStore, config: ImageAeConfig, rng: &mut Stream) -> Self {
        let (w, lc, sh) = (config.width, config.latent_channels, config.spade_hidden);
        Self {
            config,
            enc1: Conv2d::new(store, "enc.down1", 1, w / 2, 3, 2, rng),
            enc2: Conv2d::new(store, "enc.down2", w / 2, w, 3, 2, rng),
            enc_res: ResBlock::new(store, "enc.res", w, w, None, rng),
            enc_out: Conv2d::new(store, "enc.out", w, 2 * lc, 1, 1, rng),
            dec_in: Conv2d::new(store, "dec.in", lc, w, 3, 1, rng),
            spade16: SpadeBlock::new(store, "dec.spade16", w, sh, rng),
            dec_up1: Conv2d::new(store, "dec.up1", w, w / 2, 3, 1, rng),
            spade32: SpadeBlock::new(store, "dec.spade32", w / 2, sh, rng),
            dec_up2: Conv2d::new(store, "dec.up2", w / 2, w / 4, 3, 1, rng),
            spade64: SpadeBlock::new(store, "dec.spade64", w / 4, sh, rng),
            dec_out: Conv2d::new(store, "dec.out", w / 4, 1, 3, 1, rng),
        }
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<(Var, Var)> {
        let h = self.enc1.forward(tape, store, images)?;
        let h = tape.silu(h);
        let h = self.enc2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.enc_res.forward(tape, store, h, None)?;
        let h = self.enc_out.forward(tape, store, h)?;
        let lc = self.config.latent_channels;
        let mu = tape.narrow(h, 1, 0, lc)?;
        let logvar = tape.narrow(h, 1, lc, lc)?;
        Ok((mu, tape.clamp(logvar, LOGVAR_RANGE.0, LOGVAR_RANGE.1)))
    }

    /// `masks` holds one-hot maps at grid/4, grid/2 and grid.
    fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var, masks: &[Var]) -> Result<Var> {
        let h = self.dec_in.forward(tape, store, z)?;
        let h = self.spade16.forward(tape, store, h, masks[0])?;
        let h = tape.silu(h);
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.dec_up1.forward(tape, store, h)?;
        let h = self.spade32.forward(tape, store, h, masks[1])?;
        let h = tape.silu(h);
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.dec_up2.forward(tape, store, h)?;
        let h = self.spade64.forward(tape, store, h, masks[2])?;
        let h = tape.silu(h);
        let h = self.dec_out.forward(tape, store, h)?;
        Ok(tape.sigmoid(h))
    }

    fn pyramid(&self, tape: &mut Tape, masks: &[Vec<u8>]) -> Result<Vec<Var>> {
        let g = self.config.grid;
        mask_pyramid(tape, masks, &[g / 4, g / 2, g])
    }
}

fn l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Per-phase record of autoencoder training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AeHistory {
    /// Mean generator objective per epoch.
    pub generator: Vec<f64>,
    pub discriminator: Vec<f64>,
}

/// Image autoencoder whose decoder is conditioned on the label map.
#[derive(Debug, Clone)]
pub struct ImageAutoencoder {
    pub store: ParamStore,
    net: ImageAeNet,
}

impl ImageAutoencoder {
    pub fn new(config: ImageAeConfig, seed: u64) -> Result<Self> {
        if config.grid % 4 != 0 || config.width < 16 || config.width % 16 != 0 {
            return Err(Error::InvalidArgument(format!("unsupported image autoencoder shape {config:?}")));
        }
        let mut store = ParamStore::new();
        let net = ImageAeNet::new(&mut store, config, &mut rng::stream(seed, "image-ae-init"));
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &ImageAeConfig {
        &self.net.config
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let c = self.config();
        [c.latent_channels, c.grid / 4, c.grid / 4]
    }

    pub fn encode(&self, tape: &mut Tape, images: Var) -> Result<(Var, Var)> {
        self.net.encode(tape, &self.store, images)
    }

    /// Decodes latents with label grids, building the mask pyramid on `tape`.
    pub fn decode(&self, tape: &mut Tape, z: Var, masks: &[Vec<u8>]) -> Result<Var> {
        let pyramid = self.net.pyramid(tape, masks)?;
        self.net.decode(tape, &self.store, z, &pyramid)
    }

    pub fn encode_mean(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(gather(images, &idx));
            let (mu, _) = self.encode(&mut tape, x)?;
            parts.extend_from_slice(tape.values(mu));
        }
        let [c, h, w] = self.latent_shape();
        Ok(Tensor::new(&[n, c, h, w], parts)?)
    }

    /// Images `(n, 1, grid, grid)` in `[0, 1]`.
    pub fn decode_images(&self, z: &Tensor, masks: &[Vec<u8>]) -> Result<Tensor> {
        let n = z.shape()[0];
        if masks.len() != n {
            return Err(Error::InvalidArgument(format!("{n} latents with {} masks", masks.len())));
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let zv = tape.leaf(gather(z, &idx));
            let out = self.decode(&mut tape, zv, &masks[start..end])?;
            parts.extend_from_slice(tape.values(out));
        }
        let g = self.config().grid;
        Ok(Tensor::new(&[n, 1, g, g], parts)?)
    }

    /// Mean absolute reconstruction error using mean latents.
    pub fn reconstruction_l1(&self, images: &Tensor, masks: &[Vec<u8>]) -> Result<f64> {
        let recon = self.decode_images(&self.encode_mean(images)?, masks)?;
        let total: f64 = recon.values().iter().zip(images.values()).map(|(a, b)| (a - b).abs()).sum();
        Ok(total / images.numel() as f64)
    }

    /// One training phase with alternating generator and discriminator
    /// updates.
    pub fn train(
        &mut self,
        disc: &mut PatchDiscriminator,
        images: &Tensor,
        masks: &[Vec<u8>],
        config: &TrainConfig,
        seed: u64,
        stage: &str,
    ) -> Result<AeHistory> {
        config.validate(stage)?;
        let n = images.shape()[0];
        if n == 0 || masks.len() != n {
            return Err(Error::InvalidArgument(format!("{stage}: {n} images with {} masks", masks.len())));
        }
        let cfg = self.net.config;
        let mut rng = rng::stream(seed, stage);
        let mut adam_g = Adam::new(&self.store, AdamConfig::with_lr(config.lr));
        let mut adam_d = Adam::new(&disc.store, AdamConfig::with_lr(config.lr));
        let mut history = AeHistory::default();
        let mut step = 0;
        for _ in 0..config.epochs {
            let (mut g_total, mut d_total) = (0.0, 0.0);
            for idx in batches(n, config.batch_size, &mut rng) {
                let x = gather(images, &idx);
                let batch_masks: Vec<Vec<u8>> = idx.iter().map(|&i| masks[i].clone()).collect();

                disc.store.set_frozen(true);
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let (mu, logvar) = self.encode(&mut tape, xv)?;
                let z = reparameterize(&mut tape, mu, logvar, &mut rng)?;
                let recon = self.decode(&mut tape, z, &batch_masks)?;
                let rec = l1(&mut tape, recon, xv)?;
                let kl = kl_loss(&mut tape, mu, logvar)?;
                let kl = tape.scale(kl, cfg.kl_weight);
                let scores = disc.forward(&mut tape, recon)?;
                let g_adv = squared_offset_mean(&mut tape, scores, 1.0);
                let g_adv = tape.scale(g_adv, 0.5 * cfg.lambda_adv);
                let loss = tape.add(rec, kl)?;
                let loss = tape.add(loss, g_adv)?;
                let value = tape.values(loss)[0];
                ensure_finite(stage, step, value)?;
                train::apply_step(&mut tape, loss, &mut self.store, &mut adam_g, config.clip)?;
                disc.store.set_frozen(false);
                let fake = tape.value(recon).clone();

                let mut tape = Tape::new();
                let real = tape.leaf(x);
                let fake = tape.leaf(fake);
                let (d_loss, _) = adversarial_losses(&mut tape, disc, real, fake)?;
                let d_value = tape.values(d_loss)[0];
                ensure_finite(stage, step, d_value)?;
                train::apply_step(&mut tape, d_loss, &mut disc.store, &mut adam_d, config.clip)?;

                g_total += value * idx.len() as f64;
                d_total += d_value * idx.len() as f64;
                step += 1;
            }
            history.generator.push(g_total / n as f64);
            history.discriminator.push(d_total / n as f64);
        }
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }

    pub fn load(config: ImageAeConfig, path: &Path) -> Result<Self> {
        let mut ae = Self::new(config, 0)?;
        checkpoint::load_into(&mut ae.store, path)?;
        Ok(ae)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDmConfig {
    pub latent_channels: usize,
    pub base: usize,
    pub emb_dim: usize,
    pub spade_hidden: usize,
}

impl Default for ImageDmConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base: 32,
            emb_dim: 64,
            spade_hidden: 16,
        }
    }
}

const TIME_FEATURES: usize = 32;

#[derive(Debug, Clone)]
struct SpadeDmNet {
    config: ImageDmConfig,
    time: Mlp,
    conv_in: Conv2d,
    res1: ResBlock,
    down: Conv2d,
    res2: ResBlock,
    res3: ResBlock,
    spade_mid: SpadeBlock,
    up: Conv2d,
    spade_up: SpadeBlock,
    res4: ResBlock,
    spade_out: SpadeBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl SpadeDmNet {
    fn new(store: &mut ParamStore, config: ImageDmConfig, rng: &mut Stream) -> Self {
        let (lc, b, e, sh) = (config.latent_channels, config.base, config.emb_dim, config.spade_hidden);
        Self {
            config,
            time: Mlp::new(store, "time", TIME_FEATURES, e, rng),
            conv_in: Conv2d::new(store, "in", lc, b, 3, 1, rng),
            res1: ResBlock::new(store, "res1", b, b, Some(e), rng),
            down: Conv2d::new(store, "down", b, 2 * b, 3, 2, rng),
            res2: ResBlock::new(store, "res2", 2 * b, 2 * b, Some(e), rng),
            res3: ResBlock::new(store, "res3", 2 * b, 2 * b, Some(e), rng),
            spade_mid: SpadeBlock::new(store, "spade.mid", 2 * b, sh, rng),
            up: Conv2d::new(store, "up", 2 * b, b, 3, 1, rng),
            spade_up: SpadeBlock::new(store, "spade.up", b, sh, rng),
            res4: ResBlock::new(store, "res4", 2 * b, b, Some(e), rng),
            spade_out: SpadeBlock::new(store, "spade.out", b, sh, rng),
            norm_out: GroupNorm::new(store, "out.norm", b, NORM_GROUPS),
            conv_out: Conv2d::new(store, "out.conv", b, lc, 3, 1, rng),
        }
    }

    /// `masks` holds one-hot maps at the latent size and half of it.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ts: &[usize], masks: &[Var]) -> Result<Var> {
        let tf = tape.leaf(timestep_features(ts, TIME_FEATURES));
        let temb = self.time.forward(tape, store, tf)?;
        let h = self.conv_in.forward(tape, store, x)?;
        let skip = self.res1.forward(tape, store, h, Some(temb))?;
        let h = self.down.forward(tape, store, skip)?;
        let h = self.res2.forward(tape, store, h, Some(temb))?;
        let h = self.res3.forward(tape, store, h, Some(temb))?;
        let h = self.spade_mid.forward(tape, store, h, masks[1])?;
        let h = tape.silu(h);
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.up.forward(tape, store, h)?;
        let h = self.spade_up.forward(tape, store, h, masks[0])?;
        let h = tape.silu(h);
        let h = tape.concat(&[h, skip], 1)?;
        let h = self.res4.forward(tape, store, h, Some(temb))?;
        let h = self.spade_out.forward(tape, store, h, masks[0])?;
        let h = self.norm_out.forward(tape, store, h)?;
        let h = tape.silu(h);
        Ok(self.conv_out.forward(tape, store, h)?)
    }
}

/// Latent U-Net with SPADE modulation on its upsampling path.
#[derive(Debug, Clone)]
pub struct SpadeDenoiser {
    pub store: ParamStore,
    net: SpadeDmNet,
}

impl SpadeDenoiser {
    pub fn new(config: ImageDmConfig, seed: u64) -> Result<Self> {
        if config.base % NORM_GROUPS != 0 {
            return Err(Error::InvalidArgument(format!("unsupported image denoiser {config:?}")));
        }
        let mut store = ParamStore::new();
        let net = SpadeDmNet::new(&mut store, config, &mut rng::stream(seed, "image-dm-init"));
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &ImageDmConfig {
        &self.net.config
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, ts: &[usize], masks: &[Vec<u8>]) -> Result<Var> {
        let side = tape.shape(x)[2];
        let pyramid = mask_pyramid(tape, masks, &[side, side / 2])?;
        self.net.forward(tape, &self.store, x, ts, &pyramid)
    }

    pub fn predict(&self, x: &Tensor, t: usize, masks: &[Vec<u8>]) -> Result<Tensor> {
        let n = x.shape()[0];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, xv, &vec![t; n], masks)?;
        Ok(tape.value(out).clone())
    }

    /// Noise-regression loss at fixed seeded timesteps and noise.
    pub fn probe_loss(&self, latents: &Tensor, masks: &[Vec<u8>], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
        let mut rng = rng::stream(seed, "image-dm-probe");
        let n = latents.shape()[0];
        let mut total = 0.0;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let x0 = gather(latents, &idx);
            let conds = vec![Condition::new(0.0); idx.len()];
            let mut tape = Tape::new();
            let loss = diffusion::training_loss(
                &mut tape,
                |tape, x, ts, _| self.forward(tape, x, ts, &masks[start..end]),
                &x0,
                &conds,
                sched,
                diffusion::LossWeighting::Simplified,
                &mut rng,
            )?;
            total += tape.values(loss)[0] * idx.len() as f64;
        }
        Ok(total / n as f64)
    }

    /// Trains on standardized latents paired with their label grids.
    pub fn train(
        &mut self,
        latents: &Tensor,
        masks: &[Vec<u8>],
        diffusion_config: &DiffusionConfig,
        config: &TrainConfig,
        seed: u64,
        stage: &str,
    ) -> Result<LossHistory> {
        let sched = diffusion_config.schedule()?;
        let n = latents.shape()[0];
        if masks.len() != n {
            return Err(Error::InvalidArgument(format!("{n} latents with {} masks", masks.len())));
        }
        let probe_n = n.min(64);
        let probe = gather(latents, &(0..probe_n).collect::<Vec<_>>());
        let initial = self.probe_loss(&probe, &masks[..probe_n], &sched, seed)?;
        let mut rng = rng::stream(seed, stage);
        let net = &self.net;
        let weighting = diffusion_config.loss_weighting;
        let mut history = train::run_epochs(stage, &mut self.store, n, config, &mut rng, |tape, store, idx, rng| {
            let x0 = gather(latents, idx);
            let batch_masks: Vec<Vec<u8>> = idx.iter().map(|&i| masks[i].clone()).collect();
            let conds = vec![Condition::new(0.0); idx.len()];
            let side = x0.shape()[2];
            diffusion::training_loss(
                tape,
                |tape, x, ts, _| {
                    let pyramid = mask_pyramid(tape, &batch_masks, &[side, side / 2])?;
                    net.forward(tape, store, x, ts, &pyramid)
                },
                &x0,
                &conds,
                &sched,
                weighting,
                rng,
            )
        })?;
        history.initial_probe = Some(initial);
        history.final_probe = Some(self.probe_loss(&probe, &masks[..probe_n], &sched, seed)?);
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }

    pub fn load(config: ImageDmConfig, path: &Path) -> Result<Self> {
        let mut dm = Self::new(config, 0)?;
        checkpoint::load_into(&mut dm.store, path)?;
        Ok(dm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStackMeta {
    pub autoencoder: ImageAeConfig,
    pub denoiser: ImageDmConfig,
    pub diffusion: DiffusionConfig,
    pub latent_norm: LatentNorm,
}

pub const IMAGE_AE_FILE: &str = "image_ae.vgck";
pub const IMAGE_DISC_FILE: &str = "image_disc.vgck";
pub const IMAGE_DM_FILE: &str = "image_dm.vgck";
pub const IMAGE_META_FILE: &str = "image_stack.json";

/// A frozen image autoencoder with its latent denoiser.
#[derive(Debug, Clone)]
pub struct ImageStack {
    pub autoencoder: ImageAutoencoder,
    pub denoiser: SpadeDenoiser,
    pub meta: ImageStackMeta,
    schedule: NoiseSchedule,
}

impl ImageStack {
    pub fn new(
        autoencoder: ImageAutoencoder,
        denoiser: SpadeDenoiser,
        diffusion: DiffusionConfig,
        latent_norm: LatentNorm,
    ) -> Result<Self> {
        let meta = ImageStackMeta {
            autoencoder: *autoencoder.config(),
            denoiser: *denoiser.config(),
            diffusion,
            latent_norm,
        };
        Ok(Self {
            schedule: diffusion.schedule()?,
            autoencoder,
            denoiser,
            meta,
        })
    }

    /// Trains the denoiser on corpus A, then continues on corpus B. The
    /// latent standardization is fitted on A.
    pub fn train(
        autoencoder: ImageAutoencoder,
        corpus_a: &[LabeledVolume],
        corpus_b: &[LabeledVolume],
        denoiser: ImageDmConfig,
        diffusion: DiffusionConfig,
        phase_a: &TrainConfig,
        phase_b: &TrainConfig,
        seed: u64,
    ) -> Result<(Self, [LossHistory; 2])> {
        let (images_a, masks_a) = split_volumes(corpus_a)?;
        let norm = LatentNorm::fit(&autoencoder.encode_mean(&images_a)?);
        let mut dm = SpadeDenoiser::new(denoiser, seed)?;
        let latents_a = norm.apply(&autoencoder.encode_mean(&images_a)?);
        let ha = dm.train(&latents_a, &masks_a, &diffusion, phase_a, seed, "train-image-dm-a")?;
        let hb = if corpus_b.is_empty() || phase_b.epochs == 0 {
            LossHistory::default()
        } else {
            let (images_b, masks_b) = split_volumes(corpus_b)?;
            let latents_b = norm.apply(&autoencoder.encode_mean(&images_b)?);
            dm.train(&latents_b, &masks_b, &diffusion, phase_b, seed, "train-image-dm-b")?
        };
        Ok((Self::new(autoencoder, dm, diffusion, norm)?, [ha, hb]))
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn initial_noise(&self, seed: u64) -> Tensor {
        diffusion::gaussian(&self.autoencoder.latent_shape(), &mut rng::stream(seed, "image-latent"))
    }

    /// One image per `(mask, seed)` pair, `(n, 1, grid, grid)`.
    pub fn sample(&self, masks: &[Vec<u8>], steps: usize, seeds: &[u64]) -> Result<Tensor> {
        if masks.len() != seeds.len() || masks.is_empty() {
            return Err(Error::InvalidArgument(format!("{} masks with {} seeds", masks.len(), seeds.len())));
        }
        let mut parts = Vec::new();
        for (mchunk, schunk) in masks.chunks(64).zip(seeds.chunks(64)) {
            let noise: Vec<Tensor> = schunk.iter().map(|&s| self.initial_noise(s)).collect();
            let z = diffusion::ddim_sample_from(
                |x, t, _| self.denoiser.predict(x, t, mchunk),
                train::stack(&noise)?,
                &self.schedule,
                steps,
                Condition::new(0.0),
                1.0,
            )?;
            let z = self.meta.latent_norm.invert(&z);
            parts.extend_from_slice(self.autoencoder.decode_images(&z, mchunk)?.values());
        }
        let g = self.autoencoder.config().grid;
        Ok(Tensor::new(&[masks.len(), 1, g, g], parts)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.autoencoder.save(&dir.join(IMAGE_AE_FILE))?;
        self.denoiser.save(&dir.join(IMAGE_DM_FILE))?;
        let meta = dir.join(IMAGE_META_FILE);
        std::fs::write(&meta, serde_json::to_string_pretty(&self.meta).expect("meta serializes")).map_err(Error::io(&meta))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(IMAGE_META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
        let meta: ImageStackMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: meta_path.clone(),
            msg: e.to_string(),
        })?;
        let ae = ImageAutoencoder::load(meta.autoencoder, &dir.join(IMAGE_AE_FILE))?;
        let dm = SpadeDenoiser::load(meta.denoiser, &dir.join(IMAGE_DM_FILE))?;
        Self::new(ae, dm, meta.diffusion, meta.latent_norm)
    }
}

/// Samples one image conditioned on `mask`.
pub fn sample_image(stack: &ImageStack, mask: &[u8], steps: usize, seed: u64) -> Result<Tensor> {
    let out = stack.sample(&[mask.to_vec()], steps, &[seed])?;
    let g = stack.autoencoder.config().grid;
    Ok(Tensor::new(&[1, g, g], out.values().to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_corpus, CorpusKind, VENTRICLE};

    fn scores(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::filled(&[2, 1, 3, 3], v))
    }

    #[test]
    fn lsgan_substitution_cases() {
        let mut tape = Tape::new();
        let (r, f) = (scores(&mut tape, 1.0), scores(&mut tape, 0.0));
        let (d, g) = lsgan_losses(&mut tape, r, f).unwrap();
        assert_eq!((tape.values(d)[0], tape.values(g)[0]), (0.0, 0.5));
        let (r, f) = (scores(&mut tape, 0.5), scores(&mut tape, 0.5));
        let (d, g) = lsgan_losses(&mut tape, r, f).unwrap();
        assert_eq!((tape.values(d)[0], tape.values(g)[0]), (0.25, 0.125));
    }

    #[test]
    fn generator_loss_is_minimal_only_at_one() {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=40 {
            let v = k as f64 * 0.05;
            let mut tape = Tape::new();
            let (r, f) = (scores(&mut tape, 1.0), scores(&mut tape, v));
            let (_, g) = lsgan_losses(&mut tape, r, f).unwrap();
            let g = tape.values(g)[0];
            if g < best.0 {
                best = (g, v);
            }
        }
        assert_eq!(best, (0.0, 1.0));
    }

    #[test]
    fn discriminator_emits_a_patch_grid() {
        let d = PatchDiscriminator::new(8, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 1, 64, 64]));
        let s = d.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(s), &[2, 1, 8, 8]);
    }

    #[test]
    fn decoder_output_is_bounded_and_mask_dependent() {
        let (vols, _) = build_corpus(CorpusKind::Balanced, 2, 3).unwrap();
        let (images, masks) = split_volumes(&vols).unwrap();
        let mut ae = ImageAutoencoder::new(ImageAeConfig::default(), 2).unwrap();
        let z = ae.encode_mean(&images).unwrap();
        assert_eq!(z.shape(), &[2, 4, 16, 16]);
        let out = ae.decode_images(&z, &masks).unwrap();
        assert_eq!(out.shape(), &[2, 1, 64, 64]);
        assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));

        for name in ["dec.spade16", "dec.spade32", "dec.spade64"] {
            let id = ae.store.find(&format!("{name}.gamma.weight")).unwrap();
            ae.store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.3);
        }
        let same = vec![masks[0].clone(), masks[0].clone()];
        let swapped = vec![masks[0].clone(), masks[1].clone()];
        let a = ae.decode_images(&z, &same).unwrap();
        let b = ae.decode_images(&z, &swapped).unwrap();
        let plane = 64 * 64;
        assert_eq!(a.values()[..plane], b.values()[..plane]);
        assert_ne!(a.values()[plane..], b.values()[plane..]);
        assert!(masks[0].contains(&VENTRICLE));
    }

    #[test]
    fn image_stack_round_trip_and_determinism() {
        let (vols, _) = build_corpus(CorpusKind::Balanced, 3, 4).unwrap();
        let (images, masks) = split_volumes(&vols).unwrap();
        let ae = ImageAutoencoder::new(ImageAeConfig::default(), 1).unwrap();
        let norm = LatentNorm::fit(&ae.encode_mean(&images).unwrap());
        let dm = SpadeDenoiser::new(ImageDmConfig::default(), 1).unwrap();
        let diffusion = DiffusionConfig {
            steps: 20,
            ..DiffusionConfig::default()
        };
        let stack = ImageStack::new(ae, dm, diffusion, norm).unwrap();
        let a = sample_image(&stack, &masks[0], 4, 9).unwrap();
        assert_eq!(a.shape(), &[1, 64, 64]);
        assert_eq!(a, sample_image(&stack, &masks[0], 4, 9).unwrap());
        let dir = tempfile::tempdir().unwrap();
        stack.save(dir.path()).unwrap();
        let back = ImageStack::load(dir.path()).unwrap();
        assert_eq!(back.meta, stack.meta);
        assert_eq!(a, sample_image(&back, &masks[0], 4, 9).unwrap());
        let batch = stack.sample(&masks[..2], 4, &[9, 10]).unwrap();
        assert_eq!(batch.values()[..4096], a.values()[..]);
    }
}
