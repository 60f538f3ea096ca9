//! First-stage generator: a variational label autoencoder and a latent
//! denoiser conditioned on the ventricle ratio through cross-attention.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vg_tensor::nn::{Conv2d, Embedding, GroupNorm};
use vg_tensor::{checkpoint, ParamStore, Tape, Tensor, Var};

use crate::blocks::{argmax_labels, timestep_features, CrossAttention, Mlp, ResBlock, NORM_GROUPS};
use crate::diffusion::{self, Condition, DiffusionConfig, LatentNorm, NoiseSchedule};
use crate::error::{Error, Result};
use crate::phantom::{compute_ratio, NUM_CLASSES};
use crate::rng::{self, Stream};
use crate::train::{self, gather, LossHistory, TrainConfig};

pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);
const CHUNK: usize = 32;

/// Mean over elements of `½(μ² + e^{logvar} − 1 − logvar)`.
pub fn kl_loss(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let s = tape.add(m2, ev)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, -1.0);
    let m = tape.mean(s);
    Ok(tape.scale(m, 0.5))
}

/// `z = μ + exp(logvar / 2)·ξ` with `ξ ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(tape: &mut Tape, mu: Var, logvar: Var, rng: &mut R) -> Result<Var> {
    let xi = Tensor::randn(tape.shape(mu), 1.0, rng);
    let xi = tape.leaf(xi);
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, xi)?;
    Ok(tape.add(mu, noise)?)
}

/// Mean per-pixel cross-entropy of `(n, classes, H, W)` logits.
pub fn ce_reconstruction_loss(tape: &mut Tape, logits: Var, masks: &[Vec<u8>]) -> Result<Var> {
    let targets: Vec<usize> = masks.iter().flatten().map(|&l| l as usize).collect();
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Ventricle ratio of a generated mask; zero when it has no brain pixels.
pub fn achieved_ratio(labels: &[u8]) -> f64 {
    compute_ratio(labels).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskAeConfig {
    pub grid: usize,
    pub embed_dim: usize,
    pub width: usize,
    pub latent_channels: usize,
    pub kl_weight: f64,
}

impl Default for MaskAeConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            embed_dim: 16,
            width: 32,
            latent_channels: 4,
            kl_weight: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
struct MaskAeNet {
    config: MaskAeConfig,
    embed: Embedding,
    enc1: Conv2d,
    enc2: Conv2d,
    enc_res: ResBlock,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: ResBlock,
    dec_up1: Conv2d,
    dec_up2: Conv2d,
    dec_out: Conv2d,
}

impl MaskAeNet {
    fn new(store: &mut ParamStore, config: MaskAeConfig, rng: &mut Stream) -> Self {
        let (e, w, lc) = (config.embed_dim, config.width, config.latent_channels);
        Self {
            config,
            embed: Embedding::new(store, "enc.embed", NUM_CLASSES, e, rng),
            enc1: Conv2d::new(store, "enc.down1", e, w / 2, 3, 2, rng),
            enc2: Conv2d::new(store, "enc.down2", w / 2, w, 3, 2, rng),
            enc_res: ResBlock::new(store, "enc.res", w, w, None, rng),
            enc_out: Conv2d::new(store, "enc.out", w, 2 * lc, 1, 1, rng),
            dec_in: Conv2d::new(store, "dec.in", lc, w, 3, 1, rng),
            dec_res: ResBlock::new(store, "dec.res", w, w, None, rng),
            dec_up1: Conv2d::new(store, "dec.up1", w, w / 2, 3, 1, rng),
            dec_up2: Conv2d::new(store, "dec.up2", w / 2, w / 4, 3, 1, rng),
            dec_out: Conv2d::new(store, "dec.out", w / 4, NUM_CLASSES, 3, 1, rng),
        }
    }

    fn encode(&self, tape: &mut Tape, store: &ParamStore, masks: &[Vec<u8>]) -> Result<(Var, Var)> {
        let g = self.config.grid;
        let labels: Vec<usize> = masks.iter().flatten().map(|&l| l as usize).collect();
        let h = self.embed.forward(tape, store, &labels, [masks.len(), g, g])?;
        let h = self.enc1.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.enc2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.enc_res.forward(tape, store, h, None)?;
        let h = self.enc_out.forward(tape, store, h)?;
        let lc = self.config.latent_channels;
        let mu = tape.narrow(h, 1, 0, lc)?;
        let logvar = tape.narrow(h, 1, lc, lc)?;
        let logvar = tape.clamp(logvar, LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        Ok((mu, logvar))
    }

    fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let h = self.dec_in.forward(tape, store, z)?;
        let h = self.dec_res.forward(tape, store, h, None)?;
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.dec_up1.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.dec_up2.forward(tape, store, h)?;
        let h = tape.silu(h);
        Ok(self.dec_out.forward(tape, store, h)?)
    }

    fn loss(&self, tape: &mut Tape, store: &ParamStore, masks: &[Vec<u8>], rng: &mut Stream) -> Result<Var> {
        let (mu, logvar) = self.encode(tape, store, masks)?;
        let z = reparameterize(tape, mu, logvar, rng)?;
        let logits = self.decode(tape, store, z)?;
        let ce = ce_reconstruction_loss(tape, logits, masks)?;
        let kl = kl_loss(tape, mu, logvar)?;
        let kl = tape.scale(kl, self.config.kl_weight);
        Ok(tape.add(ce, kl)?)
    }
}

/// Label autoencoder: `grid×grid` masks to `latent_channels × grid/4 × grid/4`.
#[derive(Debug, Clone)]
pub struct MaskAutoencoder {
    pub store: ParamStore,
    net: MaskAeNet,
}

impl MaskAutoencoder {
    pub fn new(config: MaskAeConfig, seed: u64) -> Result<Self> {
        if config.grid % 4 != 0 || config.width < 8 || config.width % 8 != 0 {
            return Err(Error::InvalidArgument(format!("unsupported mask autoencoder shape {config:?}")));
        }
        let mut store = ParamStore::new();
        let net = MaskAeNet::new(&mut store, config, &mut rng::stream(seed, "mask-ae-init"));
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &MaskAeConfig {
        &self.net.config
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let c = self.config();
        [c.latent_channels, c.grid / 4, c.grid / 4]
    }

    /// `(mu, logvar)` on `tape` for a batch of masks.
    pub fn encode(&self, tape: &mut Tape, masks: &[Vec<u8>]) -> Result<(Var, Var)> {
        self.net.encode(tape, &self.store, masks)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.net.decode(tape, &self.store, z)
    }

    /// Sampled latent with its `(mu, logvar)`.
    pub fn encode_reparameterize(&self, tape: &mut Tape, masks: &[Vec<u8>], rng: &mut Stream) -> Result<(Var, Var, Var)> {
        let (mu, logvar) = self.encode(tape, masks)?;
        let z = reparameterize(tape, mu, logvar, rng)?;
        Ok((z, mu, logvar))
    }

    /// Deterministic latents (`z = mu`), `(n, C, h, w)`.
    pub fn encode_mean(&self, masks: &[Vec<u8>]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in masks.chunks(CHUNK) {
            let mut tape = Tape::new();
            let (mu, _) = self.encode(&mut tape, chunk)?;
            parts.extend_from_slice(tape.values(mu));
        }
        let [c, h, w] = self.latent_shape();
        Ok(Tensor::new(&[masks.len(), c, h, w], parts)?)
    }

    /// Argmax label grids decoded from latents `(n, C, h, w)`.
    pub fn decode_labels(&self, z: &Tensor) -> Result<Vec<Vec<u8>>> {
        let n = z.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let zv = tape.leaf(gather(z, &idx));
            let logits = self.decode(&mut tape, zv)?;
            out.extend(argmax_labels(tape.value(logits)));
        }
        Ok(out)
    }

    pub fn reconstruct(&self, masks: &[Vec<u8>]) -> Result<Vec<Vec<u8>>> {
        self.decode_labels(&self.encode_mean(masks)?)
    }

    /// Cross-entropy plus weighted KL on `masks` with a fixed noise seed.
    pub fn probe_loss(&self, masks: &[Vec<u8>], seed: u64) -> Result<f64> {
        let mut rng = rng::stream(seed, "mask-ae-probe");
        let mut total = 0.0;
        for chunk in masks.chunks(CHUNK) {
            let mut tape = Tape::new();
            let loss = self.net.loss(&mut tape, &self.store, chunk, &mut rng)?;
            total += tape.values(loss)[0] * chunk.len() as f64;
        }
        Ok(total / masks.len() as f64)
    }

    pub fn train(&mut self, masks: &[Vec<u8>], config: &TrainConfig, seed: u64) -> Result<LossHistory> {
        let probe: Vec<Vec<u8>> = masks.iter().take(64).cloned().collect();
        let initial = self.probe_loss(&probe, seed)?;
        let mut rng = rng::stream(seed, "mask-ae-train");
        let net = &self.net;
        let mut history = train::run_epochs(
            "train-mask-ae",
            &mut self.store,
            masks.len(),
            config,
            &mut rng,
            |tape, store, idx, rng| {
                let batch: Vec<Vec<u8>> = idx.iter().map(|&i| masks[i].clone()).collect();
                net.loss(tape, store, &batch, rng)
            },
        )?;
        history.initial_probe = Some(initial);
        history.final_probe = Some(self.probe_loss(&probe, seed)?);
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }

    pub fn load(config: MaskAeConfig, path: &Path) -> Result<Self> {
        let mut ae = Self::new(config, 0)?;
        checkpoint::load_into(&mut ae.store, path)?;
        Ok(ae)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskDmConfig {
    pub latent_channels: usize,
    pub base: usize,
    pub emb_dim: usize,
    pub token_dim: usize,
    pub attn_width: usize,
    /// Probability of replacing a training condition by the unconditional one.
    pub dropout: f64,
}

impl Default for MaskDmConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base: 32,
            emb_dim: 64,
            token_dim: 32,
            attn_width: 32,
            dropout: 0.2,
        }
    }
}

const TIME_FEATURES: usize = 32;

#[derive(Debug, Clone)]
struct MaskDmNet {
    config: MaskDmConfig,
    time: Mlp,
    cond: Mlp,
    conv_in: Conv2d,
    res1: ResBlock,
    down: Conv2d,
    res2: ResBlock,
    attn: CrossAttention,
    res3: ResBlock,
    up: Conv2d,
    res4: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl MaskDmNet {
    fn new(store: &mut ParamStore, config: MaskDmConfig, rng: &mut Stream) -> Self {
        let (lc, b, e) = (config.latent_channels, config.base, config.emb_dim);
        Self {
            config,
            time: Mlp::new(store, "time", TIME_FEATURES, e, rng),
            cond: Mlp::new(store, "cond", 2, config.token_dim, rng),
            conv_in: Conv2d::new(store, "in", lc, b, 3, 1, rng),
            res1: ResBlock::new(store, "res1", b, b, Some(e), rng),
            down: Conv2d::new(store, "down", b, 2 * b, 3, 2, rng),
            res2: ResBlock::new(store, "res2", 2 * b, 2 * b, Some(e), rng),
            attn: CrossAttention::new(store, "attn", 2 * b, config.token_dim, config.attn_width, rng),
            res3: ResBlock::new(store, "res3", 2 * b, 2 * b, Some(e), rng),
            up: Conv2d::new(store, "up", 2 * b, b, 3, 1, rng),
            res4: ResBlock::new(store, "res4", 2 * b, b, Some(e), rng),
            norm_out: GroupNorm::new(store, "out.norm", b, NORM_GROUPS),
            conv_out: Conv2d::new(store, "out.conv", b, lc, 3, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ts: &[usize], conds: &[Condition]) -> Result<Var> {
        let n = ts.len();
        let tf = tape.leaf(timestep_features(ts, TIME_FEATURES));
        let temb = self.time.forward(tape, store, tf)?;
        let cf: Vec<f64> = conds.iter().flat_map(Condition::features).collect();
        let cf = tape.constant(&[n, 2], cf)?;
        let token = self.cond.forward(tape, store, cf)?;

        let h = self.conv_in.forward(tape, store, x)?;
        let skip = self.res1.forward(tape, store, h, Some(temb))?;
        let h = self.down.forward(tape, store, skip)?;
        let h = self.res2.forward(tape, store, h, Some(temb))?;
        let h = self.attn.forward(tape, store, h, token)?;
        let h = self.res3.forward(tape, store, h, Some(temb))?;
        let h = tape.upsample_nearest(h, 2)?;
        let h = self.up.forward(tape, store, h)?;
        let h = tape.concat(&[h, skip], 1)?;
        let h = self.res4.forward(tape, store, h, Some(temb))?;
        let h = self.norm_out.forward(tape, store, h)?;
        let h = tape.silu(h);
        Ok(self.conv_out.forward(tape, store, h)?)
    }
}

/// Two-level latent U-Net with a bottleneck cross-attention on the
/// `(c, unconditional)` token.
#[derive(Debug, Clone)]
pub struct MaskDenoiser {
    pub store: ParamStore,
    net: MaskDmNet,
}

impl MaskDenoiser {
    pub fn new(config: MaskDmConfig, seed: u64) -> Result<Self> {
        if config.base % NORM_GROUPS != 0 || !(0.0..=1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!("unsupported mask denoiser {config:?}")));
        }
        let mut store = ParamStore::new();
        let net = MaskDmNet::new(&mut store, config, &mut rng::stream(seed, "mask-dm-init"));
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &MaskDmConfig {
        &self.net.config
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, ts: &[usize], conds: &[Condition]) -> Result<Var> {
        self.net.forward(tape, &self.store, x, ts, conds)
    }

    /// Predicted noise for a latent batch at one timestep and condition.
    pub fn predict(&self, x: &Tensor, t: usize, cond: Condition) -> Result<Tensor> {
        self.predict_each(x, t, &vec![cond; x.shape()[0]])
    }

    /// Predicted noise with one condition per batch item.
    pub fn predict_each(&self, x: &Tensor, t: usize, conds: &[Condition]) -> Result<Tensor> {
        let n = x.shape()[0];
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, xv, &vec![t; n], conds)?;
        Ok(tape.value(out).clone())
    }

    /// Noise-regression loss at fixed seeded timesteps and noise.
    pub fn probe_loss(&self, latents: &Tensor, cs: &[f64], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
        let mut rng = rng::stream(seed, "mask-dm-probe");
        let n = latents.shape()[0];
        let mut total = 0.0;
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let x0 = gather(latents, &idx);
            let conds: Vec<Condition> = idx.iter().map(|&i| Condition::new(cs[i])).collect();
            let mut tape = Tape::new();
            let loss = diffusion::training_loss(
                &mut tape,
                |tape, x, ts, conds| self.forward(tape, x, ts, conds),
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

    /// Trains on standardized latents paired with condition values.
    pub fn train(
        &mut self,
        latents: &Tensor,
        cs: &[f64],
        diffusion_config: &DiffusionConfig,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<LossHistory> {
        let sched = diffusion_config.schedule()?;
        let n = latents.shape()[0];
        if cs.len() != n {
            return Err(Error::InvalidArgument(format!("{n} latents with {} conditions", cs.len())));
        }
        let probe_idx: Vec<usize> = (0..n.min(64)).collect();
        let probe = gather(latents, &probe_idx);
        let initial = self.probe_loss(&probe, cs, &sched, seed)?;
        let mut rng = rng::stream(seed, "mask-dm-train");
        let net = &self.net;
        let p = net.config.dropout;
        let weighting = diffusion_config.loss_weighting;
        let mut history = train::run_epochs("train-mask-dm", &mut self.store, n, config, &mut rng, |tape, store, idx, rng| {
            let x0 = gather(latents, idx);
            let conds: Vec<Condition> = idx
                .iter()
                .map(|&i| diffusion::condition_dropout(Condition::new(cs[i]), p, rng))
                .collect();
            diffusion::training_loss(
                tape,
                |tape, x, ts, conds| net.forward(tape, store, x, ts, conds),
                &x0,
                &conds,
                &sched,
                weighting,
                rng,
            )
        })?;
        history.initial_probe = Some(initial);
        history.final_probe = Some(self.probe_loss(&probe, cs, &sched, seed)?);
        Ok(history)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }

    pub fn load(config: MaskDmConfig, path: &Path) -> Result<Self> {
        let mut dm = Self::new(config, 0)?;
        checkpoint::load_into(&mut dm.store, path)?;
        Ok(dm)
    }
}

/// Settings persisted next to the two mask checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStackMeta {
    pub autoencoder: MaskAeConfig,
    pub denoiser: MaskDmConfig,
    pub diffusion: DiffusionConfig,
    /// Standardization fitted on the training latents.
    pub latent_norm: LatentNorm,
}

pub const MASK_AE_FILE: &str = "mask_ae.vgck";
pub const MASK_DM_FILE: &str = "mask_dm.vgck";
pub const MASK_META_FILE: &str = "mask_stack.json";

/// A trained autoencoder and denoiser pair, ready for sampling.
#[derive(Debug, Clone)]
pub struct MaskStack {
    pub autoencoder: MaskAutoencoder,
    pub denoiser: MaskDenoiser,
    pub meta: MaskStackMeta,
    schedule: NoiseSchedule,
}

impl MaskStack {
    pub fn new(autoencoder: MaskAutoencoder, denoiser: MaskDenoiser, diffusion: DiffusionConfig, latent_norm: LatentNorm) -> Result<Self> {
        let meta = MaskStackMeta {
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

    /// Trains the denoiser on mean latents of `masks` with a frozen
    /// autoencoder.
    pub fn train(
        autoencoder: MaskAutoencoder,
        masks: &[Vec<u8>],
        cs: &[f64],
        denoiser: MaskDmConfig,
        diffusion: DiffusionConfig,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<(Self, LossHistory)> {
        let latents = autoencoder.encode_mean(masks)?;
        let norm = LatentNorm::fit(&latents);
        let latents = norm.apply(&latents);
        let mut dm = MaskDenoiser::new(denoiser, seed)?;
        let history = dm.train(&latents, cs, &diffusion, config, seed)?;
        Ok((Self::new(autoencoder, dm, diffusion, norm)?, history))
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Initial latent noise for one item.
    fn initial_noise(&self, seed: u64) -> Tensor {
        diffusion::gaussian(&self.autoencoder.latent_shape(), &mut rng::stream(seed, "mask-latent"))
    }

    /// Samples one mask per seed at condition `c` and guidance `guidance`.
    pub fn sample(&self, c: f64, guidance: f64, steps: usize, seeds: &[u64]) -> Result<Vec<Vec<u8>>> {
        self.sample_each(&vec![c; seeds.len()], guidance, steps, seeds)
    }

    /// One mask per `(c, seed)` pair. Each item depends only on its own
    /// pair, whatever else shares the batch.
    pub fn sample_each(&self, cs: &[f64], guidance: f64, steps: usize, seeds: &[u64]) -> Result<Vec<Vec<u8>>> {
        if cs.len() != seeds.len() {
            return Err(Error::InvalidArgument(format!("{} conditions for {} seeds", cs.len(), seeds.len())));
        }
        if let Some(c) = cs.iter().find(|c| !(0.0..=1.5).contains(*c)) {
            return Err(Error::InvalidArgument(format!("condition {c} outside [0, 1.5]")));
        }
        if !(guidance >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance {guidance} must be non-negative")));
        }
        let mut out = Vec::with_capacity(seeds.len());
        for (cchunk, schunk) in cs.chunks(64).zip(seeds.chunks(64)) {
            let noise: Vec<Tensor> = schunk.iter().map(|&s| self.initial_noise(s)).collect();
            let z = diffusion::ddim_sample_from(
                |x, t, cond| {
                    let conds: Vec<Condition> = cchunk
                        .iter()
                        .map(|&c| {
                            if cond.unconditional {
                                Condition::unconditional(c)
                            } else {
                                Condition::new(c)
                            }
                        })
                        .collect();
                    self.denoiser.predict_each(x, t, &conds)
                },
                train::stack(&noise)?,
                &self.schedule,
                steps,
                Condition::new(cchunk[0]),
                guidance,
            )?;
            let z = self.meta.latent_norm.invert(&z);
            out.extend(self.autoencoder.decode_labels(&z)?);
        }
        Ok(out)
    }

    /// Samples masks and reports each one's ventricle ratio.
    pub fn sample_with_ratios(&self, c: f64, guidance: f64, steps: usize, seeds: &[u64]) -> Result<Vec<(Vec<u8>, f64)>> {
        Ok(self
            .sample(c, guidance, steps, seeds)?
            .into_iter()
            .map(|m| {
                let r = achieved_ratio(&m);
                (m, r)
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.autoencoder.save(&dir.join(MASK_AE_FILE))?;
        self.denoiser.save(&dir.join(MASK_DM_FILE))?;
        let meta = dir.join(MASK_META_FILE);
        std::fs::write(&meta, serde_json::to_string_pretty(&self.meta).expect("meta serializes")).map_err(Error::io(&meta))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(MASK_META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(Error::io(&meta_path))?;
        let meta: MaskStackMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: meta_path,
            msg: e.to_string(),
        })?;
        let ae = MaskAutoencoder::load(meta.autoencoder, &dir.join(MASK_AE_FILE))?;
        let dm = MaskDenoiser::load(meta.denoiser, &dir.join(MASK_DM_FILE))?;
        Self::new(ae, dm, meta.diffusion, meta.latent_norm)
    }
}
