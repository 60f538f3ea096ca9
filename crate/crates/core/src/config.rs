//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffusion::{DiffusionConfig, LossWeighting, SigmaMode};
use crate::error::{Error, Result};
use crate::image::{ImageAeConfig, ImageDmConfig};
use crate::mask::{MaskAeConfig, MaskDmConfig};
use crate::phantom::C_CLAMP;
use crate::pipeline::midpoints;
use crate::seg::SegConfig;
use crate::train::TrainConfig;

fn config_error(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// Text form of one config value.
trait Value: Sized {
    fn parse(key: &str, text: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(key: &str, text: &str) -> Result<Self> {
                text.parse().map_err(|e| config_error(key, format!("cannot parse `{text}`: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, f64, String);

impl Value for PathBuf {
    fn parse(_: &str, text: &str) -> Result<Self> {
        Ok(PathBuf::from(text))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Vec<f64> {
    fn parse(key: &str, text: &str) -> Result<Self> {
        text.split(',').map(|p| f64::parse(key, p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Value for SigmaMode {
    fn parse(key: &str, text: &str) -> Result<Self> {
        match text {
            "beta" => Ok(SigmaMode::Beta),
            "beta_tilde" => Ok(SigmaMode::BetaTilde),
            _ => Err(config_error(key, format!("`{text}` is not one of beta, beta_tilde"))),
        }
    }
    fn render(&self) -> String {
        match self {
            SigmaMode::Beta => "beta",
            SigmaMode::BetaTilde => "beta_tilde",
        }
        .into()
    }
}

impl Value for LossWeighting {
    fn parse(key: &str, text: &str) -> Result<Self> {
        match text {
            "simplified" => Ok(LossWeighting::Simplified),
            "eq2" => Ok(LossWeighting::Variational),
            _ => Err(config_error(key, format!("`{text}` is not one of simplified, eq2"))),
        }
    }
    fn render(&self) -> String {
        match self {
            LossWeighting::Simplified => "simplified",
            LossWeighting::Variational => "eq2",
        }
        .into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Mask-stack and image-pretraining corpus.
    pub balanced_n: usize,
    /// Pool for the real training corpus and image fine-tuning.
    pub skewed_n: usize,
    /// Enlarged-ventricle test set.
    pub test_n: usize,
}

/// Two-phase (pretrain, fine-tune) schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasedTraining {
    pub epochs_a: usize,
    pub epochs_b: usize,
    pub batch_size: usize,
    pub lr_a: f64,
    pub lr_b: f64,
}

impl PhasedTraining {
    pub fn phase_a(&self) -> TrainConfig {
        TrainConfig::new(self.epochs_a, self.batch_size, self.lr_a)
    }

    pub fn phase_b(&self) -> TrainConfig {
        TrainConfig::new(self.epochs_b, self.batch_size, self.lr_b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSettings {
    pub c: f64,
    pub guidance: f64,
    pub steps: usize,
    pub count: usize,
    /// Label grid file for single-image sampling; empty picks a test mask.
    pub mask_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub c_grid: Vec<f64>,
    pub guidances: Vec<f64>,
    pub per_point: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub pairs: usize,
    pub ssim_window: usize,
    pub ms_ssim_scales: usize,
}

/// Every tunable of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Multiplies every synthetic and composed corpus size.
    pub scale: f64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub mask_ae: MaskAeConfig,
    pub mask_ae_train: TrainConfig,
    pub mask_dm: MaskDmConfig,
    pub mask_dm_train: TrainConfig,
    pub image_ae: ImageAeConfig,
    pub image_ae_train: PhasedTraining,
    pub image_dm: ImageDmConfig,
    pub image_dm_train: PhasedTraining,
    pub sample: SampleSettings,
    pub sweep: SweepSettings,
    pub synth_steps: usize,
    pub seg: SegConfig,
    pub seg_train: TrainConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.5,
            out: PathBuf::from("runs"),
            data: DataConfig {
                balanced_n: 2000,
                skewed_n: 1000,
                test_n: 200,
            },
            diffusion: DiffusionConfig::default(),
            mask_ae: MaskAeConfig::default(),
            mask_ae_train: TrainConfig::new(2, 16, 2e-3),
            mask_dm: MaskDmConfig::default(),
            mask_dm_train: TrainConfig::new(30, 16, 2e-3),
            image_ae: ImageAeConfig::default(),
            image_ae_train: PhasedTraining {
                epochs_a: 3,
                epochs_b: 2,
                batch_size: 16,
                lr_a: 2e-3,
                lr_b: 1e-3,
            },
            image_dm: ImageDmConfig::default(),
            image_dm_train: PhasedTraining {
                epochs_a: 6,
                epochs_b: 3,
                batch_size: 16,
                lr_a: 2e-3,
                lr_b: 1e-3,
            },
            sample: SampleSettings {
                c: 0.5,
                guidance: 4.0,
                steps: 50,
                count: 1,
                mask_file: String::new(),
            },
            sweep: SweepSettings {
                c_grid: midpoints(1.3, 0.1),
                guidances: vec![1.0, 2.0, 3.0, 4.0, 5.0],
                per_point: 50,
                steps: 50,
            },
            synth_steps: 50,
            seg: SegConfig::default(),
            seg_train: TrainConfig::new(30, 8, 1e-3),
            eval: EvalSettings {
                pairs: 500,
                ssim_window: 7,
                ms_ssim_scales: 3,
            },
        }
    }
}

macro_rules! fields {
    ($($key:literal => $($path:ident).+),* $(,)?) => {
        /// Every accepted key, in snapshot order.
        pub const KEYS: &'static [&'static str] = &[$($key),*];

        fn set_raw(&mut self, key: &str, text: &str) -> Result<()> {
            match key {
                $($key => self.$($path).+ = Value::parse(key, text)?,)*
                _ => return Err(config_error(key, "unknown key")),
            }
            Ok(())
        }

        /// `(key, value)` pairs in snapshot order.
        pub fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$(($key, self.$($path).+.render())),*]
        }
    };
}

impl ExperimentConfig {
    fields! {
        "seed" => seed,
        "scale" => scale,
        "out" => out,
        "data.balanced_n" => data.balanced_n,
        "data.skewed_n" => data.skewed_n,
        "data.test_n" => data.test_n,
        "diffusion.T" => diffusion.steps,
        "diffusion.beta_start" => diffusion.beta_start,
        "diffusion.beta_end" => diffusion.beta_end,
        "diffusion.sigma_mode" => diffusion.sigma_mode,
        "diffusion.loss_weighting" => diffusion.loss_weighting,
        "mask_ae.embed_dim" => mask_ae.embed_dim,
        "mask_ae.width" => mask_ae.width,
        "mask_ae.latent_channels" => mask_ae.latent_channels,
        "mask_ae.kl_weight" => mask_ae.kl_weight,
        "mask_ae.epochs" => mask_ae_train.epochs,
        "mask_ae.batch_size" => mask_ae_train.batch_size,
        "mask_ae.lr" => mask_ae_train.lr,
        "mask_dm.base" => mask_dm.base,
        "mask_dm.emb_dim" => mask_dm.emb_dim,
        "mask_dm.token_dim" => mask_dm.token_dim,
        "mask_dm.attn_width" => mask_dm.attn_width,
        "mask_dm.dropout" => mask_dm.dropout,
        "mask_dm.epochs" => mask_dm_train.epochs,
        "mask_dm.batch_size" => mask_dm_train.batch_size,
        "mask_dm.lr" => mask_dm_train.lr,
        "image.width" => image_ae.width,
        "image.latent_channels" => image_ae.latent_channels,
        "image.spade_hidden" => image_ae.spade_hidden,
        "image.disc_width" => image_ae.disc_width,
        "image.kl_weight" => image_ae.kl_weight,
        "image.lambda_adv" => image_ae.lambda_adv,
        "image.epochs_a" => image_ae_train.epochs_a,
        "image.epochs_b" => image_ae_train.epochs_b,
        "image.batch_size" => image_ae_train.batch_size,
        "image.lr_a" => image_ae_train.lr_a,
        "image.lr_b" => image_ae_train.lr_b,
        "image_dm.base" => image_dm.base,
        "image_dm.emb_dim" => image_dm.emb_dim,
        "image_dm.spade_hidden" => image_dm.spade_hidden,
        "image_dm.epochs_a" => image_dm_train.epochs_a,
        "image_dm.epochs_b" => image_dm_train.epochs_b,
        "image_dm.batch_size" => image_dm_train.batch_size,
        "image_dm.lr_a" => image_dm_train.lr_a,
        "image_dm.lr_b" => image_dm_train.lr_b,
        "sample.c" => sample.c,
        "sample.guidance" => sample.guidance,
        "sample.steps" => sample.steps,
        "sample.count" => sample.count,
        "sample.mask_file" => sample.mask_file,
        "sweep.c_grid" => sweep.c_grid,
        "sweep.guidances" => sweep.guidances,
        "sweep.per_point" => sweep.per_point,
        "sweep.steps" => sweep.steps,
        "synth.steps" => synth_steps,
        "seg.base" => seg.base,
        "seg.epochs" => seg_train.epochs,
        "seg.batch_size" => seg_train.batch_size,
        "seg.lr" => seg_train.lr,
        "eval.pairs" => eval.pairs,
        "eval.ssim_window" => eval.ssim_window,
        "eval.ms_ssim_scales" => eval.ms_ssim_scales,
    }

    /// Applies `key = value` pairs on top of `self`, then validates.
    pub fn with_overrides<'a>(mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        for (k, v) in pairs {
            self.set_raw(k, v)?;
        }
        self.sync();
        self.validate()?;
        Ok(self)
    }

    /// Parses config text: one `key = value` per line, `#` comments.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_error(&format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k) {
                return Err(config_error(k, "given more than once"));
            }
            pairs.push((k, v));
        }
        Self::default().with_overrides(pairs)
    }

    /// Canonical snapshot text; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the snapshot text without `out`, so a rerun in another
    /// directory keeps its hash.
    pub fn hash(&self) -> String {
        let body: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k != "out")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies shared settings into the nested model configs.
    fn sync(&mut self) {
        self.mask_dm.latent_channels = self.mask_ae.latent_channels;
        self.image_dm.latent_channels = self.image_ae.latent_channels;
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(config_error(key, msg)) };
        let unit = |v: f64| v > 0.0 && v < 1.0;
        let lr = |v: f64| v > 0.0 && v.is_finite();
        check(self.scale > 0.0 && self.scale <= 1.0, "scale", "must lie in (0, 1]")?;
        check(self.data.balanced_n >= 10, "data.balanced_n", "must be at least 10")?;
        check(self.data.skewed_n >= 10, "data.skewed_n", "must be at least 10")?;
        check(self.data.test_n >= 1, "data.test_n", "must be at least 1")?;
        let d = &self.diffusion;
        check((1..=10_000).contains(&d.steps), "diffusion.T", "must lie in [1, 10000]")?;
        check(unit(d.beta_start), "diffusion.beta_start", "must lie in (0, 1)")?;
        check(unit(d.beta_end), "diffusion.beta_end", "must lie in (0, 1)")?;
        check(
            d.beta_start <= d.beta_end,
            "diffusion.beta_end",
            "must not be below diffusion.beta_start",
        )?;
        for (key, v) in [
            ("mask_ae.kl_weight", self.mask_ae.kl_weight),
            ("image.kl_weight", self.image_ae.kl_weight),
            ("image.lambda_adv", self.image_ae.lambda_adv),
        ] {
            check(v >= 0.0 && v.is_finite(), key, "must be a finite non-negative number")?;
        }
        check((0.0..=1.0).contains(&self.mask_dm.dropout), "mask_dm.dropout", "must lie in [0, 1]")?;
        for (key, v) in [
            ("mask_ae.lr", self.mask_ae_train.lr),
            ("mask_dm.lr", self.mask_dm_train.lr),
            ("image.lr_a", self.image_ae_train.lr_a),
            ("image.lr_b", self.image_ae_train.lr_b),
            ("image_dm.lr_a", self.image_dm_train.lr_a),
            ("image_dm.lr_b", self.image_dm_train.lr_b),
            ("seg.lr", self.seg_train.lr),
        ] {
            check(lr(v), key, "must be a positive finite learning rate")?;
        }
        for (key, v) in [
            ("mask_ae.batch_size", self.mask_ae_train.batch_size),
            ("mask_dm.batch_size", self.mask_dm_train.batch_size),
            ("image.batch_size", self.image_ae_train.batch_size),
            ("image_dm.batch_size", self.image_dm_train.batch_size),
            ("seg.batch_size", self.seg_train.batch_size),
            ("sample.count", self.sample.count),
            ("sweep.per_point", self.sweep.per_point),
            ("eval.pairs", self.eval.pairs),
            ("eval.ms_ssim_scales", self.eval.ms_ssim_scales),
            ("mask_ae.latent_channels", self.mask_ae.latent_channels),
            ("image.latent_channels", self.image_ae.latent_channels),
        ] {
            check(v >= 1, key, "must be at least 1")?;
        }
        for (key, v) in [
            ("mask_ae.width", self.mask_ae.width),
            ("mask_dm.base", self.mask_dm.base),
            ("image.width", self.image_ae.width),
            ("image_dm.base", self.image_dm.base),
            ("seg.base", self.seg.base),
        ] {
            check(v >= 8 && v % 8 == 0, key, "must be a positive multiple of 8")?;
        }
        for (key, v) in [
            ("sample.steps", self.sample.steps),
            ("sweep.steps", self.sweep.steps),
            ("synth.steps", self.synth_steps),
        ] {
            check(v >= 1 && v <= d.steps, key, "must lie in [1, diffusion.T]")?;
        }
        let in_clamp = |c: &f64| (C_CLAMP.0..=C_CLAMP.1).contains(c);
        check(in_clamp(&self.sample.c), "sample.c", "must lie in [0, 1.5]")?;
        check(
            !self.sweep.c_grid.is_empty() && self.sweep.c_grid.iter().all(in_clamp),
            "sweep.c_grid",
            "needs values in [0, 1.5]",
        )?;
        let guidance = |g: &f64| *g >= 0.0 && g.is_finite();
        check(guidance(&self.sample.guidance), "sample.guidance", "must be non-negative")?;
        check(
            !self.sweep.guidances.is_empty() && self.sweep.guidances.iter().all(guidance),
            "sweep.guidances",
            "needs non-negative values",
        )?;
        check(
            self.eval.ssim_window >= 3 && self.eval.ssim_window % 2 == 1,
            "eval.ssim_window",
            "must be odd and at least 3",
        )?;
        Ok(())
    }
}

/// Loads `path` (defaults when `None`) and applies `overrides` on top.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::parse_str(&std::fs::read_to_string(p).map_err(Error::io(p))?)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}
