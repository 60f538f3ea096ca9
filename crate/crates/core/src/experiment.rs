//! Pipeline stages over an output directory, one per subcommand.
//!
//! Each stage reads the artifacts of earlier stages from a fixed layout,
//! writes its own, and is logged to `runs.jsonl` with the hash of the
//! resolved config.

use std::fmt::{self, Write as _};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use vg_tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::dataset::{load_split, read_dataset, split_and_persist, write_dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::{split_volumes, ImageAutoencoder, ImageStack, PatchDiscriminator};
use crate::mask::{achieved_ratio, MaskAutoencoder, MaskStack};
use crate::metrics::{
    evaluate_all, frechet_distance, pairwise_diversity, FeatureExtractor, GeneratorQuality, MetricsReport, SsimParams, FEATURE_DIM,
};
use crate::phantom::{build_corpus, CorpusKind, LabeledVolume, Modality};
use crate::pipeline::{
    build_bucketed_dataset, compose_datasets, generate_pair, guidance_sweep, sweep_csv, synthesis_plan, GenerationRequest, Generators,
    Provenance, SweepConfig, SyntheticDataset, TrainingSet,
};
use crate::rng::derive_seed;
use crate::seg::Segmenter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    GenData,
    TrainMaskAe,
    TrainMaskDm,
    TrainImageAe,
    TrainImageDm,
    Sweep,
    Synthesize,
    Compose,
    TrainSeg,
    Evaluate,
    Report,
    SampleMask,
    SampleImage,
}

impl Subcommand {
    pub const ALL: [Subcommand; 13] = [
        Subcommand::GenData,
        Subcommand::TrainMaskAe,
        Subcommand::TrainMaskDm,
        Subcommand::TrainImageAe,
        Subcommand::TrainImageDm,
        Subcommand::Sweep,
        Subcommand::Synthesize,
        Subcommand::Compose,
        Subcommand::TrainSeg,
        Subcommand::Evaluate,
        Subcommand::Report,
        Subcommand::SampleMask,
        Subcommand::SampleImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::GenData => "gen-data",
            Subcommand::TrainMaskAe => "train-mask-ae",
            Subcommand::TrainMaskDm => "train-mask-dm",
            Subcommand::TrainImageAe => "train-image-ae",
            Subcommand::TrainImageDm => "train-image-dm",
            Subcommand::Sweep => "sweep",
            Subcommand::Synthesize => "synthesize",
            Subcommand::Compose => "compose",
            Subcommand::TrainSeg => "train-seg",
            Subcommand::Evaluate => "evaluate",
            Subcommand::Report => "report",
            Subcommand::SampleMask => "sample-mask",
            Subcommand::SampleImage => "sample-image",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subcommand `{s}`")))
    }
}

/// Segmenter names, one per training corpus.
pub const SEG_MODELS: [&str; 3] = ["seg_real", "seg_syn", "seg_aug"];

/// Artifact paths under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn balanced(&self) -> PathBuf {
        self.at("data/balanced.json")
    }
    pub fn skewed(&self) -> PathBuf {
        self.at("data/skewed.json")
    }
    pub fn test(&self) -> PathBuf {
        self.at("data/test.json")
    }
    pub fn mask_ae(&self) -> PathBuf {
        self.at("models/mask_ae.vgck")
    }
    pub fn mask_stack(&self) -> PathBuf {
        self.at("models/mask_stack")
    }
    pub fn image_ae(&self) -> PathBuf {
        self.at("models/image_ae.vgck")
    }
    pub fn image_disc(&self) -> PathBuf {
        self.at("models/image_disc.vgck")
    }
    pub fn image_stack(&self) -> PathBuf {
        self.at("models/image_stack")
    }
    pub fn sweep(&self) -> PathBuf {
        self.at("sweep")
    }
    pub fn synthetic(&self) -> PathBuf {
        self.at("synth/d_syn")
    }
    pub fn composed(&self, name: &str) -> PathBuf {
        self.at(&format!("compose/{name}"))
    }
    pub fn segmenter(&self, name: &str) -> PathBuf {
        self.at(&format!("models/{name}.vgck"))
    }
    pub fn report(&self) -> PathBuf {
        self.at("report")
    }
    pub fn samples(&self) -> PathBuf {
        self.at("samples")
    }
    pub fn runs(&self) -> PathBuf {
        self.at("runs.jsonl")
    }
    pub fn snapshot(&self, sub: Subcommand) -> PathBuf {
        self.at(&format!("config/{sub}.conf"))
    }

    /// `path` relative to the root when it lies below it.
    pub fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }
}

/// One line of the append-only run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub subcommand: String,
    pub config_hash: String,
    pub started_ms: u128,
    pub finished_ms: u128,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    /// `None` on success.
    pub error: Option<String>,
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
        })
        .collect()
}

fn append_run(path: &Path, record: &RunRecord) -> Result<()> {
    ensure_parent(path)?;
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(Error::io(path))?;
    let line = serde_json::to_string(record).expect("run record serializes");
    writeln!(f, "{line}").map_err(Error::io(path))
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(Error::io(dir)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, body: &str) -> Result<PathBuf> {
    ensure_parent(path)?;
    std::fs::write(path, body).map_err(Error::io(path))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    write_text(path, &serde_json::to_string_pretty(value).expect("value serializes"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn require(path: &Path, step: Subcommand) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            step: step.name().into(),
        })
    }
}

fn stage_seed(cfg: &ExperimentConfig, label: &str) -> u64 {
    derive_seed(cfg.seed, label, 0)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// All samples of a persisted corpus in manifest order.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<LabeledVolume>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    read_dataset(&manifest.data_path(manifest_path))
}

fn masks_of(volumes: &[LabeledVolume]) -> Vec<Vec<u8>> {
    volumes.iter().map(|v| v.labels.clone()).collect()
}

pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (kind, n, path, label) in [
        (CorpusKind::Balanced, cfg.data.balanced_n, layout.balanced(), "data-balanced"),
        (CorpusKind::Skewed, cfg.data.skewed_n, layout.skewed(), "data-skewed"),
        (CorpusKind::Enlarged, cfg.data.test_n, layout.test(), "data-test"),
    ] {
        let seed = stage_seed(cfg, label);
        let (volumes, bounds) = build_corpus(kind, n, seed)?;
        ensure_parent(&path)?;
        split_and_persist(&volumes, bounds, &path, seed)?;
        out.push(path.with_extension("vgds"));
        out.push(path);
    }
    Ok(out)
}

pub fn train_mask_ae(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    require(&layout.balanced(), Subcommand::GenData)?;
    let (_, train, _) = load_split(&layout.balanced())?;
    let seed = stage_seed(cfg, "mask-ae");
    let mut ae = MaskAutoencoder::new(cfg.mask_ae, seed)?;
    let history = ae.train(&masks_of(&train), &cfg.mask_ae_train, seed)?;
    let path = layout.mask_ae();
    ensure_parent(&path)?;
    ae.save(&path)?;
    Ok(vec![
        path.clone(),
        write_json(&sidecar(&path, ".json"), &cfg.mask_ae)?,
        write_json(&sidecar(&path, "_history.json"), &history)?,
    ])
}

pub fn load_mask_stack(layout: &Layout) -> Result<MaskStack> {
    require(&layout.mask_stack(), Subcommand::TrainMaskDm)?;
    MaskStack::load(&layout.mask_stack())
}

pub fn load_image_stack(layout: &Layout) -> Result<ImageStack> {
    require(&layout.image_stack(), Subcommand::TrainImageDm)?;
    ImageStack::load(&layout.image_stack())
}

pub fn train_mask_dm(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    require(&layout.mask_ae(), Subcommand::TrainMaskAe)?;
    let ae = MaskAutoencoder::load(read_json(&sidecar(&layout.mask_ae(), ".json"))?, &layout.mask_ae())?;
    let (_, train, _) = load_split(&layout.balanced())?;
    let cs: Vec<f64> = train.iter().map(|v| v.c).collect();
    let (stack, history) = MaskStack::train(
        ae,
        &masks_of(&train),
        &cs,
        cfg.mask_dm,
        cfg.diffusion,
        &cfg.mask_dm_train,
        stage_seed(cfg, "mask-dm"),
    )?;
    let dir = layout.mask_stack();
    stack.save(&dir)?;
    Ok(vec![dir.clone(), write_json(&dir.join("history.json"), &history)?])
}

fn phase_corpora(layout: &Layout) -> Result<(Vec<LabeledVolume>, Vec<LabeledVolume>)> {
    require(&layout.balanced(), Subcommand::GenData)?;
    require(&layout.skewed(), Subcommand::GenData)?;
    Ok((load_split(&layout.balanced())?.1, load_split(&layout.skewed())?.1))
}

pub fn train_image_ae(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let (a, b) = phase_corpora(layout)?;
    let seed = stage_seed(cfg, "image-ae");
    let mut ae = ImageAutoencoder::new(cfg.image_ae, seed)?;
    let mut disc = PatchDiscriminator::new(cfg.image_ae.disc_width, seed);
    let (images_a, masks_a) = split_volumes(&a)?;
    let (images_b, masks_b) = split_volumes(&b)?;
    let ha = ae.train(
        &mut disc,
        &images_a,
        &masks_a,
        &cfg.image_ae_train.phase_a(),
        seed,
        "train-image-ae-a",
    )?;
    let hb = ae.train(
        &mut disc,
        &images_b,
        &masks_b,
        &cfg.image_ae_train.phase_b(),
        seed,
        "train-image-ae-b",
    )?;
    let path = layout.image_ae();
    ensure_parent(&path)?;
    ae.save(&path)?;
    vg_tensor::checkpoint::save(&disc.store, &layout.image_disc())?;
    Ok(vec![
        path.clone(),
        layout.image_disc(),
        write_json(&sidecar(&path, ".json"), &cfg.image_ae)?,
        write_json(&sidecar(&path, "_history.json"), &[ha, hb])?,
    ])
}

pub fn train_image_dm(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    require(&layout.image_ae(), Subcommand::TrainImageAe)?;
    let ae = ImageAutoencoder::load(read_json(&sidecar(&layout.image_ae(), ".json"))?, &layout.image_ae())?;
    let (a, b) = phase_corpora(layout)?;
    let (stack, history) = ImageStack::train(
        ae,
        &a,
        &b,
        cfg.image_dm,
        cfg.diffusion,
        &cfg.image_dm_train.phase_a(),
        &cfg.image_dm_train.phase_b(),
        stage_seed(cfg, "image-dm"),
    )?;
    let dir = layout.image_stack();
    stack.save(&dir)?;
    Ok(vec![dir.clone(), write_json(&dir.join("history.json"), &history)?])
}

pub fn sweep(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let stack = load_mask_stack(layout)?;
    let (_, _, val) = load_split(&layout.balanced())?;
    let references: Vec<(f64, Vec<u8>)> = val.into_iter().map(|v| (v.c, v.labels)).collect();
    let sweep_cfg = SweepConfig {
        c_grid: cfg.sweep.c_grid.clone(),
        guidances: cfg.sweep.guidances.clone(),
        per_point: cfg.sweep.per_point,
        steps: cfg.sweep.steps,
        seed: stage_seed(cfg, "sweep"),
    };
    let rows = guidance_sweep(&stack, &sweep_cfg, &references)?;
    let dir = layout.sweep();
    Ok(vec![
        write_text(&dir.join("sweep.csv"), &sweep_csv(&rows))?,
        write_json(&dir.join("sweep.json"), &rows)?,
    ])
}

pub fn synthesize(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let mask = load_mask_stack(layout)?;
    let image = load_image_stack(layout)?;
    let plan = synthesis_plan(cfg.scale)?;
    let data = build_bucketed_dataset(
        Generators {
            mask: &mask,
            image: &image,
        },
        &plan,
        cfg.synth_steps,
        stage_seed(cfg, "synthesize"),
    )?;
    let stem = layout.synthetic();
    ensure_parent(&stem)?;
    data.save(&stem)?;
    Ok(vec![
        stem.with_extension("vgds"),
        stem.with_extension("json"),
        write_json(&sidecar(&stem, "_plan.json"), &plan)?,
    ])
}

fn save_training_set(set: &TrainingSet, stem: &Path) -> Result<Vec<PathBuf>> {
    ensure_parent(stem)?;
    write_dataset(&stem.with_extension("vgds"), &set.volumes)?;
    Ok(vec![
        stem.with_extension("vgds"),
        write_json(&stem.with_extension("json"), &set.provenance)?,
    ])
}

fn load_training_set(stem: &Path) -> Result<TrainingSet> {
    require(&stem.with_extension("vgds"), Subcommand::Compose)?;
    let volumes = read_dataset(&stem.with_extension("vgds"))?;
    let provenance: Vec<Provenance> = read_json(&stem.with_extension("json"))?;
    Ok(TrainingSet { volumes, provenance })
}

pub fn compose(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    require(&layout.synthetic().with_extension("vgds"), Subcommand::Synthesize)?;
    require(&layout.skewed(), Subcommand::GenData)?;
    let syn = SyntheticDataset::load(&layout.synthetic())?;
    let (_, pool, _) = load_split(&layout.skewed())?;
    let sets = compose_datasets(&pool, &syn, cfg.scale, stage_seed(cfg, "compose"))?;
    let mut out = vec![write_json(&layout.composed("composition.json"), &sets.composition)?];
    for (name, set) in [("d_real", &sets.real), ("d_syn", &sets.syn), ("d_aug", &sets.aug)] {
        out.extend(save_training_set(set, &layout.composed(name))?);
    }
    Ok(out)
}

pub fn train_seg(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let seed = stage_seed(cfg, "segmenter");
    let mut out = Vec::new();
    let mut histories = Vec::new();
    for (model, set) in SEG_MODELS.iter().zip(["d_real", "d_syn", "d_aug"]) {
        let data = load_training_set(&layout.composed(set))?;
        let (images, masks) = split_volumes(&data.volumes)?;
        let mut seg = Segmenter::new(cfg.seg, seed)?;
        histories.push(seg.train(&images, &masks, &cfg.seg_train, seed)?);
        let path = layout.segmenter(model);
        ensure_parent(&path)?;
        seg.save(&path)?;
        out.push(path);
    }
    out.push(write_json(&layout.segmenter("seg_history").with_extension("json"), &histories)?);
    Ok(out)
}

/// SSIM / MS-SSIM diversity of the synthetic images and the Fréchet
/// distance between synthetic and real feature sets.
pub fn generator_quality(cfg: &ExperimentConfig, synthetic: &Tensor, real: &Tensor) -> Result<GeneratorQuality> {
    let params = SsimParams {
        window: cfg.eval.ssim_window,
        ..SsimParams::default()
    };
    let seed = stage_seed(cfg, "generator-quality");
    let (ssim, ms_ssim) = pairwise_diversity(synthetic, cfg.eval.pairs, &params, cfg.eval.ms_ssim_scales, seed)?;
    let extractor = FeatureExtractor::new(seed);
    let frechet = if synthetic.shape()[0] > FEATURE_DIM && real.shape()[0] > FEATURE_DIM {
        Some(frechet_distance(&extractor.features(synthetic)?, &extractor.features(real)?)?)
    } else {
        None
    };
    Ok(GeneratorQuality { ssim, ms_ssim, frechet })
}

pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    require(&layout.test(), Subcommand::GenData)?;
    let test = load_corpus(&layout.test())?;
    let (images, gts) = split_volumes(&test)?;
    let mut preds = Vec::new();
    for model in SEG_MODELS {
        let path = layout.segmenter(model);
        require(&path, Subcommand::TrainSeg)?;
        preds.push((model.to_string(), Segmenter::load(cfg.seg, &path)?.predict(&images)?));
    }
    let mut report = evaluate_all(&preds, &gts)?;
    if layout.synthetic().with_extension("vgds").exists() && layout.composed("d_real").with_extension("vgds").exists() {
        let syn = SyntheticDataset::load(&layout.synthetic())?;
        let real = load_training_set(&layout.composed("d_real"))?;
        let (syn_images, _) = split_volumes(&syn.volumes)?;
        let (real_images, _) = split_volumes(&real.volumes)?;
        report.generator = Some(generator_quality(cfg, &syn_images, &real_images)?);
    }
    let dir = layout.report();
    report.write(&dir)?;
    Ok(["metrics.csv", "metrics.json", "volumes.csv"].iter().map(|f| dir.join(f)).collect())
}

/// Markdown summary of the metrics report (when present) and the logged
/// runs; timestamps are left out so identical runs give identical text.
pub fn report(_cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let runs = read_runs(&layout.runs())?;
    let metrics_path = layout.report().join("metrics.json");
    let metrics: Option<MetricsReport> = if metrics_path.exists() {
        Some(read_json(&metrics_path)?)
    } else {
        None
    };
    let mut md = String::from("# Run report\n");
    if let Some(m) = &metrics {
        md.push_str("\n| model | Dice | IoU | volume MAE | volume MSE | volume error |\n|---|---|---|---|---|---|\n");
        for (name, mm) in &m.models {
            let pm = |(a, b): (f64, f64)| format!("{a:.4} ± {b:.4}");
            let _ = writeln!(
                md,
                "| {name} | {} | {} | {} | {} | {} |",
                pm(mm.dice),
                pm(mm.iou),
                pm(mm.volume_mae),
                pm(mm.volume_mse),
                pm(mm.volume_error)
            );
        }
        if let Some(g) = &m.generator {
            let frechet = g.frechet.map(|f| format!("{f:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(
                md,
                "\nSynthetic diversity: SSIM {:.4}, MS-SSIM {:.4}; Fréchet distance to real {frechet}",
                g.ssim, g.ms_ssim
            );
        }
    }
    let _ = writeln!(md, "\n{} logged runs\n", runs.len());
    for r in &runs {
        let status = r.error.as_deref().unwrap_or("ok");
        let _ = writeln!(
            md,
            "- {} [{}] {}: {} artifacts",
            r.subcommand,
            &r.config_hash[..12.min(r.config_hash.len())],
            status,
            r.artifacts.len()
        );
    }
    Ok(vec![write_text(&layout.report().join("report.md"), &md)?])
}

/// A sampled mask and the request that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSample {
    pub c: f64,
    pub guidance: f64,
    pub seed: u64,
    pub achieved_ratio: f64,
    pub labels: Vec<u8>,
}

pub fn sample_mask(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let stack = load_mask_stack(layout)?;
    let s = &cfg.sample;
    let seeds: Vec<u64> = (0..s.count as u64).map(|i| derive_seed(cfg.seed, "item", i)).collect();
    let masks = stack.sample(s.c, s.guidance, s.steps, &seeds)?;
    let g = stack.autoencoder.config().grid;
    let dir = layout.samples();
    let mut out = Vec::new();
    let mut samples = Vec::new();
    for (i, (labels, seed)) in masks.into_iter().zip(seeds).enumerate() {
        out.push(write_pgm(
            &dir.join(format!("mask_{i:03}.pgm")),
            &labels.iter().map(|&l| f64::from(l) / 2.0).collect::<Vec<_>>(),
            g,
        )?);
        samples.push(MaskSample {
            c: s.c,
            guidance: s.guidance,
            seed,
            achieved_ratio: achieved_ratio(&labels),
            labels,
        });
    }
    out.insert(0, write_json(&dir.join("masks.json"), &samples)?);
    Ok(out)
}

pub fn sample_image(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let stack = load_image_stack(layout)?;
    let masks: Vec<Vec<u8>> = if cfg.sample.mask_file.is_empty() {
        require(&layout.test(), Subcommand::GenData)?;
        masks_of(&load_corpus(&layout.test())?).into_iter().take(cfg.sample.count).collect()
    } else {
        let path = PathBuf::from(&cfg.sample.mask_file);
        let samples: Vec<MaskSample> = read_json(&path)?;
        samples.into_iter().map(|m| m.labels).collect()
    };
    if masks.is_empty() {
        return Err(Error::InvalidArgument("no masks to condition on".into()));
    }
    let seeds: Vec<u64> = (0..masks.len() as u64).map(|i| derive_seed(cfg.seed, "image", i)).collect();
    let images = stack.sample(&masks, cfg.sample.steps, &seeds)?;
    let g = stack.autoencoder.config().grid;
    let dir = layout.samples();
    let volumes: Vec<LabeledVolume> = masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(LabeledVolume {
                image: Tensor::new(&[1, g, g], images.values()[i * g * g..(i + 1) * g * g].to_vec())?,
                labels: m.clone(),
                height: g,
                width: g,
                modality: Modality::B,
                raw_ratio: achieved_ratio(m),
                c: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    write_dataset(&dir.join("images.vgds"), &volumes)?;
    let mut out = vec![dir.join("images.vgds")];
    for (i, v) in volumes.iter().enumerate() {
        out.push(write_pgm(&dir.join(format!("image_{i:03}.pgm")), v.image.values(), g)?);
    }
    Ok(out)
}

/// 8-bit binary PGM of a square `[0, 1]` image.
fn write_pgm(path: &Path, pixels: &[f64], side: usize) -> Result<PathBuf> {
    ensure_parent(path)?;
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(Error::io(path))?;
    Ok(path.to_path_buf())
}

/// Single-condition pairs through both stacks; see [`generate_pair`].
pub fn generate(layout: &Layout, request: &GenerationRequest) -> Result<SyntheticDataset> {
    let mask = load_mask_stack(layout)?;
    let image = load_image_stack(layout)?;
    generate_pair(
        Generators {
            mask: &mask,
            image: &image,
        },
        request,
    )
}

fn run_stage(sub: Subcommand, cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    match sub {
        Subcommand::GenData => gen_data(cfg, layout),
        Subcommand::TrainMaskAe => train_mask_ae(cfg, layout),
        Subcommand::TrainMaskDm => train_mask_dm(cfg, layout),
        Subcommand::TrainImageAe => train_image_ae(cfg, layout),
        Subcommand::TrainImageDm => train_image_dm(cfg, layout),
        Subcommand::Sweep => sweep(cfg, layout),
        Subcommand::Synthesize => synthesize(cfg, layout),
        Subcommand::Compose => compose(cfg, layout),
        Subcommand::TrainSeg => train_seg(cfg, layout),
        Subcommand::Evaluate => evaluate(cfg, layout),
        Subcommand::Report => report(cfg, layout),
        Subcommand::SampleMask => sample_mask(cfg, layout),
        Subcommand::SampleImage => sample_image(cfg, layout),
    }
}

/// Runs one stage under `cfg.out`, writing the config snapshot first and
/// appending a [`RunRecord`] whether or not the stage succeeds.
pub fn dispatch(sub: Subcommand, cfg: &ExperimentConfig) -> Result<RunRecord> {
    let layout = Layout::new(&cfg.out);
    let started_ms = now_ms();
    let snapshot = write_text(&layout.snapshot(sub), &cfg.to_text())?;
    let result = run_stage(sub, cfg, &layout);
    let mut artifacts = vec![layout.relative(&snapshot)];
    if let Ok(paths) = &result {
        artifacts.extend(paths.iter().map(|p| layout.relative(p)));
    }
    let record = RunRecord {
        subcommand: sub.name().into(),
        config_hash: cfg.hash(),
        started_ms,
        finished_ms: now_ms(),
        artifacts,
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    append_run(&layout.runs(), &record)?;
    result.map(|_| record)
}
