//! Two-stage mask-then-image generation, the guidance sweep, bucketed
//! synthetic corpora and the real / synthetic / augmented compositions.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use vg_tensor::Tensor;

use crate::dataset::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::image::ImageStack;
use crate::mask::{achieved_ratio, MaskStack};
use crate::metrics::{mean_std, ventricle_volume};
use crate::phantom::{LabeledVolume, Modality};
use crate::rng;

/// Trained generators used together.
#[derive(Debug, Clone, Copy)]
pub struct Generators<'a> {
    pub mask: &'a MaskStack,
    pub image: &'a ImageStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub c: f64,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    pub count: usize,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument(format!("count and steps must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SynG4,
    SynG1,
    Real,
}

/// Everything needed to regenerate one synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub requested_c: f64,
    pub guidance: f64,
    pub steps: usize,
    pub seed: u64,
    pub achieved_ratio: f64,
    pub provenance: Provenance,
}

fn image_seed(item_seed: u64) -> u64 {
    rng::derive_seed(item_seed, "image", 0)
}

/// Generates masks for `(c, seed)` items at one guidance, then one image
/// per mask. Item `i` depends only on `(cs[i], guidance, steps, seeds[i])`.
pub fn generate_items(
    gens: Generators,
    cs: &[f64],
    guidance: f64,
    steps: usize,
    seeds: &[u64],
    provenance: Provenance,
) -> Result<SyntheticDataset> {
    let masks = gens.mask.sample_each(cs, guidance, steps, seeds)?;
    let image_seeds: Vec<u64> = seeds.iter().map(|&s| image_seed(s)).collect();
    let images = gens.image.sample(&masks, steps, &image_seeds)?;
    let g = gens.image.autoencoder.config().grid;
    let mut out = SyntheticDataset::default();
    for (i, mask) in masks.into_iter().enumerate() {
        let ratio = achieved_ratio(&mask);
        out.records.push(SampleRecord {
            requested_c: cs[i],
            guidance,
            steps,
            seed: seeds[i],
            achieved_ratio: ratio,
            provenance,
        });
        out.volumes.push(LabeledVolume {
            image: Tensor::new(&[1, g, g], images.values()[i * g * g..(i + 1) * g * g].to_vec())?,
            labels: mask,
            height: g,
            width: g,
            modality: Modality::B,
            raw_ratio: ratio,
            c: cs[i],
        });
    }
    Ok(out)
}

/// `count` pairs at one condition, with per-item seeds derived from the
/// request seed by counter.
pub fn generate_pair(gens: Generators, request: &GenerationRequest) -> Result<SyntheticDataset> {
    request.validate()?;
    let seeds: Vec<u64> = (0..request.count as u64)
        .map(|i| rng::derive_seed(request.seed, "item", i))
        .collect();
    let provenance = if request.guidance == 1.0 {
        Provenance::SynG1
    } else {
        Provenance::SynG4
    };
    generate_items(
        gens,
        &vec![request.c; request.count],
        request.guidance,
        request.steps,
        &seeds,
        provenance,
    )
}

/// Regenerates the pair described by `record`.
pub fn regenerate(gens: Generators, record: &SampleRecord) -> Result<LabeledVolume> {
    let mut one = generate_items(
        gens,
        &[record.requested_c],
        record.guidance,
        record.steps,
        &[record.seed],
        record.provenance,
    )?;
    Ok(one.volumes.remove(0))
}

/// Synthetic pairs with their provenance records, index-aligned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticDataset {
    pub records: Vec<SampleRecord>,
    pub volumes: Vec<LabeledVolume>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: SyntheticDataset) {
        self.records.extend(other.records);
        self.volumes.extend(other.volumes);
    }

    pub fn indices_of(&self, provenance: Provenance) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].provenance == provenance).collect()
    }

    /// Writes `<stem>.vgds` with the pairs and `<stem>.json` with the
    /// records.
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_dataset(&stem.with_extension("vgds"), &self.volumes)?;
        let sidecar = stem.with_extension("json");
        let json = serde_json::to_string_pretty(&self.records).expect("records serialize");
        std::fs::write(&sidecar, json).map_err(Error::io(&sidecar))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let sidecar = stem.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(Error::io(&sidecar))?;
        let records: Vec<SampleRecord> = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: sidecar.clone(),
            msg: e.to_string(),
        })?;
        let volumes = read_dataset(&stem.with_extension("vgds"))?;
        if volumes.len() != records.len() {
            return Err(Error::Format {
                path: sidecar,
                msg: format!("{} records for {} samples", records.len(), volumes.len()),
            });
        }
        Ok(Self { records, volumes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub c_grid: Vec<f64>,
    pub guidances: Vec<f64>,
    pub per_point: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Bucket midpoints `0.05, 0.15, …` up to `hi`.
pub fn midpoints(hi: f64, width: f64) -> Vec<f64> {
    let n = (hi / width).round() as usize;
    (0..n).map(|i| ((i as f64 + 0.5) * width * 1e12).round() / 1e12).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            c_grid: midpoints(1.3, 0.1),
            guidances: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            per_point: 50,
            steps: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub c: f64,
    pub guidance: f64,
    pub mean_area: f64,
    pub std_area: f64,
    pub mean_ratio: f64,
    /// Mean ventricle area of validation masks whose `c` lies within half a
    /// grid spacing of this point.
    pub ground_truth_mean: Option<f64>,
}

/// Mean ventricle area of `(c, mask)` references in `[lo, hi)`.
fn reference_area(refs: &[(f64, Vec<u8>)], lo: f64, hi: f64) -> Option<f64> {
    let areas: Vec<f64> = refs
        .iter()
        .filter(|(c, _)| *c >= lo && *c < hi)
        .map(|(_, m)| ventricle_volume(m))
        .collect();
    (!areas.is_empty()).then(|| mean_std(&areas).0)
}

/// Samples `per_point` masks at every `(c, G)` and summarizes their
/// ventricle areas next to the reference curve.
pub fn guidance_sweep(stack: &MaskStack, config: &SweepConfig, references: &[(f64, Vec<u8>)]) -> Result<Vec<SweepRow>> {
    if config.per_point == 0 || config.c_grid.is_empty() || config.guidances.is_empty() {
        return Err(Error::InvalidArgument("sweep needs a grid, guidances and samples per point".into()));
    }
    let half = if config.c_grid.len() > 1 {
        0.5 * (config.c_grid[1] - config.c_grid[0]).abs()
    } else {
        0.05
    };
    let mut rows = Vec::new();
    for (gi, &g) in config.guidances.iter().enumerate() {
        for (ci, &c) in config.c_grid.iter().enumerate() {
            let label = format!("sweep-{gi}-{ci}");
            let seeds: Vec<u64> = (0..config.per_point as u64)
                .map(|i| rng::derive_seed(config.seed, &label, i))
                .collect();
            let masks = stack.sample(c, g, config.steps, &seeds)?;
            let areas: Vec<f64> = masks.iter().map(|m| ventricle_volume(m)).collect();
            let ratios: Vec<f64> = masks.iter().map(|m| achieved_ratio(m)).collect();
            let (mean_area, std_area) = mean_std(&areas);
            rows.push(SweepRow {
                c,
                guidance: g,
                mean_area,
                std_area,
                mean_ratio: mean_std(&ratios).0,
                ground_truth_mean: reference_area(references, c - half, c + half),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("c,G,mean_area,std_area,ground_truth_mean\n");
    for r in rows {
        let gt = r.ground_truth_mean.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{gt}", r.c, r.guidance, r.mean_area, r.std_area);
    }
    out
}

/// One condition interval and how many samples it receives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketPlan {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// `buckets` equal intervals tiling `[0, c_max)`; `total` is split evenly
/// with the remainder going to the lowest buckets.
pub fn bucket_plan(total: usize, buckets: usize, c_max: f64) -> Result<Vec<BucketPlan>> {
    if buckets == 0 || !(c_max > 0.0) {
        return Err(Error::InvalidArgument(format!("{buckets} buckets over [0, {c_max})")));
    }
    let (base, rem) = (total / buckets, total % buckets);
    Ok((0..buckets)
        .map(|i| BucketPlan {
            lo: i as f64 * c_max / buckets as f64,
            hi: (i + 1) as f64 * c_max / buckets as f64,
            count: base + usize::from(i < rem),
        })
        .collect())
}

/// One guided part of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPart {
    pub guidance: f64,
    pub provenance: Provenance,
    pub buckets: Vec<BucketPlan>,
}

impl PlanPart {
    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }
}

pub const SYN_G4_TOTAL: usize = 600;
pub const SYN_G4_BUCKETS: usize = 13;
pub const SYN_G4_CMAX: f64 = 1.3;
pub const SYN_G1_TOTAL: usize = 400;
pub const SYN_G1_BUCKETS: usize = 10;
pub const SYN_G1_CMAX: f64 = 1.0;
pub const REAL_TOTAL: usize = 1000;
pub const AUG_G1: usize = 200;
pub const AUG_G4: usize = 312;

/// Count at scale `s`, rounded to the nearest integer.
pub fn scaled(count: usize, s: f64) -> usize {
    (count as f64 * s).round() as usize
}

/// The two-part synthetic plan at scale `s`.
pub fn synthesis_plan(s: f64) -> Result<Vec<PlanPart>> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("scale {s} must be positive")));
    }
    Ok(vec![
        PlanPart {
            guidance: 4.0,
            provenance: Provenance::SynG4,
            buckets: bucket_plan(scaled(SYN_G4_TOTAL, s), SYN_G4_BUCKETS, SYN_G4_CMAX)?,
        },
        PlanPart {
            guidance: 1.0,
            provenance: Provenance::SynG1,
            buckets: bucket_plan(scaled(SYN_G1_TOTAL, s), SYN_G1_BUCKETS, SYN_G1_CMAX)?,
        },
    ])
}

/// Requested `(c, seed)` items for one part, `c` uniform within each bucket.
pub fn plan_items(part: &PlanPart, seed: u64) -> Vec<(f64, u64)> {
    let label = format!("{:?}", part.provenance);
    let mut r = rng::stream(seed, &format!("bucket-c-{label}"));
    let mut items = Vec::with_capacity(part.total());
    for b in &part.buckets {
        for _ in 0..b.count {
            let c = r.gen_range(b.lo..b.hi);
            items.push((c, rng::derive_seed(seed, &label, items.len() as u64)));
        }
    }
    items
}

/// Generates every part of `plan`.
pub fn build_bucketed_dataset(gens: Generators, plan: &[PlanPart], steps: usize, seed: u64) -> Result<SyntheticDataset> {
    let mut out = SyntheticDataset::default();
    for part in plan {
        let items = plan_items(part, seed);
        if items.is_empty() {
            continue;
        }
        let (cs, seeds): (Vec<f64>, Vec<u64>) = items.into_iter().unzip();
        out.extend(generate_items(gens, &cs, part.guidance, steps, &seeds, part.provenance)?);
    }
    Ok(out)
}

/// Index selections defining the three training corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    /// Indices into the real pool.
    pub real: Vec<usize>,
    /// Indices into the synthetic dataset forming the augmented extras.
    pub aug_g1: Vec<usize>,
    pub aug_g4: Vec<usize>,
}

impl Composition {
    pub fn aug_len(&self) -> usize {
        self.real.len() + self.aug_g1.len() + self.aug_g4.len()
    }
}

fn draw(pool: &[usize], k: usize, seed: u64, label: &str, what: &str) -> Result<Vec<usize>> {
    if pool.len() < k {
        return Err(Error::InsufficientPool(format!("{what}: need {k}, have {}", pool.len())));
    }
    let mut picked: Vec<usize> = index::sample(&mut rng::stream(seed, label), pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Seeded draws without replacement: `1000·s` real samples, plus
/// `200·s` G=1 and `312·s` G=4 synthetic samples for the augmented corpus.
pub fn compose(real_pool: usize, g1_pool: &[usize], g4_pool: &[usize], s: f64, seed: u64) -> Result<Composition> {
    let all: Vec<usize> = (0..real_pool).collect();
    Ok(Composition {
        real: draw(&all, scaled(REAL_TOTAL, s), seed, "compose-real", "real pool")?,
        aug_g1: draw(g1_pool, scaled(AUG_G1, s), seed, "compose-g1", "G=1 synthetic pool")?,
        aug_g4: draw(g4_pool, scaled(AUG_G4, s), seed, "compose-g4", "G=4 synthetic pool")?,
    })
}

/// A training corpus with per-sample provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub volumes: Vec<LabeledVolume>,
    pub provenance: Vec<Provenance>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedDatasets {
    pub real: TrainingSet,
    pub syn: TrainingSet,
    pub aug: TrainingSet,
    pub composition: Composition,
}

pub fn compose_datasets(real_pool: &[LabeledVolume], syn: &SyntheticDataset, s: f64, seed: u64) -> Result<ComposedDatasets> {
    let composition = compose(
        real_pool.len(),
        &syn.indices_of(Provenance::SynG1),
        &syn.indices_of(Provenance::SynG4),
        s,
        seed,
    )?;
    let real = TrainingSet {
        volumes: composition.real.iter().map(|&i| real_pool[i].clone()).collect(),
        provenance: vec![Provenance::Real; composition.real.len()],
    };
    let mut aug = real.clone();
    for &i in composition.aug_g1.iter().chain(&composition.aug_g4) {
        aug.volumes.push(syn.volumes[i].clone());
        aug.provenance.push(syn.records[i].provenance);
    }
    Ok(ComposedDatasets {
        syn: TrainingSet {
            volumes: syn.volumes.clone(),
            provenance: syn.records.iter().map(|r| r.provenance).collect(),
        },
        real,
        aug,
        composition,
    })
}

/// Max-bin over min-bin count of a histogram of `values` on `[lo, hi)`
/// with `bins` equal bins; infinite when a bin is empty.
pub fn histogram_flatness(values: &[f64], lo: f64, hi: f64, bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v >= lo && v < hi {
            counts[(((v - lo) / (hi - lo)) * bins as f64) as usize] += 1;
        }
    }
    let max = *counts.iter().max().unwrap_or(&0) as f64;
    let min = *counts.iter().min().unwrap_or(&0) as f64;
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
