//! Procedural 2-D brain phantoms with exact three-class labels.
//!
//! The brain is a lightly perturbed ellipse. Ventricles are the sublevel set
//! of a "distance to the nearest of two perturbed ellipses" field, restricted
//! to the brain interior; taking the `k` lowest-valued pixels hits a target
//! pixel count exactly, which is what makes the ventricle ratio controllable.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use vg_tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng;

pub const BACKGROUND: u8 = 0;
pub const TISSUE: u8 = 1;
pub const VENTRICLE: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Largest admissible target ratio (exclusive).
pub const MAX_TARGET_RATIO: f64 = 0.45;
/// Ventricles may only occupy brain pixels within this normalized radius.
const INTERIOR_RADIUS: f64 = 0.82;
const NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    /// Pretraining domain: bright tissue, dark ventricles.
    A,
    /// Fine-tuning domain: mid-grey tissue, dark ventricles, bright rim.
    B,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::A => 0,
            Modality::B => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::A),
            1 => Some(Modality::B),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_size: usize,
    /// Horizontal and vertical semi-axes of the brain ellipse, in pixels.
    pub brain_axes: (f64, f64),
    pub ventricle_target_ratio: f64,
    pub wobble_seed: u64,
    pub modality: Modality,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid_size: 64,
            brain_axes: (25.0, 21.0),
            ventricle_target_ratio: 0.1,
            wobble_seed: 0,
            modality: Modality::A,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let half = (self.grid_size as f64 - 1.0) / 2.0;
        let (a, b) = self.brain_axes;
        // Boundary wobble can push the outline out by up to 3%.
        let reach = a.max(b) * 1.03;
        if self.grid_size < 16 {
            return Err(Error::InvalidSpec(format!("grid size {} below 16", self.grid_size)));
        }
        if a <= 2.0 || b <= 2.0 || half - reach < 2.0 {
            return Err(Error::InvalidSpec(format!(
                "brain axes {:?} leave less than a 2-pixel margin in a {} grid",
                self.brain_axes, self.grid_size
            )));
        }
        if !(0.0..MAX_TARGET_RATIO).contains(&self.ventricle_target_ratio) {
            return Err(Error::InvalidSpec(format!(
                "ventricle target ratio {} outside [0, {MAX_TARGET_RATIO})",
                self.ventricle_target_ratio
            )));
        }
        Ok(())
    }
}

/// A phantom image with its label grid and conditioning value.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    /// `(1, H, W)` intensities in `[0, 1]`.
    pub image: Tensor,
    /// `H×W` row-major labels in `{0, 1, 2}`.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub modality: Modality,
    pub raw_ratio: f64,
    /// Normalized condition; zero until [`normalize_conditions`] is applied.
    pub c: f64,
}

impl LabeledVolume {
    pub fn ventricle_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l == VENTRICLE).count()
    }
}

/// Radial perturbation `1 + Σ amp_k cos(kθ + φ_k)` for harmonics 2..=4.
#[derive(Debug, Clone)]
struct Wobble {
    terms: Vec<(f64, f64, f64)>,
}

impl Wobble {
    fn new<R: Rng>(rng: &mut R, max_amp: f64) -> Self {
        let terms = (2..=4)
            .map(|k| (k as f64, rng.gen_range(0.0..max_amp), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        Self { terms }
    }

    fn radius(&self, theta: f64) -> f64 {
        1.0 + self.terms.iter().map(|(k, a, p)| a * (k * theta + p).cos()).sum::<f64>()
    }
}

/// Normalized elliptical radius of `(x, y)` relative to a perturbed ellipse.
fn ellipse_level(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64, wobble: &Wobble) -> f64 {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    (u * u + v * v).sqrt() / wobble.radius(v.atan2(u))
}

/// Generates one phantom. `spec.wobble_seed` fixes the geometry; `seed`
/// drives the intensity noise.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledVolume> {
    spec.validate()?;
    let n = spec.grid_size;
    let (labels, raw_ratio) = layout_labels(spec, INTERIOR_RADIUS)?;
    let image = render_image(&labels, n, spec.modality, spec.wobble_seed, seed);
    Ok(LabeledVolume {
        image: Tensor::new(&[1, n, n], image)?,
        labels,
        height: n,
        width: n,
        modality: spec.modality,
        raw_ratio,
        c: 0.0,
    })
}

fn layout_labels(spec: &PhantomSpec, interior: f64) -> Result<(Vec<u8>, f64)> {
    let n = spec.grid_size;
    let (a, b) = spec.brain_axes;
    let c0 = (n as f64 - 1.0) / 2.0;
    let mut geo = rng::stream(spec.wobble_seed, "phantom-geometry");
    let brain_wobble = Wobble::new(&mut geo, 0.01);
    let left = Wobble::new(&mut geo, 0.08);
    let right = Wobble::new(&mut geo, 0.08);
    let lift = geo.gen_range(-0.08..0.02) * b;
    let spread = geo.gen_range(0.18..0.26) * a;
    let (vrx, vry) = (0.16 * a, 0.32 * b);

    let mut labels = vec![BACKGROUND; n * n];
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    let mut brain = 0usize;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let r = ellipse_level(fx, fy, c0, c0, a, b, &brain_wobble);
            if r > 1.0 {
                continue;
            }
            let i = y * n + x;
            labels[i] = TISSUE;
            brain += 1;
            if r <= interior {
                let l = ellipse_level(fx, fy, c0 - spread, c0 + lift, vrx, vry, &left);
                let rr = ellipse_level(fx, fy, c0 + spread, c0 + lift, vrx, vry, &right);
                candidates.push((l.min(rr), i));
            }
        }
    }
    let target = (spec.ventricle_target_ratio * brain as f64).round() as usize;
    if target > candidates.len() {
        return Err(Error::Unreachable {
            target: spec.ventricle_target_ratio,
            achieved_max: candidates.len() as f64 / brain as f64,
        });
    }
    candidates.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
    for &(_, i) in &candidates[..target] {
        labels[i] = VENTRICLE;
    }
    Ok((labels, target as f64 / brain as f64))
}

fn render_image(labels: &[u8], n: usize, modality: Modality, wobble_seed: u64, seed: u64) -> Vec<f64> {
    let (tissue, ventricle) = match modality {
        Modality::A => (0.70, 0.12),
        Modality::B => (0.45, 0.08),
    };
    // Low-frequency shading so tissue is not perfectly flat.
    let mut shade_rng = rng::stream(wobble_seed, "phantom-shading");
    let (fx, fy, px, py) = (
        shade_rng.gen_range(0.05..0.15),
        shade_rng.gen_range(0.05..0.15),
        shade_rng.gen_range(0.0..std::f64::consts::TAU),
        shade_rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let near_ventricle = |x: usize, y: usize| {
        let (x0, x1) = (x.saturating_sub(2), (x + 2).min(n - 1));
        let (y0, y1) = (y.saturating_sub(2), (y + 2).min(n - 1));
        (y0..=y1).any(|yy| (x0..=x1).any(|xx| labels[yy * n + xx] == VENTRICLE))
    };
    let mut base = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            base[i] = match labels[i] {
                TISSUE => {
                    let shade = 0.04 * ((x as f64 * fx + px).sin() + (y as f64 * fy + py).sin());
                    let rim = if modality == Modality::B && near_ventricle(x, y) {
                        0.25
                    } else {
                        0.0
                    };
                    tissue + shade + rim
                }
                VENTRICLE => ventricle,
                _ => 0.0,
            };
        }
    }
    let mut noise = rng::stream(seed, "phantom-noise");
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, n as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, n as i64 - 1) as usize;
                    acc += base[yy * n + xx];
                }
            }
            let z: f64 = noise.sample(StandardNormal);
            out[y * n + x] = (acc / 9.0 + NOISE_SIGMA * z).clamp(0.0, 1.0);
        }
    }
    out
}

/// Ventricle pixels over brain (tissue + ventricle) pixels.
pub fn compute_ratio(labels: &[u8]) -> Result<f64> {
    let ventricle = labels.iter().filter(|&&l| l == VENTRICLE).count();
    let brain = labels.iter().filter(|&&l| l == TISSUE || l == VENTRICLE).count();
    if brain == 0 {
        return Err(Error::EmptyBrain);
    }
    Ok(ventricle as f64 / brain as f64)
}

/// Min–max bounds used to map raw ratios to condition values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBounds {
    pub ratio_min: f64,
    pub ratio_max: f64,
}

/// Applied condition values are clamped to this range.
pub const C_CLAMP: (f64, f64) = (0.0, 1.5);

impl NormBounds {
    /// Unclamped `(r − min) / (max − min)`.
    pub fn raw(&self, ratio: f64) -> f64 {
        (ratio - self.ratio_min) / (self.ratio_max - self.ratio_min)
    }

    pub fn apply(&self, ratio: f64) -> f64 {
        self.raw(ratio).clamp(C_CLAMP.0, C_CLAMP.1)
    }

    pub fn invert(&self, c: f64) -> f64 {
        self.ratio_min + c * (self.ratio_max - self.ratio_min)
    }
}

pub fn normalize_conditions(ratios: &[f64]) -> Result<(Vec<f64>, NormBounds)> {
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ratios.len() < 2 || !(max > min) {
        return Err(Error::ZeroRange(ratios.len()));
    }
    let bounds = NormBounds {
        ratio_min: min,
        ratio_max: max,
    };
    Ok((ratios.iter().map(|&r| bounds.raw(r)).collect(), bounds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusKind {
    /// Ratios uniform over the admissible range (pretraining-like).
    Balanced,
    /// Right-skewed ratios where large ventricles are rare.
    Skewed,
    /// Held-out ratios above the skewed corpus's typical maximum.
    Enlarged,
}

pub const CORPUS_RATIO_RANGE: (f64, f64) = (0.02, 0.30);
/// Median and log-scale spread of the skewed law.
pub const SKEWED_MEDIAN: f64 = 0.06;
pub const SKEWED_SIGMA: f64 = 0.5;
pub const ENLARGED_RATIO_RANGE: (f64, f64) = (0.25, MAX_TARGET_RATIO);

/// Draws `n` phantom specs. Balanced corpora use modality A, the others B.
pub fn sample_corpus(kind: CorpusKind, n: usize, seed: u64) -> Result<Vec<PhantomSpec>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    let (lo, hi) = CORPUS_RATIO_RANGE;
    let mut rng = rng::stream(seed, "corpus");
    let lognormal = LogNormal::new(SKEWED_MEDIAN.ln(), SKEWED_SIGMA).expect("valid log-normal");
    Ok((0..n)
        .map(|_| {
            let ratio = match kind {
                CorpusKind::Balanced => rng.gen_range(lo..hi),
                CorpusKind::Skewed => lognormal.sample(&mut rng).clamp(lo, hi),
                CorpusKind::Enlarged => rng.gen_range(ENLARGED_RATIO_RANGE.0..ENLARGED_RATIO_RANGE.1),
            };
            PhantomSpec {
                grid_size: 64,
                brain_axes: (rng.gen_range(23.0..27.0), rng.gen_range(19.0..23.0)),
                ventricle_target_ratio: ratio,
                wobble_seed: rng.gen(),
                modality: match kind {
                    CorpusKind::Balanced => Modality::A,
                    CorpusKind::Skewed | CorpusKind::Enlarged => Modality::B,
                },
            }
        })
        .collect())
}

/// Renders a list of specs, with per-item noise seeds derived from `seed`.
pub fn render_corpus(specs: &[PhantomSpec], seed: u64) -> Result<Vec<LabeledVolume>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| generate_phantom(s, rng::derive_seed(seed, "phantom-noise", i as u64)))
        .collect()
}

/// Renders specs and sets `c` from min–max bounds computed over the whole
/// corpus.
pub fn build_corpus(kind: CorpusKind, n: usize, seed: u64) -> Result<(Vec<LabeledVolume>, NormBounds)> {
    let specs = sample_corpus(kind, n, seed)?;
    let mut volumes = render_corpus(&specs, seed)?;
    let ratios: Vec<f64> = volumes.iter().map(|v| v.raw_ratio).collect();
    let (cs, bounds) = normalize_conditions(&ratios)?;
    for (v, c) in volumes.iter_mut().zip(cs) {
        v.c = c;
    }
    Ok((volumes, bounds))
}
