//! Overlap, volume, structural-similarity and Fréchet metrics, plus the
//! per-model report written after segmentation experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use vg_tensor::nn::Conv2d;
use vg_tensor::{ParamStore, Tape, Tensor};

use crate::error::{Error, Result};
use crate::phantom::VENTRICLE;
use crate::rng;

fn counts(pred: &[u8], gt: &[u8], class: u8) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("mask sizes {} and {} differ", pred.len(), gt.len())));
    }
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (x, y) = (a == class, b == class);
        p += x as usize;
        g += y as usize;
        both += (x && y) as usize;
    }
    Ok((p, g, both))
}

/// `2|P∩G| / (|P|+|G|)`, or 1 when both are empty.
pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    let (p, g, both) = counts(pred, gt, class)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`, or 1 when both are empty.
pub fn iou(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    let (p, g, both) = counts(pred, gt, class)?;
    let union = p + g - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

/// Ventricle pixel count.
pub fn ventricle_volume(mask: &[u8]) -> f64 {
    mask.iter().filter(|&&l| l == VENTRICLE).count() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeErrors {
    pub mae: f64,
    pub mse: f64,
    /// Signed `pred − gt` per sample.
    pub diffs: Vec<f64>,
    /// `100·(pred − gt)/gt`; `None` where the ground truth is zero.
    pub percent: Vec<Option<f64>>,
    /// Samples excluded from the percent differences.
    pub excluded: Vec<usize>,
}

pub fn volume_errors(pred: &[f64], gt: &[f64]) -> Result<VolumeErrors> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted and {} true volumes",
            pred.len(),
            gt.len()
        )));
    }
    let diffs: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let n = diffs.len() as f64;
    let percent: Vec<Option<f64>> = diffs.iter().zip(gt).map(|(d, &g)| (g != 0.0).then(|| 100.0 * d / g)).collect();
    Ok(VolumeErrors {
        mae: diffs.iter().map(|d| d.abs()).sum::<f64>() / n,
        mse: diffs.iter().map(|d| d * d).sum::<f64>() / n,
        excluded: percent.iter().enumerate().filter(|(_, p)| p.is_none()).map(|(i, _)| i).collect(),
        diffs,
        percent,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Ordinary least-squares slope of `ys` on `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("slope needs at least two paired points".into()));
    }
    let (mx, _) = mean_std(xs);
    let (my, _) = mean_std(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope undefined for constant xs".into()));
    }
    Ok(sxy / sxx)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two paired points".into()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, sx) = mean_std(&rx);
    let (my, sy) = mean_std(&ry);
    if sx == 0.0 || sy == 0.0 {
        return Ok(0.0);
    }
    let cov = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / rx.len() as f64;
    Ok(cov / (sx * sy))
}

/// A single-channel image borrowed as a row-major grid.
#[derive(Debug, Clone, Copy)]
pub struct Gray<'a> {
    pub pixels: &'a [f64],
    pub height: usize,
    pub width: usize,
}

impl<'a> Gray<'a> {
    pub fn new(pixels: &'a [f64], height: usize, width: usize) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::InvalidArgument(format!("{} pixels for {height}x{width}", pixels.len())));
        }
        Ok(Self { pixels, height, width })
    }

    /// Image `i` of an `(n, 1, H, W)` or `(n, H, W)` tensor.
    pub fn item(t: &'a Tensor, i: usize) -> Self {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self {
            pixels: &t.values()[i * h * w..(i + 1) * h * w],
            height: h,
            width: w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

/// Calls `visit(luminance, contrast_structure)` for every sliding window.
fn for_each_window(a: Gray, b: Gray, p: &SsimParams, mut visit: impl FnMut(f64, f64)) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::InvalidArgument("SSIM inputs differ in shape".into()));
    }
    let k = p.window;
    if a.height < k || a.width < k || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than the {k}x{k} window",
            a.height, a.width
        )));
    }
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let area = (k * k) as f64;
    let w = a.width;
    for y in 0..=a.height - k {
        for x in 0..=w - k {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..k {
                let row = (y + dy) * w + x;
                for i in row..row + k {
                    let (u, v) = (a.pixels[i], b.pixels[i]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / area, sb / area);
            let va = (saa / area - ma * ma).max(0.0);
            let vb = (sbb / area - mb * mb).max(0.0);
            let cov = sab / area - ma * mb;
            visit((2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1), (2.0 * cov + c2) / (va + vb + c2));
        }
    }
    Ok(())
}

/// Structural similarity averaged over sliding uniform windows.
pub fn ssim(a: Gray, b: Gray, params: &SsimParams) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for_each_window(a, b, params, |l, cs| {
        total += l * cs;
        count += 1;
    })?;
    Ok(total / count as f64)
}

/// Window means of the luminance and contrast-structure terms.
fn ssim_terms(a: Gray, b: Gray, params: &SsimParams) -> Result<(f64, f64)> {
    let (mut lum, mut cs, mut count) = (0.0, 0.0, 0usize);
    for_each_window(a, b, params, |l, c| {
        lum += l;
        cs += c;
        count += 1;
    })?;
    Ok((lum / count as f64, cs / count as f64))
}

fn pool2(pixels: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (pixels[i] + pixels[i + 1] + pixels[i + w] + pixels[i + w + 1]);
        }
    }
    out
}

/// Multi-scale SSIM on 2× average-pooled pyramids with equal exponents.
/// Contrast-structure enters at every scale and luminance only at the
/// coarsest; negative factors are clamped to zero.
pub fn ms_ssim(a: Gray, b: Gray, scales: usize, params: &SsimParams) -> Result<f64> {
    let div = 1usize << scales.saturating_sub(1);
    if scales == 0 || a.height % div != 0 || a.width % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} is not divisible by {div} for {scales} scales",
            a.height, a.width
        )));
    }
    let (mut pa, mut pb) = (a.pixels.to_vec(), b.pixels.to_vec());
    let (mut h, mut w) = (a.height, a.width);
    let exponent = 1.0 / scales as f64;
    let mut score = 1.0;
    for s in 0..scales {
        let (lum, cs) = ssim_terms(Gray::new(&pa, h, w)?, Gray::new(&pb, h, w)?, params)?;
        let factor = if s + 1 == scales { lum.max(0.0) * cs.max(0.0) } else { cs.max(0.0) };
        score *= factor.powf(exponent);
        if s + 1 < scales {
            pa = pool2(&pa, h, w);
            pb = pool2(&pb, h, w);
            h /= 2;
            w /= 2;
        }
    }
    Ok(score)
}

fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.len() < dim + 1 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument(format!(
            "need at least {} equal-length feature vectors, got {}",
            dim + 1,
            features.len()
        )));
    }
    let n = features.len() as f64;
    let mut mean = DVector::zeros(dim);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for f in features {
        let d = DVector::from_column_slice(f) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature covariance".into()));
    }
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix, clamping
/// negative eigenvalues to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, using
/// `Tr((Σa Σb)^{1/2}) = Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(Error::InvalidArgument("feature dimensions differ".into()));
    }
    let ra = sqrt_psd(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub const FEATURE_DIM: usize = 32;

/// Fixed random three-layer convolutional projection, globally averaged
/// to `FEATURE_DIM` features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    store: ParamStore,
    layers: [Conv2d; 3],
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let r = &mut rng::stream(seed, "feature-extractor");
        let layers = [
            Conv2d::new(&mut store, "f0", 1, 8, 3, 2, r),
            Conv2d::new(&mut store, "f1", 8, 16, 3, 2, r),
            Conv2d::new(&mut store, "f2", 16, FEATURE_DIM, 3, 2, r),
        ];
        store.set_frozen(true);
        Self { store, layers }
    }

    /// One feature vector per image of an `(n, 1, H, W)` tensor.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
            let mut tape = Tape::new();
            let mut h = tape.leaf(crate::train::gather(images, &idx));
            for (i, layer) in self.layers.iter().enumerate() {
                h = layer.forward(&mut tape, &self.store, h)?;
                if i + 1 < self.layers.len() {
                    h = tape.relu(h);
                }
            }
            let pooled = tape.mean_axes(h, &[2, 3])?;
            out.extend(tape.values(pooled).chunks(FEATURE_DIM).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Mean SSIM and MS-SSIM over up to `pairs` distinct unordered image pairs
/// drawn uniformly with a seeded stream.
pub fn pairwise_diversity(images: &Tensor, pairs: usize, params: &SsimParams, scales: usize, seed: u64) -> Result<(f64, f64)> {
    let n = images.shape()[0];
    if n < 2 {
        return Err(Error::InvalidArgument("diversity needs at least two images".into()));
    }
    let total = n * (n - 1) / 2;
    let chosen = index::sample(&mut rng::stream(seed, "diversity-pairs"), total, pairs.min(total)).into_vec();
    let (mut s, mut ms) = (0.0, 0.0);
    for &k in &chosen {
        let (i, j) = unrank_pair(k, n);
        let (a, b) = (Gray::item(images, i), Gray::item(images, j));
        s += ssim(a, b, params)?;
        ms += ms_ssim(a, b, scales, params)?;
    }
    let m = chosen.len() as f64;
    Ok((s / m, ms / m))
}

/// Maps `k < n(n−1)/2` to the `k`-th pair `(i, j)`, `i < j`, in row order.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub gt_volume: f64,
    pub pred_volume: f64,
    pub diff: f64,
    pub percent_diff: Option<f64>,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub dice: (f64, f64),
    pub iou: (f64, f64),
    pub volume_mae: (f64, f64),
    pub volume_mse: (f64, f64),
    /// Mean and spread of the signed volume error.
    pub volume_error: (f64, f64),
    /// Rows sorted by ground-truth volume.
    pub samples: Vec<SampleRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorQuality {
    pub ssim: f64,
    pub ms_ssim: f64,
    /// `None` when either side has too few images for a covariance fit.
    pub frechet: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub models: BTreeMap<String, ModelMetrics>,
    pub generator: Option<GeneratorQuality>,
}

/// Ventricle overlap and volume metrics for one model's predictions.
pub fn evaluate_model(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> Result<ModelMetrics> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} test masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut rows = Vec::with_capacity(gts.len());
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let (pv, gv) = (ventricle_volume(p), ventricle_volume(g));
        rows.push(SampleRow {
            index: i,
            gt_volume: gv,
            pred_volume: pv,
            diff: pv - gv,
            percent_diff: (gv != 0.0).then(|| 100.0 * (pv - gv) / gv),
            dice: dice(p, g, VENTRICLE)?,
            iou: iou(p, g, VENTRICLE)?,
        });
    }
    let col = |f: fn(&SampleRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let metrics = ModelMetrics {
        dice: mean_std(&col(|r| r.dice)),
        iou: mean_std(&col(|r| r.iou)),
        volume_mae: mean_std(&col(|r| r.diff.abs())),
        volume_mse: mean_std(&col(|r| r.diff * r.diff)),
        volume_error: mean_std(&col(|r| r.diff)),
        samples: {
            rows.sort_by(|a, b| a.gt_volume.total_cmp(&b.gt_volume).then(a.index.cmp(&b.index)));
            rows
        },
    };
    Ok(metrics)
}

/// Metrics for every named model against the same test masks.
pub fn evaluate_all(models: &[(String, Vec<Vec<u8>>)], gts: &[Vec<u8>]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for (name, preds) in models {
        report.models.insert(name.clone(), evaluate_model(preds, gts)?);
    }
    Ok(report)
}

impl MetricsReport {
    /// One row per model and metric: `model,metric,mean,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,metric,mean,std\n");
        for (name, m) in &self.models {
            for (metric, (mean, std)) in [
                ("dice", m.dice),
                ("iou", m.iou),
                ("volume_mae", m.volume_mae),
                ("volume_mse", m.volume_mse),
                ("volume_error", m.volume_error),
            ] {
                let _ = writeln!(out, "{name},{metric},{mean},{std}");
            }
        }
        if let Some(g) = &self.generator {
            for (metric, v) in [("ssim", Some(g.ssim)), ("ms_ssim", Some(g.ms_ssim)), ("frechet", g.frechet)] {
                let v = v.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "generator,{metric},{v},");
            }
        }
        out
    }

    /// Per-sample volumes for plotting: `model,index,gt_volume,pred_volume,percent_diff`.
    pub fn volumes_csv(&self) -> String {
        let mut out = String::from("model,index,gt_volume,pred_volume,percent_diff\n");
        for (name, m) in &self.models {
            for r in &m.samples {
                let pct = r.percent_diff.map(|p| p.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{name},{},{},{},{pct}", r.index, r.gt_volume, r.pred_volume);
            }
        }
        out
    }

    /// Writes `metrics.csv`, `metrics.json` and `volumes.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let files = [
            ("metrics.csv", self.to_csv()),
            ("metrics.json", serde_json::to_string_pretty(self).expect("report serializes")),
            ("volumes.csv", self.volumes_csv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(Error::io(&path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn gray(v: &[f64], h: usize, w: usize) -> Gray<'_> {
        Gray::new(v, h, w).unwrap()
    }

    #[test]
    fn rank_statistics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // d = (0, 0, 1, -1): 1 − 6·2 / (4·15) = 0.8
        assert!((spearman(&xs, &[1.0, 2.0, 4.0, 3.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!((least_squares_slope(&xs, &[1.0, 3.0, 5.0, 7.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(least_squares_slope(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn overlap_examples() {
        let g = [2, 2, 2, 2, 0, 0];
        let p = [2, 2, 0, 0, 0, 0];
        assert!((dice(&p, &g, 2).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&p, &g, 2).unwrap(), 0.5);
        assert_eq!(dice(&g, &g, 2).unwrap(), 1.0);
        assert_eq!(dice(&[2, 0], &[0, 2], 2).unwrap(), 0.0);
        assert_eq!(dice(&[0, 0], &[0, 1], 2).unwrap(), 1.0);
        assert_eq!(iou(&[0, 0], &[0, 1], 2).unwrap(), 1.0);
        assert!(dice(&[0], &[0, 0], 2).is_err());
    }

    #[test]
    fn volume_error_examples() {
        let e = volume_errors(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert_eq!((e.mae, e.mse), (3.0, 10.0));
        let e = volume_errors(&[90.0, 5.0], &[100.0, 0.0]).unwrap();
        assert!((e.percent[0].unwrap() + 10.0).abs() < 1e-12);
        assert_eq!((e.percent[1], e.excluded.clone()), (None, vec![1]));
        let e = volume_errors(&[3.0], &[3.0]).unwrap();
        assert_eq!((e.mae, e.mse), (0.0, 0.0));
    }

    #[test]
    fn ssim_examples() {
        let p = SsimParams::default();
        let mut r = rng::stream(1, "test");
        let x: Vec<f64> = (0..256).map(|_| r.gen::<f64>()).collect();
        assert!((ssim(gray(&x, 16, 16), gray(&x, 16, 16), &p).unwrap() - 1.0).abs() < 1e-12);
        let zeros = vec![0.0; 256];
        let ones = vec![1.0; 256];
        let c1 = 1e-4;
        assert!((ssim(gray(&zeros, 16, 16), gray(&ones, 16, 16), &p).unwrap() - c1 / (1.0 + c1)).abs() < 1e-15);
        let noisy: Vec<f64> = x
            .iter()
            .map(|v| v + 1e-4 * r.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        assert!(ssim(gray(&x, 16, 16), gray(&noisy, 16, 16), &p).unwrap() > 0.99);
        assert!(ssim(gray(&x[..36], 6, 6), gray(&x[..36], 6, 6), &p).is_err());
    }

    #[test]
    fn ms_ssim_examples() {
        let p = SsimParams::default();
        let mut r = rng::stream(2, "test");
        let x: Vec<f64> = (0..32 * 32).map(|_| r.gen::<f64>()).collect();
        assert!((ms_ssim(gray(&x, 32, 32), gray(&x, 32, 32), 3, &p).unwrap() - 1.0).abs() < 1e-12);
        let checker: Vec<f64> = (0..32 * 32).map(|i| if (i / 32 + i % 32) % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let flat = vec![0.5; 32 * 32];
        let s = ms_ssim(gray(&checker, 32, 32), gray(&flat, 32, 32), 3, &p).unwrap();
        assert!(s < 1.0);
        assert!(pool2(&checker, 32, 32).iter().all(|&v| v == 0.5));
        assert!(ms_ssim(gray(&x[..30 * 30], 30, 30), gray(&x[..30 * 30], 30, 30), 3, &p).is_err());
    }

    #[test]
    fn frechet_examples() {
        let mut r = rng::stream(3, "test");
        let a: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| r.gen::<f64>()).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 2.0, v[1], v[2] - 1.0]).collect();
        assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-9);
        assert!(frechet_distance(&a[..3], &a).is_err());
    }

    #[test]
    fn frechet_matches_gaussian_closed_form() {
        let mut r = rng::stream(4, "test");
        let n = 10_000;
        let na = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<Vec<f64>> = (0..n).map(|_| vec![na.sample(&mut r), na.sample(&mut r)]).collect();
        let b: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0 + 2.0 * na.sample(&mut r), 0.5 * na.sample(&mut r)])
            .collect();
        // diag covariances (1,1) and (4,0.25): mean term 1, trace term (1-2)² + (1-0.5)².
        let expected = 1.0 + 1.0 + 0.25;
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - expected).abs() / expected < 0.05, "{d}");
    }

    #[test]
    fn pair_unranking_enumerates_all_pairs() {
        let n = 6;
        let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|k| unrank_pair(k, n)).collect();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expected.push((i, j));
            }
        }
        assert_eq!(pairs, expected);
    }

    #[test]
    fn diversity_examples() {
        let one = Tensor::randn(&[1, 1, 32, 32], 0.2, &mut rng::stream(5, "test"));
        let same = Tensor::new(&[4, 1, 32, 32], one.values().repeat(4)).unwrap();
        let (s, ms) = pairwise_diversity(&same, 500, &SsimParams::default(), 3, 1).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && (ms - 1.0).abs() < 1e-12);
        let mut r = rng::stream(6, "test");
        let noise = Tensor::new(&[12, 1, 32, 32], (0..12 * 1024).map(|_| r.gen::<f64>()).collect()).unwrap();
        let first = pairwise_diversity(&noise, 20, &SsimParams::default(), 3, 7).unwrap();
        assert_eq!(first, pairwise_diversity(&noise, 20, &SsimParams::default(), 3, 7).unwrap());
        assert!(first.0 < 0.05, "{first:?}");
    }

    #[test]
    fn feature_extractor_shape() {
        let fx = FeatureExtractor::new(1);
        let imgs = Tensor::randn(&[3, 1, 64, 64], 1.0, &mut rng::stream(7, "test"));
        let f = fx.features(&imgs).unwrap();
        assert_eq!((f.len(), f[0].len()), (3, FEATURE_DIM));
        assert_eq!(f, FeatureExtractor::new(1).features(&imgs).unwrap());
    }

    #[test]
    fn perfect_model_report() {
        let gts = vec![vec![0, 1, 2, 2], vec![0, 2, 1, 1], vec![1, 1, 1, 1]];
        let models = vec![("exact".to_string(), gts.clone()), ("empty".to_string(), vec![vec![0; 4]; 3])];
        let report = evaluate_all(&models, &gts).unwrap();
        let exact = &report.models["exact"];
        assert_eq!((exact.dice.0, exact.volume_mae.0), (1.0, 0.0));
        assert_eq!(exact.samples.iter().map(|r| r.gt_volume).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
        assert_eq!(report.volumes_csv().lines().count(), 1 + 3 * 2);
        assert_eq!(report.models["empty"].volume_mae.0, 1.0);
        let dir = tempfile::tempdir().unwrap();
        report.write(dir.path()).unwrap();
        let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }
}
