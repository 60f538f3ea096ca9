//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails.
//!
//! The two training criteria (5 and 7) take most of an hour on one core.
//! `VENTRIGEN_ACCEPTANCE=quick` skips them and reports SKIP.

mod gradcheck;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use ventrigen_core::config::ExperimentConfig;
use ventrigen_core::diffusion::{
    cfg_combine, ddim_sample_from, ddim_step, ddim_timesteps, ddpm_sample, forward_sample, gaussian, Condition, NoiseSchedule, SigmaMode,
};
use ventrigen_core::experiment::{self, dispatch, Layout, Subcommand};
use ventrigen_core::mask::{MaskDenoiser, MaskDmConfig};
use ventrigen_core::metrics::{dice, frechet_distance, iou, least_squares_slope, spearman, ssim, Gray, MetricsReport, SsimParams};
use ventrigen_core::phantom::VENTRICLE;
use ventrigen_core::pipeline::{compose, synthesis_plan, PlanPart, Provenance, SweepRow};
use ventrigen_core::rng;
use vg_tensor::Tensor;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sample_mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(
        elapsed <= Duration::from_secs(limit_s),
        format!("took {:.0}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

/// Optimal noise prediction for scalar data `x0 ~ N(mean, var)`.
fn gaussian_denoiser(s: &NoiseSchedule, mean: f64, var: f64, x: &Tensor, t: usize) -> Tensor {
    let ab = s.alpha_bar(t);
    let k = (1.0 - ab).sqrt() / (ab * var + 1.0 - ab);
    let values = x.values().iter().map(|v| k * (v - ab.sqrt() * mean)).collect();
    Tensor::new(x.shape(), values).expect("same shape")
}

fn samplers() -> Outcome {
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, SigmaMode::Beta).map_err(err)?;
    let (mean, var) = (2.0, 0.25);
    let chains = 5000;
    let x = ddpm_sample(|x, t| Ok(gaussian_denoiser(&s, mean, var, x, t)), &[chains], &s, 1).map_err(err)?;
    let (m, v) = sample_mean_var(x.values());
    ensure((m - mean).abs() < 0.05, format!("DDPM mean {m}"))?;
    ensure((v - var).abs() < 0.15 * var, format!("DDPM variance {v}"))?;
    let noise = gaussian(&[chains], &mut rng::stream(2, "acceptance"));
    let y = ddim_sample_from(
        |x, t, _| Ok(gaussian_denoiser(&s, mean, var, x, t)),
        noise,
        &s,
        50,
        Condition::new(0.0),
        1.0,
    )
    .map_err(err)?;
    let (dm, _) = sample_mean_var(y.values());
    ensure((dm - mean).abs() < 0.05, format!("DDIM mean {dm}"))?;
    within(start.elapsed(), 60)?;
    Ok(format!("DDPM mean {m:.4} var {v:.4}, DDIM mean {dm:.4} (target {mean}, {var})"))
}

fn forward_marginals() -> Outcome {
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, SigmaMode::Beta).map_err(err)?;
    let mut r = rng::stream(3, "acceptance");
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x0v: f64 = r.gen_range(-2.0..2.0);
        let t = r.gen_range(1..=1000);
        let eps = gaussian(&[n], &mut r);
        let x = forward_sample(&Tensor::filled(&[n], x0v), t, &eps, &s).map_err(err)?;
        let (m, v) = sample_mean_var(x.values());
        let (mu, sigma2) = (s.alpha_bar(t).sqrt() * x0v, 1.0 - s.alpha_bar(t));
        let z_mean = (m - mu).abs() / (sigma2 / n as f64).sqrt();
        let z_var = (v - sigma2).abs() / (sigma2 * (2.0 / (n as f64 - 1.0)).sqrt());
        ensure(
            z_mean < 3.0 && z_var < 3.0,
            format!("x0 {x0v:.3}, t {t}: mean z {z_mean:.2}, variance z {z_var:.2}"),
        )?;
        worst = worst.max(z_mean).max(z_var);
    }
    within(start.elapsed(), 30)?;
    Ok(format!("5 pairs, largest deviation {worst:.2} standard errors"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    for (name, group) in gradcheck::GROUPS {
        catch_unwind(group).map_err(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            format!("{name}: {msg}")
        })?;
    }
    within(start.elapsed(), 120)?;
    Ok(format!(
        "{} groups, 20 seeds, in {:.0}s",
        gradcheck::GROUPS.len(),
        start.elapsed().as_secs_f64()
    ))
}

/// Plain conditional DDIM without any guidance branch.
fn conditional_only(
    f: impl Fn(&Tensor, usize, Condition) -> Tensor,
    mut x: Tensor,
    s: &NoiseSchedule,
    steps: usize,
    cond: Condition,
) -> Tensor {
    let ts = ddim_timesteps(s.steps(), steps).expect("valid steps");
    for (i, &t) in ts.iter().enumerate() {
        let eps = f(&x, t, cond);
        x = ddim_step(&x, t, ts.get(i + 1).copied().unwrap_or(0), &eps, s).expect("valid step");
    }
    x
}

fn cfg_identities() -> Outcome {
    let s = NoiseSchedule::linear(200, 5e-4, 0.1, SigmaMode::Beta).map_err(err)?;
    let net = MaskDenoiser::new(MaskDmConfig::default(), 4).map_err(err)?;
    let shape = [2, MaskDmConfig::default().latent_channels, 16, 16];
    let noise = gaussian(&shape, &mut rng::stream(4, "acceptance"));
    let cond = Condition::new(0.7);
    let predict = |x: &Tensor, t: usize, c: Condition| net.predict(x, t, c).expect("denoiser runs");

    let guided = ddim_sample_from(|x, t, c| Ok(predict(x, t, c)), noise.clone(), &s, 10, cond, 1.0).map_err(err)?;
    ensure(
        guided == conditional_only(predict, noise.clone(), &s, 10, cond),
        "G=1 differs from conditional-only sampling",
    )?;

    let blind = |x: &Tensor, t: usize, _: Condition| net.predict(x, t, Condition::new(0.3)).expect("denoiser runs");
    let reference = conditional_only(blind, noise.clone(), &s, 10, cond);
    for g in [0.0, 0.5, 2.0, 4.0, 7.3, 13.0] {
        let out = ddim_sample_from(|x, t, c| Ok(blind(x, t, c)), noise.clone(), &s, 10, cond, g).map_err(err)?;
        ensure(out == reference, format!("equal predictions changed under G={g}"))?;
    }

    let scalar = |c: f64, u: f64, g: f64| cfg_combine(&Tensor::scalar(c), &Tensor::scalar(u), g).map(|t| t.values()[0]);
    for (c, u, g, expect) in [
        (0.5, 0.25, 3.0, 1.0),
        (0.5, 0.25, 1.0, 0.5),
        (0.5, 0.25, 0.0, 0.25),
        (1.0, -1.0, 2.0, 3.0),
        (0.75, 0.75, 9.1, 0.75),
    ] {
        let got = scalar(c, u, g).map_err(err)?;
        ensure(got == expect, format!("cond {c}, uncond {u}, G {g}: {got} != {expect}"))?;
    }
    Ok("G=1 bit-identical, 6 guidances invariant, 5 scalar cases exact".into())
}

fn composition_counts() -> Outcome {
    let plan = synthesis_plan(1.0).map_err(err)?;
    let part =
        |p: Provenance| -> Result<&PlanPart, String> { plan.iter().find(|x| x.provenance == p).ok_or_else(|| format!("no {p:?} part")) };
    let (g4, g1) = (part(Provenance::SynG4)?, part(Provenance::SynG1)?);
    for (p, total, buckets, width) in [(g4, 600, 13, 0.1), (g1, 400, 10, 0.1)] {
        ensure(
            p.total() == total && p.buckets.len() == buckets,
            format!("{:?}: {} over {}", p.provenance, p.total(), p.buckets.len()),
        )?;
        ensure(
            p.buckets.iter().all(|b| ((b.hi - b.lo) - width).abs() < 1e-12),
            format!("{:?} buckets are not equal width", p.provenance),
        )?;
        let counts: Vec<usize> = p.buckets.iter().map(|b| b.count).collect();
        ensure(
            counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1,
            format!("{:?} uneven bucket counts {counts:?}", p.provenance),
        )?;
    }
    let syn = g4.total() + g1.total();
    ensure(syn == 1000, format!("|D_syn| = {syn}"))?;
    let g1_pool: Vec<usize> = (0..400).collect();
    let g4_pool: Vec<usize> = (400..1000).collect();
    let c = compose(1000, &g1_pool, &g4_pool, 1.0, 6).map_err(err)?;
    ensure(
        (c.real.len(), c.aug_g1.len(), c.aug_g4.len(), c.aug_len()) == (1000, 200, 312, 1512),
        format!("|D_aug| = {} + {} + {}", c.real.len(), c.aug_g1.len(), c.aug_g4.len()),
    )?;
    Ok(format!(
        "|D_syn| = {syn} (600 over 13, 400 over 10), |D_aug| = 1000 + 200 + 312 = {}",
        c.aug_len()
    ))
}

fn random_mask(r: &mut impl Rng, n: usize) -> Vec<u8> {
    let p: f64 = r.gen_range(0.05..0.6);
    (0..n).map(|_| if r.gen_bool(p) { VENTRICLE } else { r.gen_range(0..2) }).collect()
}

fn metric_oracles() -> Outcome {
    let mut r = rng::stream(8, "acceptance");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (a, b) = (random_mask(&mut r, 256), random_mask(&mut r, 256));
        let (d, j) = (dice(&a, &b, VENTRICLE).map_err(err)?, iou(&a, &b, VENTRICLE).map_err(err)?);
        worst = worst.max((j - d / (2.0 - d)).abs());
    }
    ensure(worst <= 1e-12, format!("Dice/IoU identity off by {worst:e}"))?;

    for _ in 0..200 {
        let (a, b) = (random_mask(&mut r, 64), random_mask(&mut r, 64));
        let (mut inter, mut na, mut nb, mut union) = (0usize, 0usize, 0usize, 0usize);
        for y in 0..8 {
            for x in 0..8 {
                let (pa, pb) = (a[y * 8 + x] == VENTRICLE, b[y * 8 + x] == VENTRICLE);
                inter += (pa && pb) as usize;
                union += (pa || pb) as usize;
                na += pa as usize;
                nb += pb as usize;
            }
        }
        let bd = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        let bi = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        ensure(dice(&a, &b, VENTRICLE).map_err(err)? == bd, "8x8 Dice differs from brute force")?;
        ensure(iou(&a, &b, VENTRICLE).map_err(err)? == bi, "8x8 IoU differs from brute force")?;
    }

    let img: Vec<f64> = (0..32 * 32).map(|_| r.gen_range(0.0..1.0)).collect();
    let g = Gray::new(&img, 32, 32).map_err(err)?;
    let self_ssim = ssim(g, g, &SsimParams::default()).map_err(err)?;
    ensure(self_ssim == 1.0, format!("SSIM(x, x) = {self_ssim}"))?;

    let dim = 6;
    let feats: Vec<Vec<f64>> = (0..400).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let self_d = frechet_distance(&feats, &feats).map_err(err)?;
    ensure(self_d <= 1e-8, format!("Fréchet self-distance {self_d:e}"))?;
    let offset: Vec<f64> = (0..dim).map(|i| 0.25 * i as f64 - 0.5).collect();
    let shifted: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().zip(&offset).map(|(a, b)| a + b).collect()).collect();
    let d2 = frechet_distance(&feats, &shifted).map_err(err)?;
    let expect: f64 = offset.iter().map(|o| o * o).sum();
    ensure(
        (d2 - expect).abs() <= 1e-9 * expect,
        format!("mean offset gives {d2}, expected {expect}"),
    )?;
    Ok(format!(
        "identity gap {worst:.1e}, brute force equal, SSIM(x,x) = 1, self-distance {self_d:.1e}, offset d² = {d2}"
    ))
}

const TINY: &str = "\
seed = 3
scale = 0.02
data.balanced_n = 40
data.skewed_n = 30
data.test_n = 8
diffusion.T = 20
mask_ae.epochs = 1
mask_dm.epochs = 1
image.epochs_a = 1
image.epochs_b = 1
image_dm.epochs_a = 1
image_dm.epochs_b = 1
sample.steps = 4
sweep.c_grid = 0.2, 0.8
sweep.guidances = 1, 4
sweep.per_point = 2
sweep.steps = 4
synth.steps = 4
seg.epochs = 1
eval.pairs = 10
";

const FULL_SEQUENCE: [Subcommand; 11] = [
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
];

/// Runs every stage into `out` and returns each artifact's bytes except
/// config snapshots, which record the output path.
fn run_tiny(out: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut cfg = ExperimentConfig::parse_str(TINY).map_err(err)?;
    cfg.out = out.to_path_buf();
    let mut files = Vec::new();
    for sub in FULL_SEQUENCE {
        let record = dispatch(sub, &cfg).map_err(|e| format!("{sub}: {e}"))?;
        for a in record.artifacts {
            if a.extension().is_some_and(|e| e == "conf") {
                continue;
            }
            let path = out.join(&a);
            if path.is_file() {
                files.push((a.display().to_string(), std::fs::read(&path).map_err(err)?));
            } else {
                for entry in std::fs::read_dir(&path).map_err(err)? {
                    let p = entry.map_err(err)?.path();
                    files.push((
                        p.display().to_string().replace(&out.display().to_string(), ""),
                        std::fs::read(&p).map_err(err)?,
                    ));
                }
            }
        }
    }
    files.sort();
    Ok(files)
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let a = run_tiny(&dir.path().join("a"))?;
    let b = run_tiny(&dir.path().join("b"))?;
    ensure(a.len() == b.len(), format!("{} vs {} artifacts", a.len(), b.len()))?;
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        ensure(na == nb, format!("artifact sets differ at {na} / {nb}"))?;
        ensure(ba == bb, format!("{na} differs between reruns"))?;
    }
    ensure(a.iter().any(|(n, _)| n.ends_with("report.md")), "no report produced")?;
    Ok(format!("{} artifacts bit-identical across two full runs", a.len()))
}

/// Shared state of the two training criteria: the mask stack trained for
/// the guidance sweep is reused by the segmentation benchmark.
struct Desk {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    layout: Layout,
}

const REPLICATION_SEEDS: [u64; 3] = [11, 12, 13];
const SEG_EPOCHS: usize = 20;

fn desk() -> Result<Desk, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut cfg = ExperimentConfig::default();
    cfg.out = dir.path().to_path_buf();
    cfg.scale = 0.125;
    cfg.seg_train.epochs = SEG_EPOCHS;
    cfg.sweep.c_grid = vec![0.1, 0.3, 0.5, 0.7, 0.9, 1.1];
    cfg.sweep.guidances = vec![1.0, 4.0];
    cfg.sweep.per_point = 20;
    cfg.validate().map_err(err)?;
    let layout = Layout::new(&cfg.out);
    Ok(Desk { _dir: dir, cfg, layout })
}

fn guidance_trend(desk: &Desk) -> Outcome {
    let start = Instant::now();
    for sub in [
        Subcommand::GenData,
        Subcommand::TrainMaskAe,
        Subcommand::TrainMaskDm,
        Subcommand::Sweep,
    ] {
        dispatch(sub, &desk.cfg).map_err(|e| format!("{sub}: {e}"))?;
    }
    let text = std::fs::read_to_string(desk.layout.sweep().join("sweep.json")).map_err(err)?;
    let rows: Vec<SweepRow> = serde_json::from_str(&text).map_err(err)?;
    let curve = |g: f64| -> (Vec<f64>, Vec<f64>) { rows.iter().filter(|r| r.guidance == g).map(|r| (r.c, r.mean_ratio)).unzip() };
    let (c4, r4) = curve(4.0);
    let (c1, r1) = curve(1.0);
    let rho = spearman(&c4, &r4).map_err(err)?;
    let (s4, s1) = (
        least_squares_slope(&c4, &r4).map_err(err)?,
        least_squares_slope(&c1, &r1).map_err(err)?,
    );
    let fmt = |r: &[f64]| r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "Spearman(G=4) {rho:.3}, slope G=4 {s4:.4} vs G=1 {s1:.4}; ratios G=1 [{}], G=4 [{}]; {:.0}s",
        fmt(&r1),
        fmt(&r4),
        start.elapsed().as_secs_f64()
    );
    ensure(rho >= 0.9, format!("{detail}: Spearman below 0.9"))?;
    ensure(s4 > s1, format!("{detail}: guidance does not steepen the slope"))?;
    within(start.elapsed(), 30 * 60).map_err(|e| format!("{detail}: {e}"))?;
    Ok(detail)
}

fn segmentation_benchmark(desk: &Desk) -> Outcome {
    let start = Instant::now();
    for sub in [Subcommand::TrainImageAe, Subcommand::TrainImageDm] {
        dispatch(sub, &desk.cfg).map_err(|e| format!("{sub}: {e}"))?;
    }
    let mut wins = (0, 0);
    let mut lines = Vec::new();
    for seed in REPLICATION_SEEDS {
        let mut cfg = desk.cfg.clone();
        cfg.seed = seed;
        experiment::synthesize(&cfg, &desk.layout).map_err(err)?;
        experiment::compose(&cfg, &desk.layout).map_err(err)?;
        experiment::train_seg(&cfg, &desk.layout).map_err(err)?;
        experiment::evaluate(&cfg, &desk.layout).map_err(err)?;
        let text = std::fs::read_to_string(desk.layout.report().join("metrics.json")).map_err(err)?;
        let report: MetricsReport = serde_json::from_str(&text).map_err(err)?;
        let m = |name: &str| report.models.get(name).ok_or_else(|| format!("no metrics for {name}"));
        let (real, syn, aug) = (m("seg_real")?, m("seg_syn")?, m("seg_aug")?);
        wins.0 += (aug.volume_mae.0 <= real.volume_mae.0) as usize;
        wins.1 += (syn.volume_error.1 <= real.volume_error.1) as usize;
        lines.push(format!(
            "seed {seed}: MAE real {:.1} aug {:.1}, error std real {:.1} syn {:.1}, Dice real {:.3} syn {:.3} aug {:.3}",
            real.volume_mae.0, aug.volume_mae.0, real.volume_error.1, syn.volume_error.1, real.dice.0, syn.dice.0, aug.dice.0
        ));
    }
    let detail = format!(
        "MAE(aug) <= MAE(real) in {}/3, std(syn) <= std(real) in {}/3; {}; {:.0}s",
        wins.0,
        wins.1,
        lines.join("; "),
        start.elapsed().as_secs_f64()
    );
    ensure(wins.0 >= 2 && wins.1 >= 2, detail.clone())?;
    within(start.elapsed(), 60 * 60).map_err(|e| format!("{detail}: {e}"))?;
    Ok(detail)
}

fn report(n: usize, what: &str, outcome: Option<Outcome>) -> bool {
    match outcome {
        Some(Ok(detail)) => {
            println!("criterion {n} PASS {what}: {detail}");
            true
        }
        Some(Err(detail)) => {
            println!("criterion {n} FAIL {what}: {detail}");
            false
        }
        None => {
            println!("criterion {n} SKIP {what}");
            true
        }
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()))
}

fn main() {
    let quick = std::env::var("VENTRIGEN_ACCEPTANCE").is_ok_and(|v| v == "quick");
    let mut ok = true;
    ok &= report(1, "sampler oracle", Some(guarded(samplers)));
    ok &= report(2, "forward marginals", Some(guarded(forward_marginals)));
    ok &= report(3, "gradients", Some(guarded(gradients)));
    ok &= report(4, "guidance identities", Some(guarded(cfg_identities)));
    let desk = (!quick).then(desk);
    let with_desk = |f: fn(&Desk) -> Outcome| desk.as_ref().map(|d| guarded(|| f(d.as_ref().map_err(Clone::clone)?)));
    ok &= report(5, "guidance trend", with_desk(guidance_trend));
    ok &= report(6, "composition counts", Some(guarded(composition_counts)));
    ok &= report(7, "segmentation benchmark", with_desk(segmentation_benchmark));
    ok &= report(8, "metric oracles", Some(guarded(metric_oracles)));
    ok &= report(9, "reproducibility", Some(guarded(reproducibility)));
    if !ok {
        std::process::exit(1);
    }
}
