//! Noise schedules, forward corruption, samplers and the denoising loss.
//!
//! Timesteps are 1-based; index 0 denotes clean data with `ᾱ_0 = 1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vg_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t² = β_t`.
    Beta,
    /// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    BetaTilde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossWeighting {
    /// Unweighted noise regression.
    #[serde(rename = "simplified")]
    Simplified,
    /// Per-timestep variational weight `β_t² / (2σ_t² α_t (1 − ᾱ_t))`.
    #[serde(rename = "eq2")]
    Variational,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Evenly spaced betas from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, sigma_mode: SigmaMode) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta range must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        for (i, b) in beta.iter_mut().enumerate().skip(1) {
            *b = beta_start + (beta_end - beta_start) * (i - 1) as f64 / (steps - 1) as f64;
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            let var = match sigma_mode {
                SigmaMode::Beta => beta[t],
                SigmaMode::BetaTilde => (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t],
            };
            sigma[t] = var.sqrt();
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Variational loss weight at `t`. Where `σ_t` vanishes (`t = 1` under
    /// [`SigmaMode::BetaTilde`]) the `σ_t² = β_t` value is used instead.
    pub fn variational_weight(&self, t: usize) -> f64 {
        let (b, a, ab) = (self.beta[t], self.alpha[t], self.alpha_bar[t]);
        let var = if self.sigma[t] > 0.0 { self.sigma[t] * self.sigma[t] } else { b };
        b * b / (2.0 * var * a * (1.0 - ab))
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        let lo = if allow_zero { 0 } else { 1 };
        if t < lo || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [{lo}, {}]", self.steps())));
        }
        Ok(())
    }
}

/// Schedule and objective settings for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
    pub loss_weighting: LossWeighting,
}

impl Default for DiffusionConfig {
    /// 200 steps with the 1000-step betas scaled by 5, which keeps `ᾱ_T`
    /// close to zero.
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            sigma_mode: SigmaMode::Beta,
            loss_weighting: LossWeighting::Simplified,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end, self.sigma_mode)
    }
}

/// Per-channel affine standardization of `(n, C, H, W)` latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn fit(latents: &Tensor) -> Self {
        let s = latents.shape();
        let (n, c, plane) = (s[0], s[1], s[2..].iter().product::<usize>());
        let v = latents.values();
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let items = (0..n).flat_map(|i| &v[(i * c + ch) * plane..(i * c + ch + 1) * plane]);
            let m = items.clone().sum::<f64>() / count;
            let var = items.map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let s = t.shape();
        let (c, plane) = (s[1], s[2..].iter().product::<usize>());
        let values = t
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let ch = (i / plane) % c;
                f(x, self.mean[ch], self.std[ch])
            })
            .collect();
        Tensor::new(s, values).expect("same shape")
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.map(t, |x, m, s| x * s + m)
    }
}

/// Scalar condition plus the unconditional flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub c: f64,
    pub unconditional: bool,
}

impl Condition {
    pub fn new(c: f64) -> Self {
        Self { c, unconditional: false }
    }

    pub fn unconditional(c: f64) -> Self {
        Self { c, unconditional: true }
    }

    /// The `(c, flag)` feature pair fed to denoisers.
    pub fn features(&self) -> [f64; 2] {
        [self.c, if self.unconditional { 1.0 } else { 0.0 }]
    }
}

/// With probability `p`, marks the condition unconditional and redraws `c`
/// uniformly from `[0, 1]`.
pub fn condition_dropout<R: Rng + ?Sized>(cond: Condition, p: f64, rng: &mut R) -> Condition {
    if rng.gen::<f64>() < p {
        Condition::unconditional(rng.gen_range(0.0..1.0))
    } else {
        cond
    }
}

/// `G·cond + (1−G)·uncond`, evaluated as `uncond + G·(cond − uncond)` so
/// that equal predictions pass through unchanged for every `G`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, guidance: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(vg_tensor::TensorError::mismatch("cfg_combine", eps_cond.shape(), eps_uncond.shape()).into());
    }
    if guidance == 1.0 {
        return Ok(eps_cond.clone());
    }
    let values = eps_cond
        .values()
        .iter()
        .zip(eps_uncond.values())
        .map(|(c, u)| u + guidance * (c - u))
        .collect();
    Ok(Tensor::new(eps_cond.shape(), values)?)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(vg_tensor::TensorError::mismatch(op, a.shape(), b.shape()).into());
    }
    Ok(())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`; `t = 0` returns `x0`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t, true)?;
    same_shape("forward_sample", x0, eps)?;
    let (a, s) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    let values = x0.values().iter().zip(eps.values()).map(|(x, e)| a * x + s * e).collect();
    Ok(Tensor::new(x0.shape(), values)?)
}

/// Forward-samples a batch whose leading axis indexes items, with one
/// timestep per item.
pub fn forward_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    same_shape("forward_sample_batch", x0, eps)?;
    let n = x0.shape()[0];
    if ts.len() != n {
        return Err(Error::InvalidArgument(format!("{} timesteps for batch of {n}", ts.len())));
    }
    let per = x0.numel() / n.max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check(t, true)?;
        let (a, s) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
        let span = i * per..(i + 1) * per;
        out.extend(
            x0.values()[span.clone()]
                .iter()
                .zip(&eps.values()[span])
                .map(|(x, e)| a * x + s * e),
        );
    }
    Ok(Tensor::new(x0.shape(), out)?)
}

/// One ancestral step. `z` must be zero at `t = 1`.
pub fn ddpm_step(x_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    sched.check(t, false)?;
    same_shape("ddpm_step", x_t, eps_hat)?;
    same_shape("ddpm_step", x_t, z)?;
    if t == 1 && z.values().iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidArgument("noise must be zero at the final step".into()));
    }
    let inv = 1.0 / sched.alpha(t).sqrt();
    let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sigma = sched.sigma(t);
    let values = x_t
        .values()
        .iter()
        .zip(eps_hat.values())
        .zip(z.values())
        .map(|((x, e), z)| inv * (x - k * e) + sigma * z)
        .collect();
    Ok(Tensor::new(x_t.shape(), values)?)
}

pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, values).expect("sized from shape")
}

/// Full ancestral sampling from pure noise over all `T` steps.
pub fn ddpm_sample<F>(mut eps_fn: F, shape: &[usize], sched: &NoiseSchedule, seed: u64) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut rng = rng::stream(seed, "ddpm");
    let mut x = gaussian(shape, &mut rng);
    for t in (1..=sched.steps()).rev() {
        let eps = eps_fn(&x, t)?;
        let z = if t > 1 { gaussian(shape, &mut rng) } else { Tensor::zeros(shape) };
        x = ddpm_step(&x, t, &eps, sched, &z)?;
    }
    Ok(x)
}

/// Descending timesteps with uniform stride from `T` down to 1.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!("DDIM steps {steps} outside [1, {total}]")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let stride = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps).rev().map(|i| 1 + (i as f64 * stride).round() as usize).collect())
}

/// One deterministic DDIM update from `t` to `t_next` (`t_next = 0` yields
/// the clean estimate).
pub fn ddim_step(x_t: &Tensor, t: usize, t_next: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check(t, false)?;
    sched.check(t_next, true)?;
    same_shape("ddim_step", x_t, eps_hat)?;
    let (a, s) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    let (an, sn) = (sched.alpha_bar(t_next).sqrt(), (1.0 - sched.alpha_bar(t_next)).sqrt());
    let values = x_t
        .values()
        .iter()
        .zip(eps_hat.values())
        .map(|(x, e)| {
            let x0 = (x - s * e) / a;
            an * x0 + sn * e
        })
        .collect();
    Ok(Tensor::new(x_t.shape(), values)?)
}

/// Deterministic DDIM sampling with classifier-free guidance. `eps_fn` is
/// called once per step at `guidance == 1` and twice otherwise.
pub fn ddim_sample<F>(
    eps_fn: F,
    shape: &[usize],
    sched: &NoiseSchedule,
    steps: usize,
    cond: Condition,
    guidance: f64,
    seed: u64,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, Condition) -> Result<Tensor>,
{
    let x = gaussian(shape, &mut rng::stream(seed, "ddim"));
    ddim_sample_from(eps_fn, x, sched, steps, cond, guidance)
}

/// [`ddim_sample`] starting from explicit initial noise `x_T`.
pub fn ddim_sample_from<F>(
    mut eps_fn: F,
    mut x: Tensor,
    sched: &NoiseSchedule,
    steps: usize,
    cond: Condition,
    guidance: f64,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize, Condition) -> Result<Tensor>,
{
    let ts = ddim_timesteps(sched.steps(), steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let eps_c = eps_fn(&x, t, cond)?;
        let eps = if guidance == 1.0 {
            eps_c
        } else {
            let eps_u = eps_fn(&x, t, Condition::unconditional(cond.c))?;
            cfg_combine(&eps_c, &eps_u, guidance)?
        };
        let next = ts.get(i + 1).copied().unwrap_or(0);
        x = ddim_step(&x, t, next, &eps, sched)?;
    }
    Ok(x)
}

/// Noise-regression loss at given timesteps and noise. `denoise` maps
/// `(tape, x_t, timesteps, conditions)` to predicted noise.
pub fn training_loss_at<F>(
    tape: &mut Tape,
    mut denoise: F,
    x0: &Tensor,
    conditions: &[Condition],
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
    weighting: LossWeighting,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, &[usize], &[Condition]) -> Result<Var>,
{
    let n = x0.shape().first().copied().unwrap_or(0);
    if n == 0 || conditions.len() != n {
        return Err(Error::InvalidArgument(format!("batch of {n} with {} conditions", conditions.len())));
    }
    let x_t = forward_sample_batch(x0, ts, eps, sched)?;
    let x_t = tape.leaf(x_t);
    let pred = denoise(tape, x_t, ts, conditions)?;
    let target = tape.leaf(eps.clone());
    let diff = tape.sub(target, pred)?;
    let sq = tape.square(diff);
    let per_item = match weighting {
        LossWeighting::Simplified => sq,
        LossWeighting::Variational => {
            let mut wshape = vec![1; x0.shape().len()];
            wshape[0] = n;
            let w = ts.iter().map(|&t| sched.variational_weight(t)).collect();
            let w = tape.constant(&wshape, w)?;
            tape.mul(sq, w)?
        }
    };
    let total = tape.sum(per_item);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Batch-mean of `‖ε − ε̂‖²` with `t ~ U{1..T}` and `ε ~ N(0, I)` per item.
pub fn training_loss<F, R>(
    tape: &mut Tape,
    denoise: F,
    x0: &Tensor,
    conditions: &[Condition],
    sched: &NoiseSchedule,
    weighting: LossWeighting,
    rng: &mut R,
) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, &[usize], &[Condition]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let n = x0.shape().first().copied().unwrap_or(0);
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=sched.steps())).collect();
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    training_loss_at(tape, denoise, x0, conditions, &ts, &eps, sched, weighting)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02, SigmaMode::Beta).unwrap()
    }

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
    }

    #[test]
    fn schedule_values() {
        let s = default_schedule();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        let mut oracle = 1.0;
        for i in 0..1000 {
            oracle *= 1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 999.0);
        }
        assert!((s.alpha_bar(1000) - oracle).abs() < 1e-12);
        let half = NoiseSchedule::linear(2, 0.5, 0.5, SigmaMode::Beta).unwrap();
        assert_eq!(half.alpha_bar(2), 0.25);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn training_default_reaches_near_pure_noise() {
        let s = DiffusionConfig::default().schedule().unwrap();
        assert_eq!(s.steps(), 200);
        assert!(s.alpha_bar(200) < 1e-4);
    }

    #[test]
    fn latent_norm_standardizes_per_channel() {
        let mut r = rng::stream(9, "test");
        let mut t = Tensor::randn(&[50, 2, 3, 3], 1.0, &mut r);
        for (i, v) in t.values_mut().iter_mut().enumerate() {
            if (i / 9) % 2 == 1 {
                *v = 5.0 + 10.0 * *v;
            }
        }
        let norm = LatentNorm::fit(&t);
        let z = norm.apply(&t);
        let again = LatentNorm::fit(&z);
        for ch in 0..2 {
            assert!(again.mean[ch].abs() < 1e-12);
            assert!((again.std[ch] - 1.0).abs() < 1e-12);
        }
        for (a, b) in norm.invert(&z).values().iter().zip(t.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02, SigmaMode::Beta).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02, SigmaMode::Beta).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02, SigmaMode::Beta).is_err());
        assert!(NoiseSchedule::linear(10, 0.01, 1.0, SigmaMode::Beta).is_err());
    }

    #[test]
    fn beta_tilde_sigma() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.05, SigmaMode::BetaTilde).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        let t = 40;
        let expect = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
        assert!((s.sigma(t).powi(2) - expect).abs() < 1e-15);
        assert!(s.variational_weight(1).is_finite());
    }

    #[test]
    fn forward_sample_identities() {
        let s = default_schedule();
        let x0 = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let eps = Tensor::new(&[3], vec![0.3, 0.1, -0.7]).unwrap();
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let scaled = forward_sample(&x0, 500, &Tensor::zeros(&[3]), &s).unwrap();
        let a = s.alpha_bar(500).sqrt();
        assert_eq!(scaled.values(), &[0.5 * a, -1.0 * a, 2.0 * a]);
        assert!(forward_sample(&x0, 1001, &eps, &s).is_err());
    }

    #[test]
    fn forward_marginal_monte_carlo() {
        let s = default_schedule();
        let n = 10_000;
        let mut rng = rng::stream(1, "test");
        for &(x0v, t) in &[(1.5, 50), (-0.7, 400), (2.0, 900)] {
            let x0 = Tensor::filled(&[n], x0v);
            let eps = Tensor::randn(&[n], 1.0, &mut rng);
            let x = forward_sample(&x0, t, &eps, &s).unwrap();
            let (m, v) = mean_var(x.values());
            let (mu, var) = (s.alpha_bar(t).sqrt() * x0v, 1.0 - s.alpha_bar(t));
            let se_m = (var / n as f64).sqrt();
            let se_v = var * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((m - mu).abs() < 3.0 * se_m, "t={t} mean {m} vs {mu}");
            assert!((v - var).abs() < 3.0 * se_v, "t={t} var {v} vs {var}");
        }
    }

    fn loss_with<F>(denoise: F, x0: &Tensor, ts: &[usize], eps: &Tensor, w: LossWeighting) -> f64
    where
        F: FnMut(&mut Tape, Var, &[usize], &[Condition]) -> Result<Var>,
    {
        let s = default_schedule();
        let n = x0.shape()[0];
        let conds = vec![Condition::new(0.5); n];
        let mut tape = Tape::new();
        let l = training_loss_at(&mut tape, denoise, x0, &conds, ts, eps, &s, w).unwrap();
        tape.values(l)[0]
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let mut rng = rng::stream(2, "test");
        let x0 = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let ts = [1, 10, 500, 1000];
        for w in [LossWeighting::Simplified, LossWeighting::Variational] {
            let e = eps.clone();
            let oracle = move |tape: &mut Tape, _x: Var, _: &[usize], _: &[Condition]| Ok(tape.leaf(e.clone()));
            assert_eq!(loss_with(oracle, &x0, &ts, &eps, w), 0.0);
        }
    }

    #[test]
    fn zero_predictor_loss_matches_chi_square_mean() {
        let (n, d) = (4000, 16);
        let s = default_schedule();
        let mut rng = rng::stream(3, "test");
        let x0 = Tensor::randn(&[n, d], 1.0, &mut rng);
        let conds = vec![Condition::new(0.0); n];
        let mut tape = Tape::new();
        let zero = |tape: &mut Tape, x: Var, _: &[usize], _: &[Condition]| Ok(tape.scale(x, 0.0));
        let l = training_loss(&mut tape, zero, &x0, &conds, &s, LossWeighting::Simplified, &mut rng).unwrap();
        let loss = tape.values(l)[0];
        // Per-item ‖ε‖² is χ²(d): mean d, variance 2d.
        let se = (2.0 * d as f64 / n as f64).sqrt();
        assert!((loss - d as f64).abs() < 4.0 * se, "loss {loss}");
    }

    #[test]
    fn variational_weighting_factorizes_at_fixed_t() {
        let s = default_schedule();
        let mut rng = rng::stream(4, "test");
        let x0 = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let t = 250;
        let ts = [t; 3];
        let half = |tape: &mut Tape, x: Var, _: &[usize], _: &[Condition]| Ok(tape.scale(x, 0.5));
        let plain = loss_with(half, &x0, &ts, &eps, LossWeighting::Simplified);
        let weighted = loss_with(half, &x0, &ts, &eps, LossWeighting::Variational);
        let w = s.variational_weight(t);
        let expect = s.beta(t).powi(2) / (2.0 * s.beta(t) * s.alpha(t) * (1.0 - s.alpha_bar(t)));
        assert!((w - expect).abs() < 1e-18);
        assert!((weighted - plain * w).abs() < 1e-12 * plain.abs());
    }

    #[test]
    fn ddpm_step_inverts_forward_at_t1() {
        let s = default_schedule();
        let mut rng = rng::stream(5, "test");
        let x0 = Tensor::randn(&[16], 1.0, &mut rng);
        let eps = Tensor::randn(&[16], 1.0, &mut rng);
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        let back = ddpm_step(&x1, 1, &eps, &s, &Tensor::zeros(&[16])).unwrap();
        for (a, b) in back.values().iter().zip(x0.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        let z = Tensor::filled(&[16], 0.1);
        assert!(ddpm_step(&x1, 1, &eps, &s, &z).is_err());
    }

    #[test]
    fn ddpm_step_is_continuous_in_beta() {
        let s = NoiseSchedule::linear(10, 1e-12, 1e-12, SigmaMode::Beta).unwrap();
        let x = Tensor::new(&[2], vec![0.4, -1.3]).unwrap();
        let eps = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let z = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        let y = ddpm_step(&x, 5, &eps, &s, &z).unwrap();
        for (a, b) in y.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    /// Optimal noise predictor for scalar data `x0 ~ N(mean, var)`.
    fn gaussian_oracle(s: &NoiseSchedule, mean: f64, var: f64) -> impl Fn(&Tensor, usize) -> Result<Tensor> + '_ {
        move |x: &Tensor, t: usize| {
            let ab = s.alpha_bar(t);
            let k = (1.0 - ab).sqrt() / (ab * var + 1.0 - ab);
            let values = x.values().iter().map(|v| k * (v - ab.sqrt() * mean)).collect();
            Ok(Tensor::new(x.shape(), values)?)
        }
    }

    #[test]
    fn ancestral_sampling_reproduces_gaussian_data() {
        let s = default_schedule();
        let oracle = gaussian_oracle(&s, 2.0, 0.25);
        let x = ddpm_sample(|x, t| oracle(x, t), &[5000], &s, 6).unwrap();
        let (m, v) = mean_var(x.values());
        assert!((m - 2.0).abs() < 0.05, "mean {m}");
        assert!((v - 0.25).abs() < 0.15 * 0.25, "variance {v}");
    }

    #[test]
    fn ddim_sampling_reproduces_gaussian_mean() {
        let s = default_schedule();
        let oracle = gaussian_oracle(&s, 2.0, 0.25);
        let x = ddim_sample(|x, t, _| oracle(x, t), &[5000], &s, 50, Condition::new(0.0), 1.0, 7).unwrap();
        let (m, v) = mean_var(x.values());
        assert!((m - 2.0).abs() < 0.05, "mean {m}");
        assert!((v - 0.25).abs() < 0.15 * 0.25, "variance {v}");
    }

    #[test]
    fn ddim_timestep_subsequence() {
        let full = ddim_timesteps(1000, 1000).unwrap();
        assert_eq!(full, (1..=1000).rev().collect::<Vec<_>>());
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!((ts.len(), ts[0], ts[49]), (50, 1000, 1));
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_timesteps(200, 1).unwrap(), vec![200]);
        assert!(ddim_timesteps(200, 201).is_err());
    }

    #[test]
    fn ddim_is_deterministic_and_skips_uncond_at_unit_guidance() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02, SigmaMode::Beta).unwrap();
        let mut calls = 0;
        let run = |g: f64, calls: &mut usize| {
            ddim_sample(
                |x, t, c| {
                    *calls += 1;
                    let k = 0.1 * t as f64 / 200.0 + if c.unconditional { 0.0 } else { c.c };
                    Ok(Tensor::new(x.shape(), x.values().iter().map(|v| k * v).collect())?)
                },
                &[2, 3],
                &s,
                20,
                Condition::new(0.3),
                g,
                11,
            )
            .unwrap()
        };
        let a = run(1.0, &mut calls);
        assert_eq!(calls, 20);
        let b = run(1.0, &mut calls);
        assert_eq!(a, b);
        calls = 0;
        let guided = run(3.0, &mut calls);
        assert_eq!(calls, 40);
        assert_ne!(guided, a);
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::new(&[2], vec![0.5, -0.25]).unwrap();
        let u = Tensor::new(&[2], vec![0.2, 0.75]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        let g = cfg_combine(&Tensor::scalar(0.5), &Tensor::scalar(0.2), 3.0).unwrap();
        assert!((g.values()[0] - 1.1).abs() < 1e-15);
        for guidance in [0.0, 2.0, 7.5] {
            assert_eq!(cfg_combine(&c, &c, guidance).unwrap(), c);
        }
        assert!(cfg_combine(&c, &Tensor::zeros(&[3]), 2.0).is_err());
    }

    #[test]
    fn condition_dropout_rates() {
        let mut rng = rng::stream(8, "test");
        let base = Condition::new(0.7);
        assert!((0..1000).all(|_| condition_dropout(base, 0.0, &mut rng) == base));
        let all: Vec<Condition> = (0..1000).map(|_| condition_dropout(base, 1.0, &mut rng)).collect();
        assert!(all.iter().all(|c| c.unconditional && (0.0..1.0).contains(&c.c)));
        let (m, _) = mean_var(&all.iter().map(|c| c.c).collect::<Vec<_>>());
        assert!((m - 0.5).abs() < 0.05);
        let dropped = (0..10_000).filter(|_| condition_dropout(base, 0.2, &mut rng).unconditional).count();
        assert!((1800..=2200).contains(&dropped), "{dropped}");
    }
}
