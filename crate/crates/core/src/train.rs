//! Minibatch training loop shared by every model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use vg_tensor::optim::{Adam, AdamConfig};
use vg_tensor::{ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, lr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr,
            clip: 1.0,
        }
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.clip < 0.0 {
            return Err(Error::InvalidArgument(format!("{stage}: invalid training settings {self:?}")));
        }
        Ok(())
    }
}

/// Shuffled index batches covering `0..n` once; the last may be short.
pub fn batches(n: usize, batch_size: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn ensure_finite(stage: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            stage: stage.to_string(),
            step,
            loss,
        })
    }
}

/// Mean training loss per epoch, plus a fixed-probe loss measured before
/// and after training where the caller records one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<f64>,
    pub initial_probe: Option<f64>,
    pub final_probe: Option<f64>,
}

impl LossHistory {
    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied()
    }
}

/// Rows `idx` of a tensor whose leading axis indexes items.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let per = t.numel() / t.shape()[0];
    let mut values = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        values.extend_from_slice(&t.values()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, values).expect("sized from source")
}

/// Stacks same-shaped tensors along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut values = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(vg_tensor::TensorError::mismatch("stack", first.shape(), t.shape()).into());
        }
        values.extend_from_slice(t.values());
    }
    Ok(Tensor::new(&shape, values)?)
}

/// Backpropagates `loss`, then clips and applies one Adam update to `store`.
pub fn apply_step(tape: &mut Tape, loss: Var, store: &mut ParamStore, adam: &mut Adam, clip: f64) -> Result<()> {
    tape.backward(loss)?;
    store.zero_grad();
    tape.accumulate_into(store);
    if clip > 0.0 {
        store.clip_grad_norm(clip);
    }
    adam.step(store)?;
    Ok(())
}

/// Final learning rate as a fraction of the initial one.
pub const LR_FLOOR: f64 = 0.1;

/// Cosine decay from `base` at step 0 to `LR_FLOOR·base` at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
    base * (LR_FLOOR + (1.0 - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Runs `config.epochs` passes over `n` items with a cosine-annealed
/// learning rate. `loss_fn` builds the batch loss on a fresh tape.
pub fn run_epochs<F>(
    stage: &str,
    store: &mut ParamStore,
    n: usize,
    config: &TrainConfig,
    rng: &mut Stream,
    mut loss_fn: F,
) -> Result<LossHistory>
where
    F: FnMut(&mut Tape, &ParamStore, &[usize], &mut Stream) -> Result<Var>,
{
    config.validate(stage)?;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{stage}: empty training set")));
    }
    let mut adam = Adam::new(store, AdamConfig::with_lr(config.lr));
    let mut history = LossHistory::default();
    let mut step = 0;
    let total_steps = config.epochs * n.div_ceil(config.batch_size);
    for _ in 0..config.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batches(n, config.batch_size, rng) {
            adam.config.lr = cosine_lr(config.lr, step, total_steps);
            let mut tape = Tape::new();
            let loss = loss_fn(&mut tape, store, &batch, rng)?;
            let value = tape.values(loss)[0];
            ensure_finite(stage, step, value)?;
            apply_step(&mut tape, loss, store, &mut adam, config.clip)?;
            total += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        history.epochs.push(total / count as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn gather_and_stack_rows() {
        let t = Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = gather(&t, &[2, 0]);
        assert_eq!((g.shape(), g.values()), (&[2, 2][..], &[4.0, 5.0, 0.0, 1.0][..]));
        let rows = [Tensor::zeros(&[2]), Tensor::filled(&[2], 1.0)];
        assert_eq!(stack(&rows).unwrap().shape(), &[2, 2]);
        assert!(stack(&[Tensor::zeros(&[2]), Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2e-3, 0, 100), 2e-3);
        assert!((cosine_lr(2e-3, 99, 100) - 2e-4).abs() < 1e-18);
        assert!((cosine_lr(1.0, 50, 101) - 0.55).abs() < 1e-12);
        assert_eq!(cosine_lr(1.0, 0, 1), 1.0);
        let lrs: Vec<f64> = (0..20).map(|s| cosine_lr(1.0, s, 20)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut r = rng::stream(1, "test");
        let b = batches(10, 4, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fits_a_line_and_reports_divergence() {
        let xs: Vec<f64> = (0..32).map(|i| i as f64 / 16.0 - 1.0).collect();
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.0));
        let mut r = rng::stream(2, "test");
        let config = TrainConfig::new(60, 8, 0.05);
        let fit = |tape: &mut Tape, store: &ParamStore, idx: &[usize], _: &mut Stream| {
            let x: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
            let y: Vec<f64> = x.iter().map(|v| 2.5 * v).collect();
            let x = tape.constant(&[idx.len()], x)?;
            let y = tape.constant(&[idx.len()], y)?;
            let wv = tape.param(store, w);
            let p = tape.mul(x, wv)?;
            let d = tape.sub(p, y)?;
            let d = tape.square(d);
            Ok(tape.mean(d))
        };
        let h = run_epochs("line", &mut store, 32, &config, &mut r, fit).unwrap();
        assert!(h.last().unwrap() < h.epochs[0]);
        assert!((store.get(w).values()[0] - 2.5).abs() < 0.05);

        let bad = |tape: &mut Tape, store: &ParamStore, _: &[usize], _: &mut Stream| {
            let wv = tape.param(store, w);
            Ok(tape.scale(wv, f64::NAN))
        };
        let err = run_epochs("nan", &mut store, 4, &config, &mut r, bad).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }));
    }
}
