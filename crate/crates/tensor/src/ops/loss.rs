use crate::error::{Result, TensorError};
use crate::tape::{Grads, Op, Tape, Var};

impl Tape {
    /// Looks up rows of `table: (classes, dim)` for each label of an
    /// `(n, h, w)` grid, producing `(n, dim, h, w)`.
    pub fn embedding(&mut self, table: Var, labels: &[usize], grid: [usize; 3]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let [classes, dim] = ts[..] else {
            return Err(TensorError::invalid("embedding", format!("table must be 2-D, got {ts:?}")));
        };
        let [n, h, w] = grid;
        if labels.len() != n * h * w {
            return Err(TensorError::mismatch("embedding", &[labels.len()], &grid));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::invalid("embedding", format!("label {bad} outside 0..{classes}")));
        }
        let spatial = h * w;
        let t = self.values(table);
        let mut out = vec![0.0; n * dim * spatial];
        for b in 0..n {
            for p in 0..spatial {
                let row = &t[labels[b * spatial + p] * dim..][..dim];
                for (e, v) in row.iter().enumerate() {
                    out[(b * dim + e) * spatial + p] = *v;
                }
            }
        }
        let op = Op::Embedding {
            table,
            labels: labels.to_vec(),
            spatial,
        };
        Ok(self.push_op(&[n, dim, h, w], out, op, &[table]))
    }

    /// Mean over all positions of `−log softmax(logits)[target]`, where
    /// `logits` is `(n, classes, ...)` and `targets` has one entry per
    /// `(n, ...)` position.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::invalid("cross_entropy", format!("logits {shape:?} lack a class axis")));
        }
        let (n, classes) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if targets.len() != n * inner {
            return Err(TensorError::mismatch("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::invalid("cross_entropy", format!("target {bad} outside 0..{classes}")));
        }
        let x = self.values(logits);
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for b in 0..n {
            for p in 0..inner {
                let idx = |k: usize| (b * classes + k) * inner + p;
                let max = (0..classes).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..classes).map(|k| (x[idx(k)] - max).exp()).sum();
                let log_z = max + sum.ln();
                for k in 0..classes {
                    probs[idx(k)] = (x[idx(k)] - log_z).exp();
                }
                total += log_z - x[idx(targets[b * inner + p])];
            }
        }
        let loss = total / (n * inner) as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            classes,
            inner,
        };
        Ok(self.push_op(&[1], vec![loss], op, &[logits]))
    }
}

pub(crate) fn embedding_backward(table: Var, labels: &[usize], spatial: usize, g: &[f64], grads: &mut Grads<'_>) {
    let dim = grads.shape(table)[1];
    grads.with(table, |gt| {
        for (i, &label) in labels.iter().enumerate() {
            let (b, p) = (i / spatial, i % spatial);
            for e in 0..dim {
                gt[label * dim + e] += g[(b * dim + e) * spatial + p];
            }
        }
    });
}

pub(crate) fn cross_entropy_backward(
    logits: Var,
    targets: &[usize],
    probs: &[f64],
    classes: usize,
    inner: usize,
    g: &[f64],
    grads: &mut Grads<'_>,
) {
    let scale = g[0] / targets.len() as f64;
    grads.with(logits, |gl| {
        for (i, &t) in targets.iter().enumerate() {
            let (b, p) = (i / inner, i % inner);
            for k in 0..classes {
                let j = (b * classes + k) * inner + p;
                let onehot = if k == t { 1.0 } else { 0.0 };
                gl[j] += scale * (probs[j] - onehot);
            }
        }
    });
}
