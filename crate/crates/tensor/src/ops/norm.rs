use crate::error::{Result, TensorError};
use crate::tape::{Grads, Op, Tape, Var};
use crate::tensor::Tensor;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.values(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|k| x[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (x[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                for k in 0..len {
                    out[base + k * inner] /= total;
                }
            }
        }
        Ok(self.push_op(&shape, out, Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// Parameter-free group normalization of `(n, c, ...)` over each group of
    /// `c / groups` channels and all trailing positions.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 {
            return Err(TensorError::invalid(
                "group_norm",
                format!("{groups} groups do not divide the channels of {shape:?}"),
            ));
        }
        let n = shape[0];
        let block = shape[1..].iter().product::<usize>() / groups;
        let v = self.values(x);
        let mut out = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(n * groups);
        for (src, dst) in v.chunks(block).zip(out.chunks_mut(block)) {
            let mean = src.iter().sum::<f64>() / block as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / block as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.push_op(&shape, out, Op::GroupNorm { x, n, groups, rstd }, &[x]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn softmax_backward(a: Var, out: &Tensor, outer: usize, len: usize, inner: usize, g: &[f64], grads: &mut Grads<'_>) {
    let y = out.values();
    grads.with(a, |ga| {
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let dot: f64 = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                for k in 0..len {
                    let j = base + k * inner;
                    ga[j] += y[j] * (g[j] - dot);
                }
            }
        }
    });
}

pub(crate) fn group_norm_backward(x: Var, out: &Tensor, n: usize, groups: usize, rstd: &[f64], g: &[f64], grads: &mut Grads<'_>) {
    let xhat = out.values();
    let block = xhat.len() / (n * groups);
    grads.with(x, |gx| {
        for (b, &r) in rstd.iter().enumerate() {
            let range = b * block..(b + 1) * block;
            let (gs, xs) = (&g[range.clone()], &xhat[range.clone()]);
            let mean_g = gs.iter().sum::<f64>() / block as f64;
            let mean_gx = gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>() / block as f64;
            for ((d, gi), xi) in gx[range].iter_mut().zip(gs).zip(xs) {
                *d += r * (gi - mean_g - xi * mean_gx);
            }
        }
    });
}
