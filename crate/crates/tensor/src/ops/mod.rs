mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod shape;

pub(crate) use conv::ConvGeom;
pub(crate) use elementwise::UnaryKind;

use crate::tape::{Grads, Op};
use crate::tensor::Tensor;

pub(crate) fn backward(op: &Op, out: &Tensor, g: &[f64], grads: &mut Grads<'_>) {
    match op {
        Op::Leaf { .. } => {}
        Op::Binary { kind, a, b, bcast } => elementwise::binary_backward(kind, *a, *b, bcast.as_deref(), g, grads),
        Op::Scale { a, k } => grads.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
        Op::Offset { a } => grads.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
        Op::Unary { kind, a } => elementwise::unary_backward(kind, *a, out, g, grads),
        Op::Clamp { a, lo, hi } => elementwise::clamp_backward(*a, *lo, *hi, g, grads),
        Op::MatMul { a, b, batch, m, k, n } => linalg::matmul_backward(*a, *b, *batch, *m, *k, *n, g, grads),
        Op::Conv2d { x, w, bias, geom } => conv::conv2d_backward(*x, *w, *bias, geom, g, grads),
        Op::ConvTranspose2d { x, w, bias, geom } => conv::conv_transpose2d_backward(*x, *w, *bias, geom, g, grads),
        Op::Softmax { a, outer, len, inner } => norm::softmax_backward(*a, out, *outer, *len, *inner, g, grads),
        Op::GroupNorm { x, n, groups, rstd } => norm::group_norm_backward(*x, out, *n, *groups, rstd, g, grads),
        Op::Sum { a, scale } => grads.with(*a, |ga| ga.iter_mut().for_each(|x| *x += scale * g[0])),
        Op::SumTo { a, map } => grads.with(*a, |ga| ga.iter_mut().zip(map).for_each(|(x, &j)| *x += g[j])),
        Op::Reshape { a } => grads.with(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
        Op::Gather { a, map } => grads.with(*a, |ga| map.iter().zip(g).for_each(|(&j, y)| ga[j] += y)),
        Op::Concat { parts, outer, inner } => shape::concat_backward(parts, *outer, inner, g, grads),
        Op::Upsample { a, factor } => shape::upsample_backward(*a, *factor, g, grads),
        Op::AvgPool { a, k } => shape::avg_pool_backward(*a, *k, g, grads),
        Op::Embedding { table, labels, spatial } => loss::embedding_backward(*table, labels, *spatial, g, grads),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            classes,
            inner,
        } => loss::cross_entropy_backward(*logits, targets, probs, *classes, *inner, g, grads),
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each element of `big` (row-major), the flat offset of the element of
/// `small` it broadcasts from. `small` must be right-aligned compatible.
pub(crate) fn broadcast_map(big: &[usize], small: &[usize]) -> Vec<usize> {
    let rank = big.len();
    let pad = rank - small.len();
    let small_strides = strides(small);
    let eff: Vec<usize> = (0..rank)
        .map(|d| {
            if d < pad || small[d - pad] == 1 {
                0
            } else {
                small_strides[d - pad]
            }
        })
        .collect();
    let numel: usize = big.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < big[d] {
                break;
            }
            off -= eff[d] * big[d];
            idx[d] = 0;
        }
    }
    out
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_channel_bias() {
        let map = broadcast_map(&[2, 3, 2], &[3, 1]);
        assert_eq!(map, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }
}
