use super::{broadcast_map, strides};
use crate::error::{Result, TensorError};
use crate::tape::{Grads, Op, Tape, Var};

impl Tape {
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.values(a).iter().sum();
        self.push_op(&[1], vec![total], Op::Sum { a, scale: 1.0 }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let total: f64 = self.values(a).iter().sum();
        self.push_op(&[1], vec![total / n], Op::Sum { a, scale: 1.0 / n }, &[a])
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(TensorError::invalid("sum_axes", format!("axis {bad} out of range for {shape:?}")));
        }
        let mut reduced = shape.clone();
        for &ax in axes {
            reduced[ax] = 1;
        }
        let map = broadcast_map(&shape, &reduced);
        let mut out = vec![0.0; reduced.iter().product()];
        for (&j, v) in map.iter().zip(self.values(a)) {
            out[j] += v;
        }
        Ok(self.push_op(&reduced, out, Op::SumTo { a, map }, &[a]))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let count: usize = axes.iter().filter_map(|&ax| shape.get(ax)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::mismatch("reshape", self.shape(a), shape));
        }
        let values = self.values(a).to_vec();
        Ok(self.push_op(shape, values, Op::Reshape { a }, &[a]))
    }

    fn gather(&mut self, a: Var, shape: &[usize], map: Vec<usize>) -> Var {
        let src = self.values(a);
        let values = map.iter().map(|&j| src[j]).collect();
        self.push_op(shape, values, Op::Gather { a, map }, &[a])
    }

    /// Reorders dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {shape:?}"),
            ));
        }
        let src_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let numel: usize = shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        let mut off = 0;
        for _ in 0..numel {
            map.push(off);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= eff[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Ok(self.gather(a, &out_shape, map))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            map.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(a, &out_shape, map))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let inner: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * tail).collect();
        let mut out = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&inner) {
                out.extend_from_slice(&self.values(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push_op(
            &shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            parts,
        ))
    }

    /// Nearest-neighbour upsampling of the last two dims by `factor`.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || factor == 0 {
            return Err(TensorError::invalid("upsample_nearest", format!("cannot upsample {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(a).numel() / (h * w);
        let (h2, w2) = (h * factor, w * factor);
        let x = self.values(a);
        let mut out = vec![0.0; planes * h2 * w2];
        for p in 0..planes {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = x[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = h2;
        out_shape[r - 1] = w2;
        Ok(self.push_op(&out_shape, out, Op::Upsample { a, factor }, &[a]))
    }

    /// Non-overlapping `k×k` average pooling of the last two dims.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || k == 0 || shape[shape.len() - 2] % k != 0 || shape[shape.len() - 1] % k != 0 {
            return Err(TensorError::invalid("avg_pool2d", format!("window {k} does not tile {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(a).numel() / (h * w);
        let (h2, w2) = (h / k, w / k);
        let x = self.values(a);
        let mut out = vec![0.0; planes * h2 * w2];
        let norm = 1.0 / (k * k) as f64;
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * h2 + y / k) * w2 + xx / k] += x[(p * h + y) * w + xx] * norm;
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = h2;
        out_shape[r - 1] = w2;
        Ok(self.push_op(&out_shape, out, Op::AvgPool { a, k }, &[a]))
    }
}

pub(crate) fn concat_backward(parts: &[Var], outer: usize, inner: &[usize], g: &[f64], grads: &mut Grads<'_>) {
    let total: usize = inner.iter().sum();
    let mut offset = 0;
    for (&p, &len) in parts.iter().zip(inner) {
        grads.with(p, |gp| {
            for o in 0..outer {
                let src = &g[o * total + offset..o * total + offset + len];
                gp[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(x, y)| *x += y);
            }
        });
        offset += len;
    }
}

pub(crate) fn upsample_backward(a: Var, factor: usize, g: &[f64], grads: &mut Grads<'_>) {
    let shape = grads.shape(a);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (h2, w2) = (h * factor, w * factor);
    grads.with(a, |ga| {
        let planes = ga.len() / (h * w);
        for p in 0..planes {
            for y in 0..h2 {
                for x in 0..w2 {
                    ga[(p * h + y / factor) * w + x / factor] += g[(p * h2 + y) * w2 + x];
                }
            }
        }
    });
}

pub(crate) fn avg_pool_backward(a: Var, k: usize, g: &[f64], grads: &mut Grads<'_>) {
    let shape = grads.shape(a);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (h2, w2) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    grads.with(a, |ga| {
        let planes = ga.len() / (h * w);
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    ga[(p * h + y) * w + x] += g[(p * h2 + y / k) * w2 + x / k] * norm;
                }
            }
        }
    });
}
