//! Building blocks shared by the denoisers and autoencoders.

use rand::Rng;
use vg_tensor::nn::{Conv2d, GroupNorm, Linear};
use vg_tensor::param::ParamId;
use vg_tensor::{ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::phantom::NUM_CLASSES;

pub const NORM_GROUPS: usize = 8;

/// Sinusoidal timestep features, `(n, dim)`.
pub fn timestep_features(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[i * dim + k] = arg.sin();
            out[i * dim + half + k] = arg.cos();
        }
    }
    Tensor::new(&[ts.len(), dim], out).expect("sized from inputs")
}

/// Two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, width: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), inputs, width, rng),
            second: Linear::new(store, &format!("{name}.1"), width, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.silu(h);
        Ok(self.second.forward(tape, store, h)?)
    }
}

/// GroupNorm → SiLU → conv, twice, with an additive per-channel embedding
/// injection between the convolutions and a residual connection.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    outputs: usize,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        emb_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), inputs, NORM_GROUPS),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), inputs, outputs, 3, 1, rng),
            emb: emb_dim.map(|e| Linear::new(store, &format!("{name}.emb"), e, outputs, rng)),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), outputs, NORM_GROUPS),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), outputs, outputs, 3, 1, rng),
            skip: (inputs != outputs).then(|| Conv2d::new(store, &format!("{name}.skip"), inputs, outputs, 1, 1, rng)),
            outputs,
        }
    }

    /// `emb` is `(n, emb_dim)` when the block was built with an embedding.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, emb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(h);
        let mut h = self.conv1.forward(tape, store, h)?;
        if let (Some(layer), Some(e)) = (&self.emb, emb) {
            let n = tape.shape(x)[0];
            let e = tape.silu(e);
            let e = layer.forward(tape, store, e)?;
            let e = tape.reshape(e, &[n, self.outputs, 1, 1])?;
            h = tape.add(h, e)?;
        }
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, store, x)?,
            None => x,
        };
        Ok(tape.add(skip, h)?)
    }
}

/// Cross-attention from every spatial position to a small token set: the
/// projected condition token plus a learned null token, so the softmax has a
/// choice to make.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    null_token: ParamId,
    channels: usize,
    width: usize,
    token_dim: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, token_dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, NORM_GROUPS),
            query: Linear::new(store, &format!("{name}.query"), channels, width, rng),
            key: Linear::new(store, &format!("{name}.key"), token_dim, width, rng),
            value: Linear::new(store, &format!("{name}.value"), token_dim, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, channels, rng),
            null_token: store.add(format!("{name}.null"), Tensor::randn(&[1, token_dim], 1.0, rng)),
            channels,
            width,
            token_dim,
        }
    }

    /// `x` is `(n, C, H, W)`, `token` is `(n, token_dim)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, token: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let d = self.width;
        let xn = self.norm.forward(tape, store, x)?;
        let seq = tape.permute(xn, &[0, 2, 3, 1])?;
        let seq = tape.reshape(seq, &[n * hw, c])?;
        let q = self.query.forward(tape, store, seq)?;
        let q = tape.reshape(q, &[n, hw, d])?;

        let null = tape.param(store, self.null_token);
        let nulls = tape.concat(&vec![null; n], 0)?;
        let tokens = tape.concat(&[token, nulls], 1)?;
        let tokens = tape.reshape(tokens, &[n * 2, self.token_dim])?;
        let k = self.key.forward(tape, store, tokens)?;
        let k = tape.reshape(k, &[n, 2, d])?;
        let k = tape.permute(k, &[0, 2, 1])?;
        let v = self.value.forward(tape, store, tokens)?;
        let v = tape.reshape(v, &[n, 2, d])?;

        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax(scores, 2)?;
        let mixed = tape.matmul(attn, v)?;
        let mixed = tape.reshape(mixed, &[n * hw, d])?;
        let out = self.out.forward(tape, store, mixed)?;
        let out = tape.reshape(out, &[n, h, w, self.channels])?;
        let out = tape.permute(out, &[0, 3, 1, 2])?;
        Ok(tape.add(x, out)?)
    }
}

/// Spatially adaptive modulation of instance-normalized features by scale
/// and shift maps computed from a one-hot mask. The scale and shift
/// convolutions start at zero, so a fresh block is plain normalization.
#[derive(Debug, Clone)]
pub struct SpadeBlock {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl SpadeBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            shared: Conv2d::new(store, &format!("{name}.shared"), NUM_CLASSES, hidden, 3, 1, rng),
            gamma: Conv2d::zeros(store, &format!("{name}.gamma"), hidden, channels, 3),
            beta: Conv2d::zeros(store, &format!("{name}.beta"), hidden, channels, 3),
        }
    }

    /// `mask` is a one-hot `(n, classes, H, W)` at the feature resolution.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Var) -> Result<Var> {
        let c = tape.shape(x)[1];
        let xn = tape.group_norm(x, c, 1e-5)?;
        let a = self.shared.forward(tape, store, mask)?;
        let a = tape.relu(a);
        let g = self.gamma.forward(tape, store, a)?;
        let b = self.beta.forward(tape, store, a)?;
        let scaled = tape.mul(xn, g)?;
        let y = tape.add(xn, scaled)?;
        Ok(tape.add(y, b)?)
    }
}

/// One-hot encodes `n` label grids of `size×size`, nearest-resampled to
/// `target×target`. Returns `(n, classes, target, target)`.
pub fn one_hot(labels: &[Vec<u8>], size: usize, target: usize) -> Result<Tensor> {
    if target == 0 || size % target != 0 && target % size != 0 {
        return Err(Error::InvalidArgument(format!("cannot resize {size} to {target}")));
    }
    let n = labels.len();
    let plane = target * target;
    let mut out = vec![0.0; n * NUM_CLASSES * plane];
    for (i, grid) in labels.iter().enumerate() {
        if grid.len() != size * size {
            return Err(Error::InvalidArgument(format!(
                "label grid of {} pixels, expected {}",
                grid.len(),
                size * size
            )));
        }
        for y in 0..target {
            for x in 0..target {
                let (sy, sx) = (y * size / target, x * size / target);
                let label = grid[sy * size + sx] as usize;
                if label >= NUM_CLASSES {
                    return Err(Error::InvalidArgument(format!("label {label} out of range")));
                }
                out[(i * NUM_CLASSES + label) * plane + y * target + x] = 1.0;
            }
        }
    }
    Ok(Tensor::new(&[n, NUM_CLASSES, target, target], out)?)
}

/// Per-pixel argmax over the class axis of `(n, classes, H, W)` logits.
pub fn argmax_labels(logits: &Tensor) -> Vec<Vec<u8>> {
    let s = logits.shape();
    let (n, k, plane) = (s[0], s[1], s[2] * s[3]);
    let v = logits.values();
    (0..n)
        .map(|i| {
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if v[(i * k + c) * plane + p] > v[(i * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
