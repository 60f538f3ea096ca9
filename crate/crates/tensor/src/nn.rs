//! Parameterized layers. Each layer registers its tensors in a
//! [`ParamStore`] under a dotted prefix and binds them onto a tape per call.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[inputs, outputs], inputs, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(&[outputs], inputs, rng));
        Self { weight, bias }
    }

    /// `(n, in) → (n, out)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = inputs * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[outputs, inputs, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), uniform_init(&[outputs], fan_in, rng));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    /// A convolution whose weights and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, kernel: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[outputs, inputs, kernel, kernel]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn with_padding(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    /// Kernel 4, stride 2, pad 1: exactly doubles the spatial size.
    pub fn upsample2x<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let fan_in = inputs * 4;
        let weight = store.add(format!("{name}.weight"), uniform_init(&[inputs, outputs, 4, 4], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), uniform_init(&[outputs], fan_in, rng));
        Self {
            weight,
            bias,
            stride: 2,
            pad: 1,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Group normalization with a learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
    channels: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self {
            gamma,
            beta,
            groups: groups.min(channels),
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let xn = tape.group_norm(x, self.groups, self.eps)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let g = tape.reshape(g, &[1, self.channels, 1, 1])?;
        let b = tape.reshape(b, &[1, self.channels, 1, 1])?;
        let y = tape.mul(xn, g)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, classes: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(&[classes, dim], 1.0, rng));
        Self { table }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, labels: &[usize], grid: [usize; 3]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.embedding(t, labels, grid)
    }
}
