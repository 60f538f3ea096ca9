use super::{broadcast_map, broadcast_shape};
use crate::error::{Result, TensorError};
use crate::tape::{BinaryKind, Grads, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Silu,
    Exp,
    Abs,
    Square,
    Reciprocal,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let f: fn(f64, f64) -> f64 = match kind {
            BinaryKind::Add => |x, y| x + y,
            BinaryKind::Sub => |x, y| x - y,
            BinaryKind::Mul => |x, y| x * y,
        };
        if sa == sb {
            let out = self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| f(x, y)).collect();
            return Ok(self.push_op(&sa, out, Op::Binary { kind, a, b, bcast: None }, &[a, b]));
        }
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::mismatch(name, &sa, &sb))?;
        let ma = broadcast_map(&shape, &sa);
        let mb = broadcast_map(&shape, &sb);
        let (va, vb) = (self.values(a), self.values(b));
        let out = ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect();
        let bcast = Some(Box::new((ma, mb)));
        Ok(self.push_op(&shape, out, Op::Binary { kind, a, b, bcast }, &[a, b]))
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.values(a).iter().map(|x| k * x).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Scale { a, k }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.values(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Offset { a }, &[a])
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            UnaryKind::Relu => Box::new(|x: f64| x.max(0.0)),
            UnaryKind::LeakyRelu(s) => Box::new(move |x: f64| if x > 0.0 { x } else { s * x }),
            UnaryKind::Sigmoid => Box::new(sigmoid),
            UnaryKind::Tanh => Box::new(f64::tanh),
            UnaryKind::Silu => Box::new(|x: f64| x * sigmoid(x)),
            UnaryKind::Exp => Box::new(f64::exp),
            UnaryKind::Abs => Box::new(f64::abs),
            UnaryKind::Square => Box::new(|x: f64| x * x),
            UnaryKind::Reciprocal => Box::new(f64::recip),
        };
        let out = self.values(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Unary { kind, a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    /// `x·sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    /// Elementwise `1/x`.
    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Reciprocal, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.values(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&shape, out, Op::Clamp { a, lo, hi }, &[a])
    }
}

pub(crate) fn binary_backward(
    kind: &BinaryKind,
    a: Var,
    b: Var,
    bcast: Option<&(Vec<usize>, Vec<usize>)>,
    g: &[f64],
    grads: &mut Grads<'_>,
) {
    let (va, vb) = (grads.value(a), grads.value(b));
    match bcast {
        None => {
            grads.with(a, |ga| match kind {
                BinaryKind::Mul => {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                _ => ga.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            });
            grads.with(b, |gb| match kind {
                BinaryKind::Add => gb.iter_mut().zip(g).for_each(|(x, y)| *x += y),
                BinaryKind::Sub => gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y),
                BinaryKind::Mul => {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            });
        }
        Some((ma, mb)) => {
            grads.with(a, |ga| {
                for (k, &gi) in g.iter().enumerate() {
                    ga[ma[k]] += match kind {
                        BinaryKind::Mul => gi * vb[mb[k]],
                        _ => gi,
                    };
                }
            });
            grads.with(b, |gb| {
                for (k, &gi) in g.iter().enumerate() {
                    gb[mb[k]] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * va[ma[k]],
                    };
                }
            });
        }
    }
}

pub(crate) fn unary_backward(kind: &UnaryKind, a: Var, out: &Tensor, g: &[f64], grads: &mut Grads<'_>) {
    if !grads.wants(a) {
        return;
    }
    let x = grads.value(a);
    let y = out.values();
    grads.with(a, |ga| {
        for i in 0..ga.len() {
            let d = match kind {
                UnaryKind::Relu => {
                    if x[i] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                UnaryKind::LeakyRelu(s) => {
                    if x[i] > 0.0 {
                        1.0
                    } else {
                        *s
                    }
                }
                UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                UnaryKind::Tanh => 1.0 - y[i] * y[i],
                UnaryKind::Silu => {
                    let s = sigmoid(x[i]);
                    s * (1.0 + x[i] * (1.0 - s))
                }
                UnaryKind::Exp => y[i],
                UnaryKind::Abs => x[i].signum() * (x[i] != 0.0) as u8 as f64,
                UnaryKind::Square => 2.0 * x[i],
                UnaryKind::Reciprocal => -y[i] * y[i],
            };
            ga[i] += g[i] * d;
        }
    });
}

pub(crate) fn clamp_backward(a: Var, lo: f64, hi: f64, g: &[f64], grads: &mut Grads<'_>) {
    if !grads.wants(a) {
        return;
    }
    let x = grads.value(a);
    grads.with(a, |ga| {
        for i in 0..ga.len() {
            if x[i] >= lo && x[i] <= hi {
                ga[i] += g[i];
            }
        }
    });
}
