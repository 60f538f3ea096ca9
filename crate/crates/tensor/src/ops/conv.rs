//! 2-D convolutions in NCHW layout via im2col and a single gemm per image.

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tape::{Grads, Op, Tape, Var};

/// Geometry of a strided, zero-padded correlation from an `(c, h, w)` input
/// to an `(o, ho, wo)` output. For transposed convolution the roles of input
/// and output are swapped: `c/h/w` describe the (larger) output.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + k − pad` lies
/// inside `0..w`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    // ox·s + k − p ≥ 0  ⇔  ox ≥ ceil((p − k) / s)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // ox·s + k − p ≤ w − 1  ⇔  ox ≤ (w − 1 + p − k) / s
    let hi = if w + pad > k { ((w - 1 + pad - k) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `(c, h, w)` image into `(c·kh·kw, ho·wo)` patch columns.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, wo);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                dst[..ylo * wo].fill(0.0);
                dst[yhi * wo..].fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    if xlo < xhi {
                        let ix0 = xlo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                                *v = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
fn col2im(g: &ConvGeom, cols: &[f64], x: &mut [f64]) {
    let (ho, wo) = (g.ho, g.wo);
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, wo);
                if xlo >= xhi {
                    continue;
                }
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut x[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    let line = &src[oy * wo + xlo..oy * wo + xhi];
                    let ix0 = xlo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[ix0..ix0 + line.len()].iter_mut().zip(line).for_each(|(d, s)| *d += s);
                    } else {
                        for (j, s) in line.iter().enumerate() {
                            dst[ix0 + j * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(tape: &Tape, bias: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if tape.shape(b) != [channels] {
            return Err(TensorError::mismatch(op, tape.shape(b), &[channels]));
        }
    }
    Ok(())
}

impl Tape {
    /// Cross-correlation of `x: (n, c, h, w)` with `weight: (o, c, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let ([n, c, h, w], [o, c2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        };
        if c != c2 || stride == 0 || h + 2 * pad < *kh || w + 2 * pad < *kw {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        check_bias(self, bias, *o, "conv2d")?;
        let geom = ConvGeom {
            n: *n,
            c: *c,
            h: *h,
            w: *w,
            o: *o,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, cc) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cc];
        let mut out = vec![0.0; geom.n * geom.o * cc];
        let (vx, vw) = (self.values(x), self.values(weight));
        let vb = bias.map(|b| self.values(b));
        for i in 0..geom.n {
            im2col(&geom, &vx[i * c * h * w..(i + 1) * c * h * w], &mut cols);
            let dst = &mut out[i * geom.o * cc..(i + 1) * geom.o * cc];
            if let Some(vb) = vb {
                for (oc, chunk) in dst.chunks_mut(cc).enumerate() {
                    chunk.fill(vb[oc]);
                }
            }
            gemm(geom.o, rows, cc, vw, false, &cols, false, dst, 1.0);
        }
        let shape = [geom.n, geom.o, geom.ho, geom.wo];
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push_op(&shape, out, Op::Conv2d { x, w: weight, bias, geom }, &inputs))
    }

    /// Transposed convolution of `x: (n, c_in, h, w)` with
    /// `weight: (c_in, c_out, kh, kw)`; output side `(h−1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        let ([n, cin, h, w], [cin2, cout, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(TensorError::mismatch("conv_transpose2d", &sx, &sw));
        };
        if cin != cin2 || stride == 0 || (h - 1) * stride + kh <= 2 * pad || (w - 1) * stride + kw <= 2 * pad {
            return Err(TensorError::mismatch("conv_transpose2d", &sx, &sw));
        }
        check_bias(self, bias, *cout, "conv_transpose2d")?;
        let ho = (h - 1) * stride + kh - 2 * pad;
        let wo = (w - 1) * stride + kw - 2 * pad;
        // Correlation geometry mapping the output (cout, ho, wo) onto x's grid.
        let geom = ConvGeom {
            n: *n,
            c: *cout,
            h: ho,
            w: wo,
            o: *cin,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            ho: *h,
            wo: *w,
        };
        let (rows, cc) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cc];
        let mut out = vec![0.0; n * cout * ho * wo];
        let (vx, vw) = (self.values(x), self.values(weight));
        for i in 0..*n {
            gemm(rows, *cin, cc, vw, true, &vx[i * cin * cc..], false, &mut cols, 0.0);
            let dst = &mut out[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            col2im(&geom, &cols, dst);
            if let Some(b) = bias {
                let vb = self.values(b);
                for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += vb[oc]);
                }
            }
        }
        let shape = [*n, *cout, ho, wo];
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push_op(&shape, out, Op::ConvTranspose2d { x, w: weight, bias, geom }, &inputs))
    }
}

fn bias_backward(bias: Option<Var>, n: usize, channels: usize, plane: usize, g: &[f64], grads: &mut Grads<'_>) {
    if let Some(b) = bias {
        grads.with(b, |gb| {
            for i in 0..n {
                for (oc, chunk) in g[i * channels * plane..(i + 1) * channels * plane].chunks(plane).enumerate() {
                    gb[oc] += chunk.iter().sum::<f64>();
                }
            }
        });
    }
}

pub(crate) fn conv2d_backward(x: Var, w: Var, bias: Option<Var>, geom: &ConvGeom, g: &[f64], grads: &mut Grads<'_>) {
    let (rows, cc) = (geom.col_rows(), geom.col_cols());
    let in_size = geom.c * geom.h * geom.w;
    let out_size = geom.o * cc;
    let (vx, vw) = (grads.value(x), grads.value(w));
    let mut cols = vec![0.0; rows * cc];
    if grads.wants(w) {
        grads.with(w, |gw| {
            for i in 0..geom.n {
                im2col(geom, &vx[i * in_size..(i + 1) * in_size], &mut cols);
                gemm(geom.o, cc, rows, &g[i * out_size..], false, &cols, true, gw, 1.0);
            }
        });
    }
    if grads.wants(x) {
        grads.with(x, |gx| {
            for i in 0..geom.n {
                gemm(rows, geom.o, cc, vw, true, &g[i * out_size..], false, &mut cols, 0.0);
                col2im(geom, &cols, &mut gx[i * in_size..(i + 1) * in_size]);
            }
        });
    }
    bias_backward(bias, geom.n, geom.o, cc, g, grads);
}

pub(crate) fn conv_transpose2d_backward(x: Var, w: Var, bias: Option<Var>, geom: &ConvGeom, g: &[f64], grads: &mut Grads<'_>) {
    // Here geom.c/h/w is the transposed conv's output, geom.o/ho/wo its input.
    let (rows, cc) = (geom.col_rows(), geom.col_cols());
    let out_size = geom.c * geom.h * geom.w;
    let in_size = geom.o * cc;
    let (vx, vw) = (grads.value(x), grads.value(w));
    let mut cols = vec![0.0; rows * cc];
    let needs_w = grads.wants(w);
    let needs_x = grads.wants(x);
    for i in 0..geom.n {
        if !needs_w && !needs_x {
            break;
        }
        im2col(geom, &g[i * out_size..(i + 1) * out_size], &mut cols);
        if needs_x {
            grads.with(x, |gx| {
                gemm(
                    geom.o,
                    rows,
                    cc,
                    vw,
                    false,
                    &cols,
                    false,
                    &mut gx[i * in_size..(i + 1) * in_size],
                    1.0,
                );
            });
        }
        if needs_w {
            grads.with(w, |gw| {
                gemm(geom.o, cc, rows, &vx[i * in_size..], false, &cols, true, gw, 1.0);
            });
        }
    }
    bias_backward(bias, geom.n, geom.c, geom.h * geom.w, g, grads);
}
