use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tape::{Grads, Op, Tape, Var};

impl Tape {
    /// Matrix product of `(m,k)·(k,n)`, or batched `(b,m,k)·(b,k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(TensorError::mismatch("matmul", &sa, &sb)),
        };
        let (va, vb) = (self.values(a), self.values(b));
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[i * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push_op(&shape, out, Op::MatMul { a, b, batch, m, k, n }, &[a, b]))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward(a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, g: &[f64], grads: &mut Grads<'_>) {
    let (va, vb) = (grads.value(a), grads.value(b));
    grads.with(a, |ga| {
        for i in 0..batch {
            // dA = dC · Bᵀ
            gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                false,
                &vb[i * k * n..],
                true,
                &mut ga[i * m * k..(i + 1) * m * k],
                1.0,
            );
        }
    });
    grads.with(b, |gb| {
        for i in 0..batch {
            // dB = Aᵀ · dC
            gemm(
                k,
                m,
                n,
                &va[i * m * k..],
                true,
                &g[i * m * n..],
                false,
                &mut gb[i * k * n..(i + 1) * k * n],
                1.0,
            );
        }
    });
}
