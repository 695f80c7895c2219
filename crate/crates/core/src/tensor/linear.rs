use super::{dim_mismatch, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

pub struct LinearGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

fn check<S: Scalar>(
    op: &'static str,
    input: &Tensor<S>,
    weight: &Tensor<S>,
) -> Result<(usize, usize, usize)> {
    input.expect_rank(2, op, "input")?;
    weight.expect_rank(2, op, "weight")?;
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let (m, wn) = (weight.shape()[0], weight.shape()[1]);
    if wn != n {
        return Err(dim_mismatch(op, "weight in_features", wn, n));
    }
    Ok((b, n, m))
}

/// `out[b, m] = bias[m] + sum_n weight[m, n] * input[b, n]`, summed in
/// ascending `n`.
pub fn linear_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    const OP: &str = "linear_forward";
    let (batch, n, m) = check(OP, input, weight)?;
    if bias.shape() != [m] {
        return Err(dim_mismatch(OP, "bias length", bias.len(), m));
    }
    let w = weight.data();
    let mut wt = vec![S::zero(); n * m];
    for r in 0..m {
        for c in 0..n {
            wt[c * m + r] = w[r * n + c];
        }
    }
    let mut out = vec![S::zero(); batch * m];
    for (xb, ob) in input.data().chunks_exact(n).zip(out.chunks_exact_mut(m)) {
        ob.copy_from_slice(bias.data());
        for (c, &v) in xb.iter().enumerate() {
            if v.is_zero() {
                continue;
            }
            for (o, &wv) in ob.iter_mut().zip(&wt[c * m..(c + 1) * m]) {
                *o += wv * v;
            }
        }
    }
    Tensor::from_vec(&[batch, m], out)
}

pub fn linear_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
) -> Result<LinearGrads<S>> {
    const OP: &str = "linear_backward";
    let (batch, n, m) = check(OP, input, weight)?;
    grad_out.expect_rank(2, OP, "grad_out")?;
    if grad_out.shape()[0] != batch {
        return Err(dim_mismatch(OP, "grad_out batch", grad_out.shape()[0], batch));
    }
    if grad_out.shape()[1] != m {
        return Err(dim_mismatch(OP, "grad_out features", grad_out.shape()[1], m));
    }
    let w = weight.data();
    let mut gin = vec![S::zero(); batch * n];
    let mut gw = vec![S::zero(); m * n];
    let mut gb = vec![S::zero(); m];
    for ((gob, xb), gib) in grad_out
        .data()
        .chunks_exact(m)
        .zip(input.data().chunks_exact(n))
        .zip(gin.chunks_exact_mut(n))
    {
        for (r, &g) in gob.iter().enumerate() {
            gb[r] += g;
            if g.is_zero() {
                continue;
            }
            for (a, &wv) in gib.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                *a += wv * g;
            }
            for (a, &xv) in gw[r * n..(r + 1) * n].iter_mut().zip(xb) {
                *a += xv * g;
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(input.shape(), gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[m], gb)?,
    })
}
