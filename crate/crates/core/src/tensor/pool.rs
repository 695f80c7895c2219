use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn pooled_dims<S: Scalar>(op: &'static str, input: &Tensor<S>) -> Result<(usize, usize, usize)> {
    input.expect_rank(4, op, "input")?;
    let s = input.shape();
    if s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::shape(
            op,
            format!("spatial extents must be even, got {}x{}", s[2], s[3]),
        ));
    }
    Ok((s[0] * s[1], s[2], s[3]))
}

/// Non-overlapping 2x2 mean.
pub fn avgpool2_forward<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (planes, h, w) = pooled_dims("avgpool2_forward", input)?;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::lit(0.25);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let xp = &x[p * h * w..];
        for oy in 0..oh {
            let r0 = &xp[2 * oy * w..];
            let r1 = &xp[(2 * oy + 1) * w..];
            for ox in 0..ow {
                let s = r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1];
                out.push(s * quarter);
            }
        }
    }
    let s = input.shape();
    Tensor::from_vec(&[s[0], s[1], oh, ow], out)
}

/// Spreads each pooled gradient evenly over its window.
pub fn avgpool2_backward<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    grad_out.expect_rank(4, "avgpool2_backward", "grad_out")?;
    let s = grad_out.shape();
    let (oh, ow) = (s[2], s[3]);
    let (h, w) = (2 * oh, 2 * ow);
    let quarter = S::lit(0.25);
    let mut out = vec![S::zero(); s[0] * s[1] * h * w];
    for (p, gp) in grad_out.data().chunks_exact(oh * ow).enumerate() {
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gp[oy * ow + ox] * quarter;
                op[2 * oy * w + 2 * ox] = v;
                op[2 * oy * w + 2 * ox + 1] = v;
                op[(2 * oy + 1) * w + 2 * ox] = v;
                op[(2 * oy + 1) * w + 2 * ox + 1] = v;
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], h, w], out)
}

/// Flat input index of the winning cell of every pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaxPoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl MaxPoolIndices {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Non-overlapping 2x2 max. Ties go to the first cell in row-major scan
/// order.
pub fn maxpool2_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, MaxPoolIndices)> {
    let (planes, h, w) = pooled_dims("maxpool2_forward", input)?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let cells = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cells[0];
                for &c in &cells[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let s = input.shape();
    Ok((
        Tensor::from_vec(&[s[0], s[1], oh, ow], out)?,
        MaxPoolIndices {
            input_shape: s.to_vec(),
            argmax,
        },
    ))
}

/// Routes each pooled gradient to the cell that won the forward max.
pub fn maxpool2_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    indices: &MaxPoolIndices,
) -> Result<Tensor<S>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::shape(
            "maxpool2_backward",
            format!(
                "grad_out has {} elements, forward produced {}",
                grad_out.len(),
                indices.argmax.len()
            ),
        ));
    }
    let mut out = Tensor::zeros(&indices.input_shape);
    let o = out.data_mut();
    for (&g, &i) in grad_out.data().iter().zip(&indices.argmax) {
        o[i] += g;
    }
    Ok(out)
}
