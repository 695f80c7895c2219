use serde::{Deserialize, Serialize};

use super::{dim_mismatch, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Square-kernel 2-D convolution geometry. Padding is zero-padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride 1 with "same" padding (`k / 2`).
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel_size {} and stride {} must be >= 1",
                    self.kernel_size, self.stride
                ),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("conv2d", "channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Output extent along one spatial axis.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "input extent {input} with padding {} is smaller than kernel {}",
                    self.padding, self.kernel_size
                ),
            ));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_size,
            self.kernel_size,
        ]
    }

    fn check<S: Scalar>(
        &self,
        op: &'static str,
        input: &Tensor<S>,
        weight: &Tensor<S>,
    ) -> Result<Geometry> {
        self.validate()?;
        input.expect_rank(4, op, "input")?;
        weight.expect_rank(4, op, "weight")?;
        let s = input.shape();
        if s[1] != self.in_channels {
            return Err(dim_mismatch(op, "input channels", s[1], self.in_channels));
        }
        let w = weight.shape();
        let want = self.weight_shape();
        for (i, name) in ["weight out_channels", "weight in_channels", "kernel height", "kernel width"]
            .iter()
            .enumerate()
        {
            if w[i] != want[i] {
                return Err(dim_mismatch(op, name, w[i], want[i]));
            }
        }
        Ok(Geometry {
            batch: s[0],
            cin: s[1],
            h: s[2],
            w: s[3],
            cout: self.out_channels,
            oh: self.output_extent(s[2])?,
            ow: self.output_extent(s[3])?,
            k: self.kernel_size,
            stride: self.stride,
            pad: self.padding,
        })
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Output coordinate fed by input coordinate `i` through kernel tap `tap`.
    #[inline]
    fn out_coord(&self, i: usize, tap: usize, extent: usize) -> Option<usize> {
        let shifted = i + self.pad;
        if shifted < tap {
            return None;
        }
        let d = shifted - tap;
        if d % self.stride != 0 {
            return None;
        }
        let o = d / self.stride;
        (o < extent).then_some(o)
    }
}

pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Cross-correlation with bias.
///
/// Every output starts at its bias and then accumulates `w * x` over
/// `(in_channel, ky, kx)` in lexicographic order; out-of-bounds (padding)
/// taps and zero inputs contribute nothing and are skipped.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    const OP: &str = "conv2d_forward";
    let g = spec.check(OP, input, weight)?;
    if bias.shape() != [g.cout] {
        return Err(dim_mismatch(OP, "bias length", bias.len(), g.cout));
    }
    let k = g.k;
    // weight as [cin][ky][kx][cout]
    let w = weight.data();
    let mut wt = vec![S::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..k * k {
                wt[(ci * k * k + t) * g.cout + co] = w[(co * g.cin + ci) * k * k + t];
            }
        }
    }
    let plane = g.oh * g.ow;
    let mut out = vec![S::zero(); g.batch * g.cout * plane];
    // channels-last accumulator for one sample
    let mut acc = vec![S::zero(); plane * g.cout];
    let x = input.data();
    for b in 0..g.batch {
        for p in 0..plane {
            acc[p * g.cout..(p + 1) * g.cout].copy_from_slice(bias.data());
        }
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        for ci in 0..g.cin {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let v = xb[(ci * g.h + iy) * g.w + ix];
                    if v.is_zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let Some(oy) = g.out_coord(iy, ky, g.oh) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = g.out_coord(ix, kx, g.ow) else {
                                continue;
                            };
                            let wrow = &wt[(ci * k * k + ky * k + kx) * g.cout..][..g.cout];
                            let arow = &mut acc[(oy * g.ow + ox) * g.cout..][..g.cout];
                            for (a, &wv) in arow.iter_mut().zip(wrow) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        for p in 0..plane {
            for co in 0..g.cout {
                ob[co * plane + p] = acc[p * g.cout + co];
            }
        }
    }
    Tensor::from_vec(&[g.batch, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<ConvGrads<S>> {
    const OP: &str = "conv2d_backward";
    let g = spec.check(OP, input, weight)?;
    check_grad_out(OP, grad_out, &g)?;
    let (gw, gb) = weight_and_bias_grads(grad_out, input, &g);
    let gin = input_grad(grad_out, weight, &g);
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), gin)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[g.cout], gb)?,
    })
}

/// Weight and bias gradients only; used for the first layer, whose input
/// gradient is never needed.
pub fn conv2d_weight_grad<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    spec: &ConvSpec,
) -> Result<(Tensor<S>, Tensor<S>)> {
    const OP: &str = "conv2d_weight_grad";
    let g = spec.check(OP, input, weight)?;
    check_grad_out(OP, grad_out, &g)?;
    let (gw, gb) = weight_and_bias_grads(grad_out, input, &g);
    Ok((
        Tensor::from_vec(weight.shape(), gw)?,
        Tensor::from_vec(&[g.cout], gb)?,
    ))
}

fn check_grad_out<S: Scalar>(op: &'static str, grad_out: &Tensor<S>, g: &Geometry) -> Result<()> {
    grad_out.expect_rank(4, op, "grad_out")?;
    let want = [g.batch, g.cout, g.oh, g.ow];
    for (i, name) in ["grad_out batch", "grad_out channels", "grad_out height", "grad_out width"]
        .iter()
        .enumerate()
    {
        if grad_out.shape()[i] != want[i] {
            return Err(dim_mismatch(op, name, grad_out.shape()[i], want[i]));
        }
    }
    Ok(())
}

fn weight_and_bias_grads<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    g: &Geometry,
) -> (Vec<S>, Vec<S>) {
    let k = g.k;
    let plane = g.oh * g.ow;
    let go = grad_out.data();
    let x = input.data();
    let mut gb = vec![S::zero(); g.cout];
    // [cin][ky][kx][cout]
    let mut gwt = vec![S::zero(); g.cin * k * k * g.cout];
    let mut gcl = vec![S::zero(); plane * g.cout];
    for b in 0..g.batch {
        let gob = &go[b * g.cout * plane..(b + 1) * g.cout * plane];
        for co in 0..g.cout {
            for p in 0..plane {
                let v = gob[co * plane + p];
                gb[co] += v;
                gcl[p * g.cout + co] = v;
            }
        }
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        for ci in 0..g.cin {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let v = xb[(ci * g.h + iy) * g.w + ix];
                    if v.is_zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let Some(oy) = g.out_coord(iy, ky, g.oh) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = g.out_coord(ix, kx, g.ow) else {
                                continue;
                            };
                            let grow = &gcl[(oy * g.ow + ox) * g.cout..][..g.cout];
                            let wrow = &mut gwt[(ci * k * k + ky * k + kx) * g.cout..][..g.cout];
                            for (a, &gv) in wrow.iter_mut().zip(grow) {
                                *a += gv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    let mut gw = vec![S::zero(); gwt.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..k * k {
                gw[(co * g.cin + ci) * k * k + t] = gwt[(ci * k * k + t) * g.cout + co];
            }
        }
    }
    (gw, gb)
}

fn input_grad<S: Scalar>(grad_out: &Tensor<S>, weight: &Tensor<S>, g: &Geometry) -> Vec<S> {
    let k = g.k;
    let plane = g.oh * g.ow;
    let go = grad_out.data();
    let w = weight.data();
    // weight as [cout][ky][kx][cin]
    let mut wc = vec![S::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..k * k {
                wc[(co * k * k + t) * g.cin + ci] = w[(co * g.cin + ci) * k * k + t];
            }
        }
    }
    let in_plane = g.h * g.w;
    let mut gin = vec![S::zero(); g.batch * g.cin * in_plane];
    // channels-last accumulator [iy][ix][cin]
    let mut acc = vec![S::zero(); in_plane * g.cin];
    for b in 0..g.batch {
        acc.iter_mut().for_each(|v| *v = S::zero());
        let gob = &go[b * g.cout * plane..(b + 1) * g.cout * plane];
        for co in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let v = gob[co * plane + oy * g.ow + ox];
                    if v.is_zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = oy * g.stride + ky;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let iy = iy - g.pad;
                        for kx in 0..k {
                            let ix = ox * g.stride + kx;
                            if ix < g.pad || ix - g.pad >= g.w {
                                continue;
                            }
                            let ix = ix - g.pad;
                            let wrow = &wc[(co * k * k + ky * k + kx) * g.cin..][..g.cin];
                            let arow = &mut acc[(iy * g.w + ix) * g.cin..][..g.cin];
                            for (a, &wv) in arow.iter_mut().zip(wrow) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
        let gb = &mut gin[b * g.cin * in_plane..(b + 1) * g.cin * in_plane];
        for p in 0..in_plane {
            for ci in 0..g.cin {
                gb[ci * in_plane + p] = acc[p * g.cin + ci];
            }
        }
    }
    gin
}
