//! 3-d cross-correlation and its two adjoints.
//!
//! The three kernels form a closed family under differentiation: the vjp of
//! each is expressed through the other two, which is what lets a gradient
//! penalty differentiate through a critic's backward pass.

use super::{Element, Op, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Output length along one axis.
fn out_len(i: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    let padded = i + 2 * p;
    if padded < k {
        return Err(Error::shape(format!(
            "spatial dim {} smaller than kernel support {} (padding {})",
            i, k, p
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Range of output indices o with 0 <= o*s + k_off - p < i_len.
fn valid_out_range(o_len: usize, i_len: usize, k_off: usize, p: usize, s: usize) -> (usize, usize) {
    let s_i = s as isize;
    let lo_num = p as isize - k_off as isize;
    let lo = if lo_num <= 0 {
        0
    } else {
        ((lo_num + s_i - 1) / s_i) as usize
    };
    let hi_num = i_len as isize - 1 + p as isize - k_off as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s_i) as usize + 1;
    (lo.min(o_len), hi.min(o_len))
}

pub fn conv3d_out_shape(
    input: &[usize],
    weight: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Vec<usize>> {
    if input.len() != 5 || weight.len() != 5 {
        return Err(Error::shape(format!(
            "conv3d expects 5-d input and weight, got {:?} and {:?}",
            input, weight
        )));
    }
    if input.iter().any(|&d| d == 0) || weight.iter().any(|&d| d == 0) {
        return Err(Error::shape("conv3d dims must be positive".to_string()));
    }
    if input[1] != weight[1] {
        return Err(Error::shape(format!(
            "conv3d channel mismatch: input has {}, weight expects {}",
            input[1], weight[1]
        )));
    }
    for a in 0..3 {
        let k = weight[2 + a];
        if k != 1 && k != 3 {
            return Err(Error::shape(format!(
                "conv3d kernel dims must be 1 or 3, got {:?}",
                &weight[2..]
            )));
        }
        if stride[a] == 0 {
            return Err(Error::shape("conv3d stride must be positive".to_string()));
        }
    }
    Ok(vec![
        input[0],
        weight[0],
        out_len(input[2], weight[2], padding[0], stride[0])?,
        out_len(input[3], weight[3], padding[1], stride[1])?,
        out_len(input[4], weight[4], padding[2], stride[2])?,
    ])
}

#[allow(clippy::too_many_arguments)]
fn fwd_kernel<E: Element>(
    x: &[E],
    w: &[E],
    ishape: &[usize],
    wshape: &[usize],
    oshape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<E> {
    let (cin, d, h, wd) = (ishape[1], ishape[2], ishape[3], ishape[4]);
    let (cout, kd, kh, kw) = (wshape[0], wshape[2], wshape[3], wshape[4]);
    let (od, oh, ow) = (oshape[2], oshape[3], oshape[4]);
    let ivol = d * h * wd;
    let ovol = od * oh * ow;
    let ksz = kd * kh * kw;
    let mut out = vec![E::zero(); oshape.iter().product()];
    out.par_chunks_mut(ovol).enumerate().for_each(|(bc, ovol_s)| {
        let b = bc / cout;
        let co = bc % cout;
        for ci in 0..cin {
            let xv = &x[(b * cin + ci) * ivol..(b * cin + ci + 1) * ivol];
            let wv = &w[(co * cin + ci) * ksz..(co * cin + ci + 1) * ksz];
            for zk in 0..kd {
                let (z0, z1) = valid_out_range(od, d, zk, pad[0], stride[0]);
                for yk in 0..kh {
                    let (y0, y1) = valid_out_range(oh, h, yk, pad[1], stride[1]);
                    for xk in 0..kw {
                        let wval = wv[(zk * kh + yk) * kw + xk];
                        if wval == E::zero() {
                            continue;
                        }
                        let (x0, x1) = valid_out_range(ow, wd, xk, pad[2], stride[2]);
                        if x0 >= x1 {
                            continue;
                        }
                        for oz in z0..z1 {
                            let iz = oz * stride[0] + zk - pad[0];
                            for oy in y0..y1 {
                                let iy = oy * stride[1] + yk - pad[1];
                                let orow = &mut ovol_s[(oz * oh + oy) * ow..][x0..x1];
                                if stride[2] == 1 {
                                    let ix0 = x0 + xk - pad[2];
                                    let xrow = &xv[(iz * h + iy) * wd + ix0..][..x1 - x0];
                                    for (o, &xvl) in orow.iter_mut().zip(xrow) {
                                        *o += wval * xvl;
                                    }
                                } else {
                                    for (off, o) in orow.iter_mut().enumerate() {
                                        let ox = x0 + off;
                                        let ix = ox * stride[2] + xk - pad[2];
                                        *o += wval * xv[(iz * h + iy) * wd + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn input_bwd_kernel<E: Element>(
    g: &[E],
    w: &[E],
    gshape: &[usize],
    wshape: &[usize],
    ishape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<E> {
    let (cin, d, h, wd) = (ishape[1], ishape[2], ishape[3], ishape[4]);
    let (cout, kd, kh, kw) = (wshape[0], wshape[2], wshape[3], wshape[4]);
    let (od, oh, ow) = (gshape[2], gshape[3], gshape[4]);
    let ivol = d * h * wd;
    let ovol = od * oh * ow;
    let ksz = kd * kh * kw;
    let mut gx = vec![E::zero(); ishape.iter().product()];
    gx.par_chunks_mut(ivol).enumerate().for_each(|(bc, xvol)| {
        let b = bc / cin;
        let ci = bc % cin;
        for co in 0..cout {
            let gv = &g[(b * cout + co) * ovol..(b * cout + co + 1) * ovol];
            let wv = &w[(co * cin + ci) * ksz..(co * cin + ci + 1) * ksz];
            for zk in 0..kd {
                let (z0, z1) = valid_out_range(od, d, zk, pad[0], stride[0]);
                for yk in 0..kh {
                    let (y0, y1) = valid_out_range(oh, h, yk, pad[1], stride[1]);
                    for xk in 0..kw {
                        let wval = wv[(zk * kh + yk) * kw + xk];
                        if wval == E::zero() {
                            continue;
                        }
                        let (x0, x1) = valid_out_range(ow, wd, xk, pad[2], stride[2]);
                        if x0 >= x1 {
                            continue;
                        }
                        for oz in z0..z1 {
                            let iz = oz * stride[0] + zk - pad[0];
                            for oy in y0..y1 {
                                let iy = oy * stride[1] + yk - pad[1];
                                let grow = &gv[(oz * oh + oy) * ow..][x0..x1];
                                if stride[2] == 1 {
                                    let ix0 = x0 + xk - pad[2];
                                    let xrow = &mut xvol[(iz * h + iy) * wd + ix0..][..x1 - x0];
                                    for (xo, &gvl) in xrow.iter_mut().zip(grow) {
                                        *xo += wval * gvl;
                                    }
                                } else {
                                    for (off, &gvl) in grow.iter().enumerate() {
                                        let ox = x0 + off;
                                        let ix = ox * stride[2] + xk - pad[2];
                                        xvol[(iz * h + iy) * wd + ix] += wval * gvl;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

#[allow(clippy::too_many_arguments)]
fn weight_bwd_kernel<E: Element>(
    x: &[E],
    g: &[E],
    ishape: &[usize],
    gshape: &[usize],
    wshape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<E> {
    let (batch, cin, d, h, wd) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
    let (cout, kd, kh, kw) = (wshape[0], wshape[2], wshape[3], wshape[4]);
    let (od, oh, ow) = (gshape[2], gshape[3], gshape[4]);
    let ivol = d * h * wd;
    let ovol = od * oh * ow;
    let ksz = kd * kh * kw;
    let mut gw = vec![E::zero(); wshape.iter().product()];
    gw.par_chunks_mut(ksz).enumerate().for_each(|(cc, wvol)| {
        let co = cc / cin;
        let ci = cc % cin;
        for zk in 0..kd {
            let (z0, z1) = valid_out_range(od, d, zk, pad[0], stride[0]);
            for yk in 0..kh {
                let (y0, y1) = valid_out_range(oh, h, yk, pad[1], stride[1]);
                for xk in 0..kw {
                    let (x0, x1) = valid_out_range(ow, wd, xk, pad[2], stride[2]);
                    let mut acc = E::zero();
                    if x0 < x1 {
                        for b in 0..batch {
                            let xv = &x[(b * cin + ci) * ivol..(b * cin + ci + 1) * ivol];
                            let gv = &g[(b * cout + co) * ovol..(b * cout + co + 1) * ovol];
                            for oz in z0..z1 {
                                let iz = oz * stride[0] + zk - pad[0];
                                for oy in y0..y1 {
                                    let iy = oy * stride[1] + yk - pad[1];
                                    let grow = &gv[(oz * oh + oy) * ow..][x0..x1];
                                    if stride[2] == 1 {
                                        let ix0 = x0 + xk - pad[2];
                                        let xrow = &xv[(iz * h + iy) * wd + ix0..][..x1 - x0];
                                        for (&xvl, &gvl) in xrow.iter().zip(grow) {
                                            acc += xvl * gvl;
                                        }
                                    } else {
                                        for (off, &gvl) in grow.iter().enumerate() {
                                            let ox = x0 + off;
                                            let ix = ox * stride[2] + xk - pad[2];
                                            acc += xv[(iz * h + iy) * wd + ix] * gvl;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    wvol[(zk * kh + yk) * kw + xk] = acc;
                }
            }
        }
    });
    gw
}

struct ConvFwdOp<E: Element> {
    x: Tensor<E>,
    w: Tensor<E>,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl<E: Element> Op<E> for ConvFwdOp<E> {
    fn name(&self) -> &'static str {
        "conv3d"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone(), self.w.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, g: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let dx = conv3d_input_grad(g, &self.w, self.x.shape(), self.stride, self.pad)?;
        let dw = conv3d_weight_grad(&self.x, g, self.w.shape(), self.stride, self.pad)?;
        Ok(vec![Some(dx), Some(dw)])
    }
}

struct ConvInputGradOp<E: Element> {
    g: Tensor<E>,
    w: Tensor<E>,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl<E: Element> Op<E> for ConvInputGradOp<E> {
    fn name(&self) -> &'static str {
        "conv3d_input_grad"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.g.clone(), self.w.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, ct: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let dg = conv3d(ct, &self.w, self.stride, self.pad)?;
        let dw = conv3d_weight_grad(ct, &self.g, self.w.shape(), self.stride, self.pad)?;
        Ok(vec![Some(dg), Some(dw)])
    }
}

struct ConvWeightGradOp<E: Element> {
    x: Tensor<E>,
    g: Tensor<E>,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl<E: Element> Op<E> for ConvWeightGradOp<E> {
    fn name(&self) -> &'static str {
        "conv3d_weight_grad"
    }
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.x.clone(), self.g.clone()]
    }
    fn vjp(&self, _out: &Tensor<E>, ct: &Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> {
        let dx = conv3d_input_grad(&self.g, ct, self.x.shape(), self.stride, self.pad)?;
        let dg = conv3d(&self.x, ct, self.stride, self.pad)?;
        Ok(vec![Some(dx), Some(dg)])
    }
}

/// Cross-correlation of `input` [B,Cin,D,H,W] with `weight`
/// [Cout,Cin,kd,kh,kw]. Bias is handled by the layer wrapper.
pub fn conv3d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<E>> {
    let oshape = conv3d_out_shape(input.shape(), weight.shape(), stride, padding)?;
    let data = fwd_kernel(
        &input.data(),
        &weight.data(),
        input.shape(),
        weight.shape(),
        &oshape,
        stride,
        padding,
    );
    let record = input.needs_grad() || weight.needs_grad();
    let (x, w) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(data, oshape, record, move || {
        Box::new(ConvFwdOp { x, w, stride, pad: padding })
    }))
}

/// Adjoint of `conv3d` in its input argument: scatters an output cotangent
/// back to input space. `in_shape` disambiguates strided shapes.
pub fn conv3d_input_grad<E: Element>(
    grad_out: &Tensor<E>,
    weight: &Tensor<E>,
    in_shape: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<E>> {
    let oshape = conv3d_out_shape(in_shape, weight.shape(), stride, padding)?;
    if oshape != grad_out.shape() {
        return Err(Error::shape(format!(
            "conv3d_input_grad: cotangent shape {:?} does not match expected {:?}",
            grad_out.shape(),
            oshape
        )));
    }
    let data = input_bwd_kernel(
        &grad_out.data(),
        &weight.data(),
        grad_out.shape(),
        weight.shape(),
        in_shape,
        stride,
        padding,
    );
    let record = grad_out.needs_grad() || weight.needs_grad();
    let (g, w) = (grad_out.clone(), weight.clone());
    Ok(Tensor::from_op(data, in_shape.to_vec(), record, move || {
        Box::new(ConvInputGradOp { g, w, stride, pad: padding })
    }))
}

/// Adjoint of `conv3d` in its weight argument.
pub fn conv3d_weight_grad<E: Element>(
    input: &Tensor<E>,
    grad_out: &Tensor<E>,
    w_shape: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<E>> {
    let oshape = conv3d_out_shape(input.shape(), w_shape, stride, padding)?;
    if oshape != grad_out.shape() {
        return Err(Error::shape(format!(
            "conv3d_weight_grad: cotangent shape {:?} does not match expected {:?}",
            grad_out.shape(),
            oshape
        )));
    }
    let data = weight_bwd_kernel(
        &input.data(),
        &grad_out.data(),
        input.shape(),
        grad_out.shape(),
        w_shape,
        stride,
        padding,
    );
    let record = input.needs_grad() || grad_out.needs_grad();
    let (x, g) = (input.clone(), grad_out.clone());
    Ok(Tensor::from_op(data, w_shape.to_vec(), record, move || {
        Box::new(ConvWeightGradOp { x, g, stride, pad: padding })
    }))
}
