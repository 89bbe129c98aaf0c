//! Low-resolution simulation in the frequency domain.
//!
//! The degradation keeps only the central block of k-space along the
//! phase-encoded axes, scales so constants survive, inverts back to image
//! space, and linearly resizes onto the original voxel grid. Everything here
//! is linear in the input volume.

use crate::error::{Error, Result};
use crate::volume::{AxisRole, Volume};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

#[derive(Clone, Debug)]
pub struct Spectrum {
    pub shape: [usize; 3],
    pub data: Vec<Complex<f64>>,
}

/// Per-axis undersampling factors in D, H, W order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegradeSpec {
    pub factors: [usize; 3],
}

impl DegradeSpec {
    pub fn new(factors: [usize; 3]) -> Result<Self> {
        if factors.iter().any(|&f| f == 0) {
            return Err(Error::config(format!(
                "undersampling factors must be >= 1, got {:?}",
                factors
            )));
        }
        Ok(DegradeSpec { factors })
    }

    /// Factor 2 along each phase-encoded axis, 1 along the frequency axis.
    pub fn for_volume(v: &Volume) -> Self {
        let mut factors = [1usize; 3];
        for (axis, role) in v.roles().iter().enumerate() {
            if *role == AxisRole::Phase {
                factors[axis] = 2;
            }
        }
        DegradeSpec { factors }
    }
}

fn axis_strides(shape: [usize; 3]) -> [usize; 3] {
    [shape[1] * shape[2], shape[2], 1]
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn transform_axis(data: &mut [Complex<f64>], shape: [usize; 3], axis: usize, fft: &Arc<dyn Fft<f64>>) {
    let n = shape[axis];
    let strides = axis_strides(shape);
    let (a, b) = other_axes(axis);
    let mut line = vec![Complex::default(); n];
    let mut scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
    for i in 0..shape[a] {
        for j in 0..shape[b] {
            let base = i * strides[a] + j * strides[b];
            for t in 0..n {
                line[t] = data[base + t * strides[axis]];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for t in 0..n {
                data[base + t * strides[axis]] = line[t];
            }
        }
    }
}

/// Unnormalized forward DFT along all three axes. DC sits at index 0.
pub fn fft3(v: &Volume) -> Spectrum {
    let shape = v.shape();
    let mut data: Vec<Complex<f64>> = v.data.iter().map(|&x| Complex::new(x, 0.0)).collect();
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        let fft = planner.plan_fft_forward(shape[axis]);
        transform_axis(&mut data, shape, axis, &fft);
    }
    Spectrum { shape, data }
}

/// Inverse DFT with 1/N normalization. The input must describe a real field;
/// a relative imaginary residue above 1e-9 is reported as an error rather
/// than silently dropped.
pub fn ifft3(spec: &Spectrum) -> Result<Volume> {
    ifft3_with_floor(spec, 0.0)
}

/// Like [`ifft3`], with an external L2 amplitude for the realness check.
/// A spectrum whose retained bins are pure rounding noise from a much larger
/// source field has no internal scale left, so the residue is measured
/// against `amplitude_floor` instead.
pub fn ifft3_with_floor(spec: &Spectrum, amplitude_floor: f64) -> Result<Volume> {
    let shape = spec.shape;
    let n: usize = shape.iter().product();
    if spec.data.len() != n {
        return Err(Error::shape(format!(
            "spectrum data length {} does not match shape {:?}",
            spec.data.len(),
            shape
        )));
    }
    let mut data = spec.data.clone();
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        let fft = planner.plan_fft_inverse(shape[axis]);
        transform_axis(&mut data, shape, axis, &fft);
    }
    let inv_n = 1.0 / n as f64;
    let mut re_sq = 0.0;
    let mut im_sq = 0.0;
    let mut out = Vec::with_capacity(n);
    for c in &data {
        let re = c.re * inv_n;
        let im = c.im * inv_n;
        re_sq += re * re;
        im_sq += im * im;
        out.push(re);
    }
    if im_sq.sqrt() > 1e-9 * re_sq.sqrt().max(amplitude_floor) + 1e-300 {
        return Err(Error::NumericalIntegrity(format!(
            "inverse transform produced imaginary residue {:.3e} against real norm {:.3e}",
            im_sq.sqrt(),
            re_sq.sqrt()
        )));
    }
    Volume::new(shape, out)
}

/// Destination-to-source index map for one truncated axis. Each entry is the
/// retained source bin plus, for the split Nyquist bin of an even-length
/// output, the conjugate partner that folds onto it.
fn truncation_map(n: usize, m: usize) -> Vec<(usize, Option<usize>)> {
    let half = m / 2;
    (0..m)
        .map(|d| {
            if m % 2 == 0 && d == half {
                (half, Some(n - half))
            } else if d <= half {
                (d, None)
            } else {
                (n - m + d, None)
            }
        })
        .collect()
}

fn truncate_axis(
    data: &[Complex<f64>],
    shape: [usize; 3],
    axis: usize,
    factor: usize,
) -> Result<(Vec<Complex<f64>>, [usize; 3])> {
    let n = shape[axis];
    if factor > n {
        return Err(Error::config(format!(
            "undersampling factor {} exceeds axis length {}",
            factor, n
        )));
    }
    if n % factor != 0 {
        return Err(Error::config(format!(
            "axis length {} is not divisible by factor {}",
            n, factor
        )));
    }
    let m = n / factor;
    let map = truncation_map(n, m);
    let mut out_shape = shape;
    out_shape[axis] = m;
    let src_strides = axis_strides(shape);
    let dst_strides = axis_strides(out_shape);
    let (a, b) = other_axes(axis);
    let mut out = vec![Complex::default(); out_shape.iter().product()];
    for i in 0..shape[a] {
        for j in 0..shape[b] {
            let src_base = i * src_strides[a] + j * src_strides[b];
            let dst_base = i * dst_strides[a] + j * dst_strides[b];
            for (d, &(s, partner)) in map.iter().enumerate() {
                let mut v = data[src_base + s * src_strides[axis]];
                if let Some(p) = partner {
                    v += data[src_base + p * src_strides[axis]];
                }
                out[dst_base + d * dst_strides[axis]] = v;
            }
        }
    }
    Ok((out, out_shape))
}

/// Keep the central 1/factor block of k-space along each axis. Interior
/// retained coefficients are copied verbatim; the boundary bin of an
/// even-length output absorbs its conjugate partner so real fields stay real.
pub fn kspace_truncate(spec: &Spectrum, factors: [usize; 3]) -> Result<Spectrum> {
    if factors.iter().any(|&f| f == 0) {
        return Err(Error::config("undersampling factors must be >= 1".to_string()));
    }
    let mut data = spec.data.clone();
    let mut shape = spec.shape;
    for axis in 0..3 {
        if factors[axis] > 1 {
            let (d, s) = truncate_axis(&data, shape, axis, factors[axis])?;
            data = d;
            shape = s;
        }
    }
    Ok(Spectrum { shape, data })
}

fn resize_axis(data: &[f64], shape: [usize; 3], axis: usize, nd: usize) -> (Vec<f64>, [usize; 3]) {
    let ns = shape[axis];
    let mut out_shape = shape;
    out_shape[axis] = nd;
    let src_strides = axis_strides(shape);
    let dst_strides = axis_strides(out_shape);
    let (a, b) = other_axes(axis);
    let mut out = vec![0.0; out_shape.iter().product()];
    let step = if nd > 1 {
        (ns - 1) as f64 / (nd - 1) as f64
    } else {
        0.0
    };
    for i in 0..shape[a] {
        for j in 0..shape[b] {
            let src_base = i * src_strides[a] + j * src_strides[b];
            let dst_base = i * dst_strides[a] + j * dst_strides[b];
            for d in 0..nd {
                let pos = d as f64 * step;
                let lo = (pos.floor() as usize).min(ns - 1);
                let hi = (lo + 1).min(ns - 1);
                let t = pos - lo as f64;
                let v = data[src_base + lo * src_strides[axis]] * (1.0 - t)
                    + data[src_base + hi * src_strides[axis]] * t;
                out[dst_base + d * dst_strides[axis]] = v;
            }
        }
    }
    (out, out_shape)
}

/// Separable corner-aligned linear resampling onto `target`. Endpoints map to
/// endpoints, so the physical extent of each axis is preserved and the
/// spacing is rescaled accordingly.
pub fn resize_linear3(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&t| t == 0) {
        return Err(Error::shape("resize target dims must be positive".to_string()));
    }
    let mut data = v.data.clone();
    let mut shape = v.shape();
    for axis in 0..3 {
        if shape[axis] != target[axis] {
            let (d, s) = resize_axis(&data, shape, axis, target[axis]);
            data = d;
            shape = s;
        }
    }
    let src_shape = v.shape();
    let mut spacing = v.spacing;
    for axis in 0..3 {
        if target[axis] > 1 {
            spacing[axis] =
                v.spacing[axis] * (src_shape[axis].saturating_sub(1)) as f64 / (target[axis] - 1) as f64;
        }
    }
    Volume::new(shape, data)?
        .with_spacing(spacing)?
        .with_roles(v.roles())
}

/// Full degradation: crop trailing voxels until each axis divides by its
/// factor, truncate k-space, scale by retained over original voxel count so
/// constants pass through, invert, and resize back onto the input grid.
pub fn degrade(v: &Volume, spec: &DegradeSpec) -> Result<Volume> {
    let shape = v.shape();
    let f = spec.factors;
    let mut cropped_shape = [0usize; 3];
    for axis in 0..3 {
        if f[axis] > shape[axis] {
            return Err(Error::config(format!(
                "undersampling factor {} exceeds axis length {}",
                f[axis], shape[axis]
            )));
        }
        cropped_shape[axis] = shape[axis] / f[axis] * f[axis];
    }
    let work = if cropped_shape != shape {
        log::debug!(
            "cropping volume {:?} to {:?} for divisibility by {:?}",
            shape,
            cropped_shape,
            f
        );
        let mut data = Vec::with_capacity(cropped_shape.iter().product());
        for z in 0..cropped_shape[0] {
            for y in 0..cropped_shape[1] {
                for x in 0..cropped_shape[2] {
                    data.push(v.at(z, y, x));
                }
            }
        }
        Volume::new(cropped_shape, data)?
    } else {
        v.clone()
    };
    let input_l2 = work.energy().sqrt();
    let mut trunc = kspace_truncate(&fft3(&work), f)?;
    let retained: usize = trunc.shape.iter().product();
    let original: usize = cropped_shape.iter().product();
    let scale = retained as f64 / original as f64;
    for c in &mut trunc.data {
        *c *= scale;
    }
    let small = ifft3_with_floor(&trunc, input_l2)?;
    let out = resize_linear3(&small, shape)?;
    let mut out = out;
    out.spacing = v.spacing;
    out.with_roles(v.roles())
}

/// Fraction of spectral energy outside the band the degradation would keep.
/// Used to reject test volumes that a band-limited model could reproduce
/// perfectly.
pub fn band_energy_fraction_outside(v: &Volume, factors: [usize; 3]) -> Result<f64> {
    let shape = v.shape();
    let mut keep: [Vec<bool>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for axis in 0..3 {
        let n = shape[axis];
        let f = factors[axis];
        if f == 0 {
            return Err(Error::config("undersampling factors must be >= 1".to_string()));
        }
        let mut k = vec![false; n];
        if f == 1 {
            k.iter_mut().for_each(|b| *b = true);
        } else {
            if n % f != 0 {
                return Err(Error::config(format!(
                    "axis length {} is not divisible by factor {}",
                    n, f
                )));
            }
            for &(s, partner) in &truncation_map(n, n / f) {
                k[s] = true;
                if let Some(p) = partner {
                    k[p] = true;
                }
            }
        }
        keep[axis] = k;
    }
    let spec = fft3(v);
    let mut total = 0.0;
    let mut inside = 0.0;
    let mut idx = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let e = spec.data[idx].norm_sqr();
                total += e;
                if keep[0][z] && keep[1][y] && keep[2][x] {
                    inside += e;
                }
                idx += 1;
            }
        }
    }
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - inside / total)
}
