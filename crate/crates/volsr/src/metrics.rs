//! Reference-based image-quality metrics and segmentation agreement.
//!
//! The headline protocol scores each 2D slice in the most-degraded plane
//! (the plane spanned by the phase-encoded axes) and averages over slices.
//! Volume-global variants exist alongside; the two genuinely differ when the
//! error is anisotropic, and tests pin that difference so the wrong one
//! cannot silently stand in for the other.

use crate::error::{Error, Result};
use crate::volume::Volume;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const PSNR_CAP_DB: f64 = 100.0;
const LABEL_MAGIC: &str = "volsr-labels 1";
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Reference data range with a unit fallback for constant references.
fn ref_range(reference: &Volume) -> f64 {
    let (lo, hi) = reference.min_max();
    let r = hi - lo;
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

fn check_same_shape(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric inputs must share a shape, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_plane(plane: [usize; 2]) -> Result<usize> {
    if plane[0] > 2 || plane[1] > 2 || plane[0] == plane[1] {
        return Err(Error::config(format!("invalid slice plane {:?}", plane)));
    }
    Ok(3 - plane[0] - plane[1])
}

/// The plane spanned by the volume's two phase-encoded axes.
pub fn degraded_plane(v: &Volume) -> [usize; 2] {
    v.phase_axes()
}

/// Row-major copy of one slice; rows run along `plane[0]`.
fn slice_values(v: &Volume, plane: [usize; 2], slice_axis: usize, s: usize) -> Vec<f64> {
    let shape = v.shape();
    let n1 = shape[plane[0]];
    let n2 = shape[plane[1]];
    let mut out = Vec::with_capacity(n1 * n2);
    let mut c = [0usize; 3];
    c[slice_axis]= s;
    for i in 0..n1 {
        c[plane[0]] = i;
        for j in 0..n2 {
            c[plane[1]] = j;
            out.push(v.at(c[0], c[1], c[2]));
        }
    }
    out
}

fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB)
}

/// Slice-averaged PSNR in the given plane, range taken from the reference
/// volume, zero-error slices capped at 100 dB.
pub fn psnr_slicewise(sr: &Volume, reference: &Volume, plane: [usize; 2]) -> Result<f64> {
    check_same_shape(sr, reference)?;
    let axis = check_plane(plane)?;
    let range = ref_range(reference);
    let n = sr.shape()[axis];
    let mut acc = 0.0;
    for s in 0..n {
        let a = slice_values(sr, plane, axis, s);
        let b = slice_values(reference, plane, axis, s);
        let mse = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        acc += psnr_from_mse(mse, range);
    }
    Ok(acc / n as f64)
}

/// PSNR over the pooled volume MSE.
pub fn psnr_global(sr: &Volume, reference: &Volume) -> Result<f64> {
    check_same_shape(sr, reference)?;
    let range = ref_range(reference);
    let mse = sr
        .data
        .iter()
        .zip(&reference.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / sr.numel() as f64;
    Ok(psnr_from_mse(mse, range))
}

/// Reference normalizer for NRMSE.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NrmseNorm {
    /// max - min of the reference region (default)
    Range,
    /// mean of the reference region
    Mean,
    /// root mean square of the reference region
    Euclidean,
}

fn nrmse_denominator(reference: &[f64], norm: NrmseNorm) -> f64 {
    match norm {
        NrmseNorm::Range => {
            let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        }
        NrmseNorm::Mean => {
            (reference.iter().sum::<f64>() / reference.len() as f64).abs()
        }
        NrmseNorm::Euclidean => {
            (reference.iter().map(|x| x * x).sum::<f64>() / reference.len() as f64).sqrt()
        }
    }
}

/// Slice-averaged RMSE normalized per slice; slices whose normalizer
/// vanishes are skipped (count logged).
pub fn nrmse_slicewise_with(
    sr: &Volume,
    reference: &Volume,
    plane: [usize; 2],
    norm: NrmseNorm,
) -> Result<f64> {
    check_same_shape(sr, reference)?;
    let axis = check_plane(plane)?;
    let n = sr.shape()[axis];
    let mut acc = 0.0;
    let mut used = 0usize;
    for s in 0..n {
        let a = slice_values(sr, plane, axis, s);
        let b = slice_values(reference, plane, axis, s);
        let denom = nrmse_denominator(&b, norm);
        if denom <= 0.0 {
            continue;
        }
        let mse = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        acc += mse.sqrt() / denom;
        used += 1;
    }
    if used < n {
        log::warn!("nrmse skipped {} of {} slices with zero normalizer", n - used, n);
    }
    if used == 0 {
        return Err(Error::Contract(
            "nrmse: every slice has a zero reference normalizer".to_string(),
        ));
    }
    Ok(acc / used as f64)
}

pub fn nrmse_slicewise(sr: &Volume, reference: &Volume, plane: [usize; 2]) -> Result<f64> {
    nrmse_slicewise_with(sr, reference, plane, NrmseNorm::Range)
}

/// RMSE over the whole volume normalized by the whole reference.
pub fn nrmse_global(sr: &Volume, reference: &Volume, norm: NrmseNorm) -> Result<f64> {
    check_same_shape(sr, reference)?;
    let denom = nrmse_denominator(&reference.data, norm);
    if denom <= 0.0 {
        return Err(Error::Contract("nrmse: zero reference normalizer".to_string()));
    }
    let mse = sr
        .data
        .iter()
        .zip(&reference.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / sr.numel() as f64;
    Ok(mse.sqrt() / denom)
}

fn gauss_kernel(w: usize, sigma: f64) -> Vec<f64> {
    let c = (w as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..w)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Valid-mode weighted convolution along one axis of an n-d array.
fn valid_conv_axis(data: &[f64], dims: &[usize], axis: usize, kernel: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let w = kernel.len();
    let n = dims[axis];
    let out_n = n - w + 1;
    let mut out_dims = dims.to_vec();
    out_dims[axis] = out_n;
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![0.0; outer * out_n * inner];
    for o in 0..outer {
        for t in 0..out_n {
            for i in 0..inner {
                let mut acc = 0.0;
                let base = (o * n + t) * inner + i;
                for (j, &kv) in kernel.iter().enumerate() {
                    acc += kv * data[base + j * inner];
                }
                out[(o * out_n + t) * inner + i] = acc;
            }
        }
    }
    (out, out_dims)
}

/// Mean SSIM over all valid window positions of an n-d field pair.
fn ssim_nd(x: &[f64], y: &[f64], dims: &[usize], range: f64) -> f64 {
    let wins: Vec<usize> = dims
        .iter()
        .map(|&n| {
            let w = SSIM_WINDOW.min(n);
            if w % 2 == 0 {
                w - 1
            } else {
                w
            }
        })
        .collect();
    if wins.iter().any(|&w| w < SSIM_WINDOW) {
        log::warn!(
            "ssim window shrunk to {:?} for field of dims {:?}",
            wins,
            dims
        );
    }
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mut fields = [x.to_vec(), y.to_vec(), xx, yy, xy];
    let mut cur_dims = dims.to_vec();
    for axis in 0..dims.len() {
        let kernel = gauss_kernel(wins[axis], SSIM_SIGMA);
        let mut next_dims = cur_dims.clone();
        for f in &mut fields {
            let (nf, nd) = valid_conv_axis(f, &cur_dims, axis, &kernel);
            *f = nf;
            next_dims = nd;
        }
        cur_dims = next_dims;
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let n = fields[0].len();
    let mut acc = 0.0;
    for i in 0..n {
        let (mx, my) = (fields[0][i], fields[1][i]);
        let vx = fields[2][i] - mx * mx;
        let vy = fields[3][i] - my * my;
        let cxy = fields[4][i] - mx * my;
        acc += (2.0 * (mx * my) + c1) * (2.0 * cxy + c2)
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    acc / n as f64
}

/// Slice-averaged 2D SSIM with an 11-tap Gaussian window, sigma 1.5,
/// K1 0.01, K2 0.03, range from the reference volume.
pub fn ssim_slicewise(sr: &Volume, reference: &Volume, plane: [usize; 2]) -> Result<f64> {
    check_same_shape(sr, reference)?;
    let axis = check_plane(plane)?;
    let range = ref_range(reference);
    let shape = sr.shape();
    let dims = [shape[plane[0]], shape[plane[1]]];
    let n = shape[axis];
    let mut acc = 0.0;
    for s in 0..n {
        let a = slice_values(sr, plane, axis, s);
        let b = slice_values(reference, plane, axis, s);
        acc += ssim_nd(&a, &b, &dims, range);
    }
    Ok(acc / n as f64)
}

/// Volume-global SSIM with a separable 3D window.
pub fn ssim_global(sr: &Volume, reference: &Volume) -> Result<f64> {
    check_same_shape(sr, reference)?;
    let range = ref_range(reference);
    Ok(ssim_nd(
        &sr.data,
        &reference.data,
        &sr.shape(),
        range,
    ))
}

/// Integer segmentation with an explicit label vocabulary.
#[derive(Clone, Debug)]
pub struct LabelMap {
    shape: [usize; 3],
    pub labels: Vec<u32>,
    pub vocabulary: Vec<u32>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], labels: Vec<u32>, mut vocabulary: Vec<u32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if labels.len() != n {
            return Err(Error::shape(format!(
                "label data length {} does not match shape {:?}",
                labels.len(),
                shape
            )));
        }
        vocabulary.sort_unstable();
        vocabulary.dedup();
        if let Some(bad) = labels.iter().find(|l| vocabulary.binary_search(l).is_err()) {
            return Err(Error::config(format!("label {} not in vocabulary", bad)));
        }
        Ok(LabelMap { shape, labels, vocabulary })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    fn check_label(&self, label: u32) -> Result<()> {
        if self.vocabulary.binary_search(&label).is_err() {
            return Err(Error::config(format!("label {} not in vocabulary", label)));
        }
        Ok(())
    }

    /// Writes a text header (`volsr-labels 1`, shape, vocabulary, `end`)
    /// followed by the labels as little-endian u32 in D-major order.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", LABEL_MAGIC)?;
        writeln!(w, "shape {} {} {}", self.shape[0], self.shape[1], self.shape[2])?;
        write!(w, "vocabulary")?;
        for v in &self.vocabulary {
            write!(w, " {}", v)?;
        }
        writeln!(w)?;
        writeln!(w, "end")?;
        for &l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)
                .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
            header.push(byte[0]);
            if header.ends_with(b"\nend\n") {
                break;
            }
            if header.len() > 4096 {
                return Err(Error::Format(format!(
                    "{}: header exceeds 4096 bytes",
                    path.display()
                )));
            }
        }
        let text = std::str::from_utf8(&header)
            .map_err(|_| Error::Format(format!("{}: non-utf8 header", path.display())))?;
        let mut lines = text.lines();
        if lines.next() != Some(LABEL_MAGIC) {
            return Err(Error::Format(format!(
                "{}: not a label map file",
                path.display()
            )));
        }
        let mut shape: Option<[usize; 3]> = None;
        let mut vocabulary: Option<Vec<u32>> = None;
        for line in lines {
            if line == "end" {
                break;
            }
            let mut it = line.split_whitespace();
            match it.next() {
                Some("shape") => {
                    let dims: Vec<usize> = it.map(|t| t.parse()).collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Format(format!("{}: bad shape line", path.display())))?;
                    if dims.len() != 3 {
                        return Err(Error::Format(format!("{}: shape needs 3 dims", path.display())));
                    }
                    shape = Some([dims[0], dims[1], dims[2]]);
                }
                Some("vocabulary") => {
                    let v: Vec<u32> = it.map(|t| t.parse()).collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Format(format!("{}: bad vocabulary line", path.display())))?;
                    vocabulary = Some(v);
                }
                Some(other) => {
                    return Err(Error::Format(format!(
                        "{}: unknown header field {:?}",
                        path.display(),
                        other
                    )));
                }
                None => {}
            }
        }
        let shape = shape
            .ok_or_else(|| Error::Format(format!("{}: missing shape", path.display())))?;
        let vocabulary = vocabulary
            .ok_or_else(|| Error::Format(format!("{}: missing vocabulary", path.display())))?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra).unwrap_or(0) != 0 {
            return Err(Error::Format(format!(
                "{}: trailing bytes after payload",
                path.display()
            )));
        }
        let labels = payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        LabelMap::new(shape, labels, vocabulary)
    }
}

fn overlap_counts(a: &LabelMap, b: &LabelMap, label: u32) -> Result<(usize, usize, usize)> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "label maps must share a shape, got {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    a.check_label(label)?;
    b.check_label(label)?;
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut ni = 0usize;
    for (x, y) in a.labels.iter().zip(&b.labels) {
        let ia = *x == label;
        let ib = *y == label;
        na += ia as usize;
        nb += ib as usize;
        ni += (ia && ib) as usize;
    }
    Ok((na, nb, ni))
}

/// Dice overlap 2|A∩B| / (|A|+|B|); both-empty counts as perfect agreement.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    let (na, nb, ni) = overlap_counts(a, b, label)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * ni as f64 / (na + nb) as f64)
}

/// Jaccard overlap |A∩B| / |A∪B|; both-empty counts as perfect agreement.
pub fn jaccard(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    let (na, nb, ni) = overlap_counts(a, b, label)?;
    let union = na + nb - ni;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(ni as f64 / union as f64)
}

/// Unweighted mean of a per-label metric over a label set.
pub fn macro_average(
    a: &LabelMap,
    b: &LabelMap,
    labels: &[u32],
    metric: fn(&LabelMap, &LabelMap, u32) -> Result<f64>,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::config("macro average needs at least one label".to_string()));
    }
    let mut acc = 0.0;
    for &l in labels {
        acc += metric(a, b, l)?;
    }
    Ok(acc / labels.len() as f64)
}

pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct SubjectScores {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub subjects: Vec<SubjectScores>,
    pub param_count: Option<usize>,
    pub wall_time_s: Option<f64>,
}

impl EvalReport {
    fn column(&self, f: fn(&SubjectScores) -> f64) -> Vec<f64> {
        self.subjects.iter().map(f).collect()
    }

    /// (mean, population std) triples for psnr, ssim, nrmse.
    pub fn aggregate(&self) -> [(f64, f64); 3] {
        let cols = [
            self.column(|s| s.psnr),
            self.column(|s| s.ssim),
            self.column(|s| s.nrmse),
        ];
        let mut out = [(0.0, 0.0); 3];
        for (i, c) in cols.iter().enumerate() {
            let m = if c.is_empty() {
                0.0
            } else {
                c.iter().sum::<f64>() / c.len() as f64
            };
            out[i] = (m, population_std(c));
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(p) = self.param_count {
            s.push_str(&format!("# params {}\n", p));
        }
        if let Some(t) = self.wall_time_s {
            s.push_str(&format!("# inference_wall_time_s {:.3}\n", t));
        }
        for sub in &self.subjects {
            s.push_str(&format!(
                "subject {} psnr {:.4} ssim {:.6} nrmse {:.6}\n",
                sub.id, sub.psnr, sub.ssim, sub.nrmse
            ));
        }
        let [(pm, ps), (sm, ss), (nm, ns)] = self.aggregate();
        s.push_str(&format!(
            "aggregate psnr {:.4}\u{b1}{:.4} ssim {:.6}\u{b1}{:.6} nrmse {:.6}\u{b1}{:.6}\n",
            pm, ps, sm, ss, nm, ns
        ));
        s
    }
}
