//! 3-d scalar fields with voxel spacing and axis-role metadata, plus the
//! on-disk container format.
//!
//! Files are a short text header followed by raw little-endian scalars in
//! D-major order:
//!
//! ```text
//! volsr-volume 1
//! dtype f64
//! shape 64 64 64
//! spacing 1 1 1
//! phase_axes 1 2
//! end
//! <binary payload>
//! ```

use crate::error::{Error, Result};
use crate::tensor::Dtype;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &str = "volsr-volume 1";

/// MRI axis economics: resolution along phase-encoded axes costs scan time,
/// so those are the axes the degradation truncates.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AxisRole {
    Frequency,
    Phase,
}

#[derive(Clone, Debug)]
pub struct Volume {
    shape: [usize; 3],
    pub spacing: [f64; 3],
    roles: [AxisRole; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if n == 0 {
            return Err(Error::shape("volume dims must be positive".to_string()));
        }
        Ok(Volume {
            shape,
            spacing: [1.0; 3],
            roles: [AxisRole::Frequency, AxisRole::Phase, AxisRole::Phase],
            data,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::constant(shape, 0.0)
    }

    pub fn constant(shape: [usize; 3], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Volume::new(shape, vec![v; n]).expect("constant volume")
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::shape(format!(
                "spacing must be strictly positive, got {:?}",
                spacing
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_roles(mut self, roles: [AxisRole; 3]) -> Result<Self> {
        let phase = roles.iter().filter(|r| **r == AxisRole::Phase).count();
        if phase != 2 {
            return Err(Error::Config(format!(
                "exactly two axes must be phase-encoded, got {}",
                phase
            )));
        }
        self.roles = roles;
        Ok(self)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn roles(&self) -> [AxisRole; 3] {
        self.roles
    }

    pub fn phase_axes(&self) -> [usize; 2] {
        let mut out = [0usize; 2];
        let mut k = 0;
        for (i, r) in self.roles.iter().enumerate() {
            if *r == AxisRole::Phase {
                out[k] = i;
                k += 1;
            }
        }
        out
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(z, y, x)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Per-volume z-score: mean 0, population std 1.
    pub fn zscore(&mut self) {
        let m = self.mean();
        let s = self.std().max(1e-12);
        for v in &mut self.data {
            *v = (*v - m) / s;
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn write(&self, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", MAGIC)?;
        writeln!(w, "dtype {}", dtype)?;
        writeln!(w, "shape {} {} {}", self.shape[0], self.shape[1], self.shape[2])?;
        writeln!(w, "spacing {} {} {}", self.spacing[0], self.spacing[1], self.spacing[2])?;
        let pa = self.phase_axes();
        writeln!(w, "phase_axes {} {}", pa[0], pa[1])?;
        writeln!(w, "end")?;
        match dtype {
            Dtype::F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        // header is ASCII lines up to and including "end\n"
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte).map_err(|_| {
                Error::Format(format!("{}: truncated header", path.display()))
            })?;
            header.push(byte[0]);
            if header.ends_with(b"\nend\n") || header == b"end\n" {
                break;
            }
            if header.len() > 4096 {
                return Err(Error::Format(format!(
                    "{}: header missing end marker",
                    path.display()
                )));
            }
        }
        let text = String::from_utf8(header)
            .map_err(|_| Error::Format(format!("{}: non-utf8 header", path.display())))?;
        let mut dtype = None;
        let mut shape = None;
        let mut spacing = [1.0f64; 3];
        let mut phase_axes = [1usize, 2];
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != MAGIC {
                    return Err(Error::Format(format!(
                        "{}: bad magic line {:?}",
                        path.display(),
                        line
                    )));
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("dtype") => {
                    dtype = Some(match parts.next() {
                        Some("f32") => Dtype::F32,
                        Some("f64") => Dtype::F64,
                        other => {
                            return Err(Error::Format(format!(
                                "{}: unknown dtype {:?}",
                                path.display(),
                                other
                            )))
                        }
                    });
                }
                Some("shape") => {
                    let dims: Vec<usize> = parts
                        .map(|p| p.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Format(format!("{}: bad shape", path.display())))?;
                    if dims.len() != 3 || dims.iter().any(|&d| d == 0) {
                        return Err(Error::Format(format!("{}: bad shape", path.display())));
                    }
                    shape = Some([dims[0], dims[1], dims[2]]);
                }
                Some("spacing") => {
                    let s: Vec<f64> = parts
                        .map(|p| p.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Format(format!("{}: bad spacing", path.display())))?;
                    if s.len() != 3 || s.iter().any(|&v| v <= 0.0) {
                        return Err(Error::Format(format!("{}: bad spacing", path.display())));
                    }
                    spacing = [s[0], s[1], s[2]];
                }
                Some("phase_axes") => {
                    let a: Vec<usize> = parts
                        .map(|p| p.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Format(format!("{}: bad phase_axes", path.display())))?;
                    if a.len() != 2 || a[0] > 2 || a[1] > 2 || a[0] == a[1] {
                        return Err(Error::Format(format!("{}: bad phase_axes", path.display())));
                    }
                    phase_axes = [a[0], a[1]];
                }
                Some("end") => break,
                other => {
                    return Err(Error::Format(format!(
                        "{}: unknown header field {:?}",
                        path.display(),
                        other
                    )))
                }
            }
        }
        let dtype =
            dtype.ok_or_else(|| Error::Format(format!("{}: missing dtype", path.display())))?;
        let shape =
            shape.ok_or_else(|| Error::Format(format!("{}: missing shape", path.display())))?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * dtype.size_bytes()];
        r.read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("{}: truncated payload", path.display())))?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        let mut roles = [AxisRole::Frequency; 3];
        roles[phase_axes[0]] = AxisRole::Phase;
        roles[phase_axes[1]] = AxisRole::Phase;
        Volume::new(shape, data)?
            .with_spacing(spacing)?
            .with_roles(roles)
    }
}
