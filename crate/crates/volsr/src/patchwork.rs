//! Training-patch sampling and margin-discard tiled inference.
//!
//! Tiling follows a shift-inward scheme: interior tiles advance by
//! `size - 2*margin`, the last tile per axis clamps so the patch stays
//! in-bounds, and each tile keeps a core region. Cores partition the volume
//! exactly, so stitching writes every voxel once and never averages.

use crate::error::{Error, Result};
use crate::volume::Volume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub margin: usize,
    pub per_subject: usize,
}

impl PatchSpec {
    pub fn new(size: [usize; 3], margin: usize, per_subject: usize) -> Result<Self> {
        if size.iter().any(|&s| s <= 2 * margin) {
            return Err(Error::config(format!(
                "patch size {:?} must exceed twice the margin {}",
                size, margin
            )));
        }
        if per_subject == 0 {
            return Err(Error::config("per-subject patch count must be >= 1".to_string()));
        }
        Ok(PatchSpec { size, margin, per_subject })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub offset: [usize; 3],
    pub extent: [usize; 3],
    pub core_offset: [usize; 3],
    pub core_extent: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct TileLayout {
    pub shape: [usize; 3],
    pub tiles: Vec<Tile>,
}

#[derive(Clone, Copy)]
struct AxisSeg {
    off: usize,
    ext: usize,
    core_off: usize,
    core_ext: usize,
}

fn axis_segments(len: usize, size: usize, margin: usize) -> Vec<AxisSeg> {
    if len <= size {
        return vec![AxisSeg { off: 0, ext: len, core_off: 0, core_ext: len }];
    }
    let stride = size - 2 * margin;
    let mut offsets = Vec::new();
    let mut o = 0usize;
    loop {
        if o + size >= len {
            offsets.push(len - size);
            break;
        }
        offsets.push(o);
        o += stride;
    }
    let mut segs = Vec::with_capacity(offsets.len());
    for (t, &off) in offsets.iter().enumerate() {
        let core_off = if t == 0 { 0 } else { off + margin };
        let core_end = if t + 1 == offsets.len() {
            len
        } else {
            offsets[t + 1] + margin
        };
        segs.push(AxisSeg { off, ext: size, core_off, core_ext: core_end - core_off });
    }
    segs
}

/// Plan a tiling whose kept cores partition `shape`. Axes shorter than the
/// patch size degenerate to a single full-extent tile on that axis.
pub fn plan_tiles(shape: [usize; 3], spec: &PatchSpec) -> TileLayout {
    let segs: Vec<Vec<AxisSeg>> = (0..3)
        .map(|a| axis_segments(shape[a], spec.size[a], spec.margin))
        .collect();
    let mut tiles = Vec::with_capacity(segs[0].len() * segs[1].len() * segs[2].len());
    for sz in &segs[0] {
        for sy in &segs[1] {
            for sx in &segs[2] {
                tiles.push(Tile {
                    offset: [sz.off, sy.off, sx.off],
                    extent: [sz.ext, sy.ext, sx.ext],
                    core_offset: [sz.core_off, sy.core_off, sx.core_off],
                    core_extent: [sz.core_ext, sy.core_ext, sx.core_ext],
                });
            }
        }
    }
    TileLayout { shape, tiles }
}

/// Copy a block out of a volume, keeping spacing and axis roles.
pub fn extract_block(v: &Volume, offset: [usize; 3], extent: [usize; 3]) -> Result<Volume> {
    let shape = v.shape();
    for a in 0..3 {
        if offset[a] + extent[a] > shape[a] {
            return Err(Error::shape(format!(
                "block offset {:?} extent {:?} exceeds volume shape {:?}",
                offset, extent, shape
            )));
        }
    }
    let mut data = Vec::with_capacity(extent.iter().product());
    for z in 0..extent[0] {
        for y in 0..extent[1] {
            let row = v.idx(offset[0] + z, offset[1] + y, offset[2]);
            data.extend_from_slice(&v.data[row..row + extent[2]]);
        }
    }
    Volume::new(extent, data)?
        .with_spacing(v.spacing)?
        .with_roles(v.roles())
}

/// Extract every tile patch of a layout.
pub fn extract(layout: &TileLayout, v: &Volume) -> Result<Vec<Volume>> {
    if v.shape() != layout.shape {
        return Err(Error::shape(format!(
            "layout shape {:?} does not match volume {:?}",
            layout.shape,
            v.shape()
        )));
    }
    layout
        .tiles
        .iter()
        .map(|t| extract_block(v, t.offset, t.extent))
        .collect()
}

/// Reassemble a volume from per-tile patches, copying only each tile's core.
pub fn stitch(layout: &TileLayout, patches: &[Volume]) -> Result<Volume> {
    if patches.len() != layout.tiles.len() {
        return Err(Error::shape(format!(
            "layout has {} tiles but {} patches were given",
            layout.tiles.len(),
            patches.len()
        )));
    }
    let mut out = Volume::zeros(layout.shape);
    for (tile, patch) in layout.tiles.iter().zip(patches) {
        if patch.shape() != tile.extent {
            return Err(Error::shape(format!(
                "patch shape {:?} does not match tile extent {:?}",
                patch.shape(),
                tile.extent
            )));
        }
        for z in 0..tile.core_extent[0] {
            for y in 0..tile.core_extent[1] {
                let src = patch.idx(
                    tile.core_offset[0] - tile.offset[0] + z,
                    tile.core_offset[1] - tile.offset[1] + y,
                    tile.core_offset[2] - tile.offset[2],
                );
                let dst = out.idx(
                    tile.core_offset[0] + z,
                    tile.core_offset[1] + y,
                    tile.core_offset[2],
                );
                out.data[dst..dst + tile.core_extent[2]]
                    .copy_from_slice(&patch.data[src..src + tile.core_extent[2]]);
            }
        }
    }
    if let Some(p) = patches.first() {
        out.spacing = p.spacing;
        out = out.with_roles(p.roles())?;
    }
    Ok(out)
}

/// Uniform in-bounds patch offsets, deterministic under the seed.
pub fn sample_patch_offsets(
    shape: [usize; 3],
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<[usize; 3]>> {
    for a in 0..3 {
        if spec.size[a] > shape[a] {
            return Err(Error::config(format!(
                "patch size {:?} exceeds volume shape {:?}",
                spec.size, shape
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.per_subject);
    for _ in 0..spec.per_subject {
        let mut off = [0usize; 3];
        for a in 0..3 {
            off[a] = rng.gen_range(0..=shape[a] - spec.size[a]);
        }
        out.push(off);
    }
    Ok(out)
}

/// Aligned LR/HR training pairs at shared random offsets.
pub fn sample_training_patches(
    lr: &Volume,
    hr: &Volume,
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<(Volume, Volume)>> {
    if lr.shape() != hr.shape() {
        return Err(Error::shape(format!(
            "lr shape {:?} does not match hr shape {:?}",
            lr.shape(),
            hr.shape()
        )));
    }
    sample_patch_offsets(lr.shape(), spec, seed)?
        .into_iter()
        .map(|off| {
            Ok((
                extract_block(lr, off, spec.size)?,
                extract_block(hr, off, spec.size)?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Volume::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn assert_partition(layout: &TileLayout) {
        let n: usize = layout.shape.iter().product();
        let mut claimed = vec![false; n];
        let mut total = 0usize;
        for t in &layout.tiles {
            for a in 0..3 {
                assert!(t.offset[a] + t.extent[a] <= layout.shape[a]);
                assert!(t.core_offset[a] >= t.offset[a]);
                assert!(t.core_offset[a] + t.core_extent[a] <= t.offset[a] + t.extent[a]);
            }
            total += t.core_extent.iter().product::<usize>();
            for z in 0..t.core_extent[0] {
                for y in 0..t.core_extent[1] {
                    for x in 0..t.core_extent[2] {
                        let i = ((t.core_offset[0] + z) * layout.shape[1] + t.core_offset[1] + y)
                            * layout.shape[2]
                            + t.core_offset[2]
                            + x;
                        assert!(!claimed[i], "voxel {} claimed twice", i);
                        claimed[i] = true;
                    }
                }
            }
        }
        assert_eq!(total, n);
        assert!(claimed.iter().all(|&c| c));
    }

    #[test]
    fn spec_rejects_margin_swallowing_patch() {
        assert!(PatchSpec::new([6, 6, 6], 3, 1).is_err());
        assert!(PatchSpec::new([7, 7, 7], 3, 1).is_ok());
    }

    #[test]
    fn degenerate_plan_is_single_tile() {
        let spec = PatchSpec::new([70, 70, 70], 3, 1).unwrap();
        let layout = plan_tiles([64, 64, 64], &spec);
        assert_eq!(layout.tiles.len(), 1);
        let t = layout.tiles[0];
        assert_eq!(t.offset, [0, 0, 0]);
        assert_eq!(t.extent, [64, 64, 64]);
        assert_eq!(t.core_extent, [64, 64, 64]);
    }

    #[test]
    fn interior_stride_is_size_minus_two_margins() {
        let spec = PatchSpec::new([70, 70, 70], 3, 1).unwrap();
        let layout = plan_tiles([128, 128, 128], &spec);
        let mut offs: Vec<usize> = layout.tiles.iter().map(|t| t.offset[0]).collect();
        offs.sort_unstable();
        offs.dedup();
        assert_eq!(offs, vec![0, 58]);
        assert_partition(&layout);
        let mut long = plan_tiles([256, 70, 70], &spec).tiles;
        long.sort_by_key(|t| t.offset[0]);
        assert_eq!(long[1].offset[0] - long[0].offset[0], 64);
    }

    #[test]
    fn zero_margin_plan_is_plain_grid() {
        let spec = PatchSpec::new([4, 4, 4], 0, 1).unwrap();
        let layout = plan_tiles([12, 8, 4], &spec);
        assert_eq!(layout.tiles.len(), 3 * 2 * 1);
        for t in &layout.tiles {
            assert_eq!(t.offset, t.core_offset);
            assert_eq!(t.extent, t.core_extent);
        }
        assert_partition(&layout);
    }

    #[test]
    fn shape_sweep_partitions_and_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let shape = [
                rng.gen_range(40..=160),
                rng.gen_range(40..=160),
                rng.gen_range(40..=160),
            ];
            let margin = rng.gen_range(0..=5usize);
            let size = [
                rng.gen_range((2 * margin + 1).max(8)..=64),
                rng.gen_range((2 * margin + 1).max(8)..=64),
                rng.gen_range((2 * margin + 1).max(8)..=64),
            ];
            let spec = PatchSpec::new(size, margin, 1).unwrap();
            let layout = plan_tiles(shape, &spec);
            assert_partition(&layout);
            let v = random_volume(shape, rng.gen());
            let back = stitch(&layout, &extract(&layout, &v).unwrap()).unwrap();
            assert!(back.data.iter().zip(&v.data).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn voxels_outside_cores_never_reach_output() {
        let spec = PatchSpec::new([16, 16, 16], 3, 1).unwrap();
        let v = random_volume([40, 40, 40], 5);
        let layout = plan_tiles(v.shape(), &spec);
        let mut patches = extract(&layout, &v).unwrap();
        for (tile, patch) in layout.tiles.iter().zip(&mut patches) {
            for z in 0..tile.extent[0] {
                for y in 0..tile.extent[1] {
                    for x in 0..tile.extent[2] {
                        let in_core = (0..3).all(|a| {
                            let p = [z, y, x][a] + tile.offset[a];
                            p >= tile.core_offset[a] && p < tile.core_offset[a] + tile.core_extent[a]
                        });
                        if !in_core {
                            let i = patch.idx(z, y, x);
                            patch.data[i] = 1e9;
                        }
                    }
                }
            }
        }
        let out = stitch(&layout, &patches).unwrap();
        assert!(out.data.iter().zip(&v.data).all(|(a, b)| a == b));
    }

    #[test]
    fn stitch_rejects_extent_mismatch() {
        let spec = PatchSpec::new([8, 8, 8], 1, 1).unwrap();
        let v = random_volume([20, 20, 20], 6);
        let layout = plan_tiles(v.shape(), &spec);
        let mut patches = extract(&layout, &v).unwrap();
        patches[0] = Volume::zeros([3, 3, 3]);
        assert!(stitch(&layout, &patches).is_err());
        patches.pop();
        assert!(stitch(&layout, &patches).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_in_bounds() {
        let spec = PatchSpec::new([40, 40, 40], 3, 18).unwrap();
        let a = sample_patch_offsets([48, 48, 48], &spec, 9).unwrap();
        let b = sample_patch_offsets([48, 48, 48], &spec, 9).unwrap();
        assert_eq!(a, b);
        for seed in 0..1000 {
            for off in sample_patch_offsets([48, 48, 48], &spec, seed).unwrap() {
                assert!(off.iter().all(|&o| o <= 8));
            }
        }
    }

    #[test]
    fn sampling_rejects_oversized_patch() {
        let spec = PatchSpec::new([40, 40, 40], 0, 1).unwrap();
        assert!(sample_patch_offsets([32, 48, 48], &spec, 0).is_err());
    }

    #[test]
    fn offsets_are_uniform() {
        let spec = PatchSpec::new([40, 40, 40], 0, 10_000).unwrap();
        let offs = sample_patch_offsets([48, 48, 48], &spec, 123).unwrap();
        let bins = 9;
        let n = offs.len() as f64;
        let expect = n / bins as f64;
        let sigma = (n * (1.0 / bins as f64) * (1.0 - 1.0 / bins as f64)).sqrt();
        for axis in 0..3 {
            let mut counts = vec![0usize; bins];
            for o in &offs {
                counts[o[axis]] += 1;
            }
            for (i, &c) in counts.iter().enumerate() {
                assert!(
                    (c as f64 - expect).abs() <= 3.0 * sigma,
                    "axis {} offset {} count {} vs expected {:.0}",
                    axis,
                    i,
                    c,
                    expect
                );
            }
        }
    }

    #[test]
    fn training_pairs_share_offsets() {
        let lr = random_volume([32, 32, 32], 7);
        let mut hr = lr.clone();
        for v in &mut hr.data {
            *v += 1.0;
        }
        let spec = PatchSpec::new([12, 12, 12], 0, 6).unwrap();
        let pairs = sample_training_patches(&lr, &hr, &spec, 11).unwrap();
        assert_eq!(pairs.len(), 6);
        for (pl, ph) in &pairs {
            assert!(pl
                .data
                .iter()
                .zip(&ph.data)
                .all(|(a, b)| (b - a - 1.0).abs() < 1e-12));
        }
    }
}
