//! Tiled single-volume inference.
//!
//! The input is cut into overlapping patches, each runs through the
//! generator, and only each patch's interior core is kept when stitching,
//! so convolution padding artifacts at tile borders never reach the output.
//! Batch normalization defaults to batch statistics, which is how the
//! network behaves during training; running statistics are available via
//! `BnMode::Eval`.

use crate::error::{Error, Result};
use crate::model::GeneratorNet;
use crate::nn::BnMode;
use crate::patchwork::{extract_block, plan_tiles, stitch, PatchSpec};
use crate::tensor::{no_grad, Element, Tensor};
use crate::volume::Volume;
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub patch: [usize; 3],
    pub margin: usize,
    pub bn_mode: BnMode,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            patch: [70, 70, 70],
            margin: 3,
            bn_mode: BnMode::Train,
        }
    }
}

#[derive(Debug)]
pub struct InferResult {
    pub sr: Volume,
    pub wall_seconds: f64,
    pub tiles: usize,
}

/// A volume as a [1,1,D,H,W] network input.
pub fn volume_to_tensor<E: Element>(v: &Volume) -> Tensor<E> {
    let s = v.shape();
    let data: Vec<E> = v.data.iter().map(|&x| E::from_f64(x).unwrap()).collect();
    Tensor::from_vec(data, &[1, 1, s[0], s[1], s[2]]).expect("volume length matches its shape")
}

/// Back from a [1,1,D,H,W] output, reusing `like` for spacing and axis roles.
pub fn tensor_to_volume<E: Element>(t: &Tensor<E>, like: &Volume) -> Result<Volume> {
    let shape = t.shape();
    if shape.len() != 5 || shape[0] != 1 || shape[1] != 1 {
        return Err(Error::shape(format!(
            "expected a [1,1,D,H,W] tensor, got {:?}",
            shape
        )));
    }
    let data: Vec<f64> = t.to_vec().iter().map(|v| v.to_f64().unwrap()).collect();
    Volume::new([shape[2], shape[3], shape[4]], data)?
        .with_spacing(like.spacing)?
        .with_roles(like.roles())
}

/// Runs the generator over `lr` tile by tile and stitches the cores.
pub fn super_resolve<E: Element>(
    net: &GeneratorNet<E>,
    lr: &Volume,
    opts: &InferOptions,
) -> Result<InferResult> {
    let spec = PatchSpec::new(opts.patch, opts.margin, 1)?;
    let start = Instant::now();
    let layout = plan_tiles(lr.shape(), &spec);
    let mut patches = Vec::with_capacity(layout.tiles.len());
    for tile in &layout.tiles {
        let block = extract_block(lr, tile.offset, tile.extent)?;
        let x = volume_to_tensor::<E>(&block);
        let y = no_grad(|| net.forward(&x, opts.bn_mode))?;
        patches.push(tensor_to_volume(&y, &block)?);
    }
    let sr = stitch(&layout, &patches)?;
    Ok(InferResult {
        sr,
        wall_seconds: start.elapsed().as_secs_f64(),
        tiles: patches.len(),
    })
}
