//! Super-resolves a full volume that never fits through the network in one
//! piece: the volume is cut into overlapping tiles, each tile runs through
//! the generator, and the stitched result drops the overlap margins. Batch
//! norm stays in train mode, using each tile's own statistics.
//!
//! Run with: cargo run --release --example tiled_inference

use std::path::Path;
use volsr::degrade::{degrade, DegradeSpec};
use volsr::harness::checkpoint::{restore_generator, Checkpoint};
use volsr::harness::dataset::{DatasetManifest, Split};
use volsr::harness::infer::{super_resolve, InferOptions};
use volsr::nn::BnMode;
use volsr::tensor::Dtype;
use volsr::volume::Volume;
use volsr::Result;

fn main() -> Result<()> {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/demo");
    let ckpt_path = demo.join("run_l1/best.ckpt");
    if !ckpt_path.is_file() {
        println!("no checkpoint yet; run `cargo run --release --example train_l1` first");
        std::process::exit(1);
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let net = restore_generator::<f32>(&ckpt)?;
    println!(
        "loaded {} ({} params) from step {}",
        net.cfg.name(),
        net.params.total_elements(),
        ckpt.global_step
    );

    let manifest = DatasetManifest::load(demo.join("phantoms/manifest.json"))?;
    let subject = &manifest.subjects_in(Split::Evaluation)[0];
    let mut hr = Volume::read(&subject.path)?;
    hr.zscore();
    let lr = degrade(&hr, &DegradeSpec::for_volume(&hr))?;
    println!("subject {}: {:?} voxels", subject.id, hr.shape());

    let opts = InferOptions {
        patch: [48, 48, 48],
        margin: 3,
        bn_mode: BnMode::Train,
    };
    let result = super_resolve(&net, &lr, &opts)?;
    println!(
        "stitched {} tiles of {:?} (margin {}) in {:.2} s",
        result.tiles, opts.patch, opts.margin, result.wall_seconds
    );

    // Train-mode batch norm draws statistics from each tile, so a different
    // tiling gives slightly different voxels; reconstruction quality is what
    // must hold up.
    let alt = super_resolve(
        &net,
        &lr,
        &InferOptions { patch: [32, 32, 32], margin: 2, bn_mode: BnMode::Train },
    )?;
    let mse = |v: &Volume| -> f64 {
        v.data.iter().zip(&hr.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / hr.numel() as f64
    };
    println!(
        "full-volume MSE vs reference: degraded input {:.5}, 48³ tiling {:.5}, 32³ tiling {:.5}",
        mse(&lr),
        mse(&result.sr),
        mse(&alt.sr)
    );

    let out = demo.join("sr_demo.vol");
    result.sr.write(&out, Dtype::F64)?;
    let lr_out = demo.join("lr_demo.vol");
    lr.write(&lr_out, Dtype::F64)?;
    let hr_out = demo.join("hr_demo.vol");
    hr.write(&hr_out, Dtype::F64)?;
    println!("wrote {}, {} and {}", out.display(), lr_out.display(), hr_out.display());
    Ok(())
}
