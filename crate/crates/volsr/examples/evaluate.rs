//! Scores super-resolved output against its reference with the slicewise
//! protocol: PSNR, SSIM and NRMSE are computed per 2-d slice in the most
//! degraded plane and averaged. Also demonstrates Dice/Jaccard agreement on
//! segmentations derived from the volumes.
//!
//! Run with: cargo run --release --example evaluate

use std::path::Path;
use volsr::metrics::{
    degraded_plane, dice, jaccard, nrmse_slicewise, psnr_slicewise, ssim_slicewise, EvalReport,
    LabelMap, SubjectScores,
};
use volsr::volume::Volume;
use volsr::Result;

/// Two-class segmentation by thresholding at one standard deviation.
fn bright_mask(v: &Volume) -> Result<LabelMap> {
    let labels = v.data.iter().map(|&x| (x > 1.0) as u32).collect();
    LabelMap::new(v.shape(), labels, vec![0, 1])
}

fn main() -> Result<()> {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/demo");
    let hr_path = demo.join("hr_demo.vol");
    if !hr_path.is_file() {
        println!("no demo volumes yet; run `cargo run --release --example tiled_inference` first");
        std::process::exit(1);
    }
    let hr = Volume::read(&hr_path)?;
    let lr = Volume::read(demo.join("lr_demo.vol"))?;
    let sr = Volume::read(demo.join("sr_demo.vol"))?;

    let plane = degraded_plane(&hr);
    println!("slicewise metrics in plane {:?} (the plane both truncated axes span)", plane);

    let mut report = EvalReport::default();
    for (id, v) in [("degraded", &lr), ("super-resolved", &sr)] {
        report.subjects.push(SubjectScores {
            id: id.to_string(),
            psnr: psnr_slicewise(v, &hr, plane)?,
            ssim: ssim_slicewise(v, &hr, plane)?,
            nrmse: nrmse_slicewise(v, &hr, plane)?,
        });
    }
    print!("{}", report.render());

    println!();
    println!("segmentation agreement on the bright-structure mask:");
    let ref_mask = bright_mask(&hr)?;
    for (id, v) in [("degraded", &lr), ("super-resolved", &sr)] {
        let m = bright_mask(v)?;
        println!(
            "  {:<15} dice {:.4}  jaccard {:.4}",
            id,
            dice(&ref_mask, &m, 1)?,
            jaccard(&ref_mask, &m, 1)?
        );
    }
    Ok(())
}
