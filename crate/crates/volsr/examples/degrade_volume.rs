//! Walks through the low-resolution simulation: 3-d FFT to k-space, centered
//! truncation along the phase-encoded axes, inverse FFT, and linear resize
//! back to the original grid. Shows that factor 1 along every axis is the
//! identity and that real truncation removes high-frequency energy.
//!
//! Run with: cargo run --release --example degrade_volume

use volsr::degrade::{band_energy_fraction_outside, degrade, DegradeSpec};
use volsr::harness::dataset::{generate_phantom_dataset, DatasetManifest};
use volsr::tensor::Dtype;
use volsr::volume::Volume;
use volsr::Result;

fn main() -> Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/demo/phantoms");
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        generate_phantom_dataset(&dir, [64, 64, 64], 2024, [6, 2, 3, 1])?;
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    let hr = Volume::read(&manifest.subjects[0].path)?;
    println!("high-resolution input: shape {:?}", hr.shape());
    println!("  phase-encoded axes {:?} (the axes truncation shortens)", hr.phase_axes());
    println!("  energy {:.3}", hr.energy());
    println!(
        "  energy outside the 1,2,2 retained band {:.1}%",
        100.0 * band_energy_fraction_outside(&hr, [1, 2, 2])?
    );

    // Factor 1 everywhere keeps all of k-space, so the volume survives the
    // round trip through the spectrum.
    let same = degrade(&hr, &DegradeSpec::new([1, 1, 1])?)?;
    let max_dev = hr
        .data
        .iter()
        .zip(&same.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!();
    println!("factors 1,1,1 round trip: max deviation {:.2e}", max_dev);

    let spec = DegradeSpec::for_volume(&hr);
    let lr = degrade(&hr, &spec)?;
    println!();
    println!("factors {:?}:", spec.factors);
    println!("  output shape {:?} (resized back onto the input grid)", lr.shape());
    println!("  energy {:.3} ({:.1}% of the input)", lr.energy(), 100.0 * lr.energy() / hr.energy());

    let out = dir.join("demo_lr.vol");
    lr.write(&out, Dtype::F64)?;
    println!("  written to {}", out.display());
    Ok(())
}
