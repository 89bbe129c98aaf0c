//! Trains a small generator under voxelwise L1 on the phantom dataset,
//! logging every step and validating with full-volume tiled inference. The
//! resulting checkpoints seed the gan_finetune and tiled_inference examples.
//!
//! Run with: cargo run --release --example train_l1

use std::path::Path;
use volsr::harness::config::{ConfigMap, TrainPlan};
use volsr::harness::dataset::{generate_phantom_dataset, DatasetManifest};
use volsr::harness::events::{read_events, EventKind};
use volsr::harness::trainer::train;
use volsr::Result;

fn main() -> Result<()> {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/demo");
    let data = demo.join("phantoms");
    let manifest_path = data.join("manifest.json");
    if !manifest_path.is_file() {
        generate_phantom_dataset(&data, [64, 64, 64], 2024, [6, 2, 3, 1])?;
    }
    let manifest = DatasetManifest::load(&manifest_path)?;

    let mut cfg = ConfigMap::empty();
    cfg.set("phase", "l1")?;
    cfg.set("model.config", "b2u2k8")?;
    cfg.set("train.steps", "300")?;
    cfg.set("train.batch", "4")?;
    cfg.set("train.lr", "1e-3")?;
    cfg.set("train.seed", "1")?;
    cfg.set("patch.size", "14")?;
    cfg.set("patch.margin", "3")?;
    cfg.set("patch.per_subject", "18")?;
    cfg.set("val.cadence", "100")?;
    cfg.set("val.patch", "48")?;
    cfg.set("val.margin", "3")?;
    let plan = TrainPlan::from_config(&cfg)?;

    let out = demo.join("run_l1");
    println!(
        "training {} for {} steps (batch {}, {}³ patches)...",
        plan.generator.name(),
        plan.steps,
        plan.batch,
        plan.patch.size[0]
    );
    let t0 = std::time::Instant::now();
    let outcome = train(&plan, &manifest, &out)?;
    println!("done in {:.1} s over {} epochs", t0.elapsed().as_secs_f64(), outcome.epochs_started);

    let events = read_events(&outcome.events_path)?;
    let losses: Vec<f64> = events
        .iter()
        .filter(|e| e.kind == EventKind::GStep)
        .map(|e| e.value)
        .collect();
    let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let last: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    println!("training L1, mean of first 20 steps {:.4}, last 20 steps {:.4}", first, last);
    for e in events.iter().filter(|e| e.kind == EventKind::Val) {
        println!("  step {:>4}  validation MSE {:.6}", e.step, e.value);
    }
    println!("best validation MSE {:.6}", outcome.best_val.unwrap());
    println!("checkpoints: {} and {}", outcome.best_ckpt.display(), outcome.latest_ckpt.display());
    Ok(())
}
