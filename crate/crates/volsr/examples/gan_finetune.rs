//! Fine-tunes an L1-trained generator adversarially: a WGAN-GP critic is
//! trained from scratch while the generator minimizes L1 plus a weighted
//! adversarial term. Critic and generator steps interleave on the
//! warmup/ratio/burst schedule, and the event log is audited against that
//! schedule afterwards.
//!
//! Run with: cargo run --release --example gan_finetune

use std::path::Path;
use volsr::harness::config::{ConfigMap, TrainPlan};
use volsr::harness::dataset::DatasetManifest;
use volsr::harness::events::{read_events, EventKind};
use volsr::harness::schedule::verify_gan_trace;
use volsr::harness::trainer::train;
use volsr::Result;

fn main() -> Result<()> {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/demo");
    let init = demo.join("run_l1/latest.ckpt");
    if !init.is_file() {
        println!("no L1 checkpoint yet; run `cargo run --release --example train_l1` first");
        std::process::exit(1);
    }
    let manifest = DatasetManifest::load(demo.join("phantoms/manifest.json"))?;

    // Desk-scale stand-ins for the published constants (10000-step warmup,
    // 5:1 ratio, 200-step burst every 500 generator steps) so the whole
    // schedule is visible in a short run.
    let mut cfg = ConfigMap::empty();
    cfg.set("phase", "gan")?;
    cfg.set("model.config", "b2u2k8")?;
    cfg.set("train.init_generator", init.to_string_lossy())?;
    cfg.set("train.steps", "400")?;
    cfg.set("train.batch", "4")?;
    cfg.set("train.lr", "5e-6")?;
    cfg.set("train.d_lr", "1e-4")?;
    cfg.set("train.seed", "1")?;
    cfg.set("gan.lambda", "0.1")?;
    cfg.set("gan.lambda_gp", "10")?;
    cfg.set("gan.warmup", "100")?;
    cfg.set("gan.ratio", "5")?;
    cfg.set("gan.burst_steps", "20")?;
    cfg.set("gan.burst_every", "25")?;
    cfg.set("patch.size", "12")?;
    cfg.set("patch.margin", "3")?;
    cfg.set("patch.per_subject", "18")?;
    cfg.set("val.cadence", "100")?;
    cfg.set("val.patches_per_subject", "4")?;
    cfg.set("d.base_width", "8")?;
    cfg.set("d.stages", "4")?;
    cfg.set("d.head_width", "64")?;
    let plan = TrainPlan::from_config(&cfg)?;

    let out = demo.join("run_gan");
    println!("adversarial fine-tune from {}...", init.display());
    let t0 = std::time::Instant::now();
    let outcome = train(&plan, &manifest, &out)?;
    println!("done in {:.1} s", t0.elapsed().as_secs_f64());

    let events = read_events(&outcome.events_path)?;
    let d_steps = events.iter().filter(|e| e.kind == EventKind::DStep).count();
    let g_steps = events.iter().filter(|e| e.kind == EventKind::GStep).count();
    println!("{} critic steps, {} generator steps", d_steps, g_steps);

    let audited = verify_gan_trace(&events, 100, 5, 20, 25)
        .map_err(volsr::Error::TrainingIntegrity)?;
    println!("event log obeys the warmup/ratio/burst schedule over {} steps", audited);

    for e in events.iter().filter(|e| e.kind == EventKind::Val) {
        println!("  step {:>4}  EM estimate {:+.4}", e.step, e.value);
    }
    println!(
        "checkpoints: {} plus critic {}",
        outcome.latest_ckpt.display(),
        outcome.d_ckpt.unwrap().display()
    );
    Ok(())
}
