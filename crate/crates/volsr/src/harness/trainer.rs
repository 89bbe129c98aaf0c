//! Two-phase training orchestrator.
//!
//! Phase one fits the generator alone under voxelwise L1. Phase two starts
//! from a saved generator and alternates critic and generator updates on the
//! warmup/ratio/burst schedule, with the gradient-penalty objective.
//!
//! One epoch samples `patch.per_subject` patches from every training
//! subject; iterations are the primary unit and epochs are derived from
//! them. Validation runs every `val.cadence` steps and at the final step:
//! full-volume tiled-inference MSE in phase one, the critic's EM estimate
//! over a fixed validation patch set in phase two. The best-so-far
//! checkpoint (lowest MSE, highest EM) and the latest checkpoint are kept.
//! A non-finite loss aborts the run after writing a diagnostic dump.

use crate::adversary::{composite_generator_loss, wgan_gp_terms, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{
    restore_generator, rng_state_json, snapshot_discriminator, snapshot_generator, Checkpoint,
};
use crate::harness::config::{Phase, TrainPlan};
use crate::harness::dataset::{load_split, DatasetManifest, Split, SubjectData};
use crate::harness::events::{EventKind, EventLog};
use crate::harness::infer::{super_resolve, InferOptions};
use crate::harness::schedule::{GanSchedule, StepKind};
use crate::model::GeneratorNet;
use crate::nn::{BnMode, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::patchwork::{extract_block, sample_patch_offsets, PatchSpec};
use crate::tensor::{no_grad, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};

const SALT_OFFSETS: u64 = 0x9E37_79B9_7F4A_7C15;
const SALT_SHUFFLE: u64 = 0xBF58_476D_1CE4_E5B9;
const SALT_EPS: u64 = 0x94D0_49BB_1331_11EB;
const SALT_DISC: u64 = 0xD6E8_FEB8_6659_FD93;
const SALT_VAL: u64 = 0xA076_1D64_78BD_642F;

/// Deterministic seed derivation by splitmix-style folding.
fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub epochs_started: u64,
    pub best_val: Option<f64>,
    pub final_val: Option<f64>,
    pub events_path: PathBuf,
    pub best_ckpt: PathBuf,
    pub latest_ckpt: PathBuf,
    pub d_ckpt: Option<PathBuf>,
}

/// Endless deterministic stream of (subject, offset) training picks. Each
/// refill is one epoch: `per_subject` offsets from every subject, shuffled.
struct PatchStream<'a> {
    subjects: &'a [SubjectData],
    spec: PatchSpec,
    seed: u64,
    epochs_started: u64,
    queue: VecDeque<(usize, [usize; 3])>,
}

impl<'a> PatchStream<'a> {
    fn new(subjects: &'a [SubjectData], spec: PatchSpec, seed: u64) -> Self {
        PatchStream {
            subjects,
            spec,
            seed,
            epochs_started: 0,
            queue: VecDeque::new(),
        }
    }

    fn refill(&mut self) -> Result<()> {
        let epoch = self.epochs_started;
        let mut pool = Vec::new();
        for (si, s) in self.subjects.iter().enumerate() {
            let offs = sample_patch_offsets(
                s.hr.shape(),
                &self.spec,
                mix(&[self.seed, SALT_OFFSETS, epoch, si as u64]),
            )?;
            pool.extend(offs.into_iter().map(|o| (si, o)));
        }
        if pool.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, SALT_SHUFFLE, epoch]));
        pool.shuffle(&mut rng);
        self.queue.extend(pool);
        self.epochs_started += 1;
        log::debug!("epoch {} pool refilled ({} picks)", epoch + 1, self.queue.len());
        Ok(())
    }

    fn next_batch(&mut self, n: usize) -> Result<Vec<(usize, [usize; 3])>> {
        while self.queue.len() < n {
            self.refill()?;
        }
        Ok((0..n).map(|_| self.queue.pop_front().unwrap()).collect())
    }
}

/// Stacks aligned LR/HR patches into [B,1,D,H,W] single-precision inputs.
fn gather_batch(
    subjects: &[SubjectData],
    picks: &[(usize, [usize; 3])],
    size: [usize; 3],
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let vol: usize = size.iter().product();
    let mut lr = Vec::with_capacity(picks.len() * vol);
    let mut hr = Vec::with_capacity(picks.len() * vol);
    for &(si, off) in picks {
        let s = &subjects[si];
        let lrb = extract_block(&s.lr, off, size)?;
        let hrb = extract_block(&s.hr, off, size)?;
        lr.extend(lrb.data.iter().map(|&v| v as f32));
        hr.extend(hrb.data.iter().map(|&v| v as f32));
    }
    let shape = [picks.len(), 1, size[0], size[1], size[2]];
    Ok((
        Tensor::from_vec(lr, &shape)?,
        Tensor::from_vec(hr, &shape)?,
    ))
}

/// Mean over validation subjects of full-volume MSE between tiled SR output
/// and the reference. `None` when the split is empty.
fn validate_mse(
    net: &GeneratorNet<f32>,
    val: &[SubjectData],
    opts: &InferOptions,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for s in val {
        let sr = super_resolve(net, &s.lr, opts)?.sr;
        let mse: f64 = sr
            .data
            .iter()
            .zip(&s.hr.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / sr.data.len() as f64;
        total += mse;
    }
    Ok(Some(total / val.len() as f64))
}

/// Fixed validation patch batch for the adversarial phase.
struct ValPatches {
    real: Tensor<f32>,
    lr: Tensor<f32>,
}

fn build_val_patches(val: &[SubjectData], plan: &TrainPlan) -> Result<Option<ValPatches>> {
    if val.is_empty() || plan.val_patches_per_subject == 0 {
        return Ok(None);
    }
    let spec = PatchSpec::new(plan.patch.size, plan.patch.margin, plan.val_patches_per_subject)?;
    let mut picks = Vec::new();
    for (si, s) in val.iter().enumerate() {
        let offs = sample_patch_offsets(
            s.hr.shape(),
            &spec,
            mix(&[plan.seed, SALT_VAL, si as u64]),
        )?;
        picks.extend(offs.into_iter().map(|o| (si, o)));
    }
    let (lr, real) = gather_batch(val, &picks, plan.patch.size)?;
    Ok(Some(ValPatches { real, lr }))
}

/// Critic's Earth Mover estimate over the fixed validation patches.
fn validate_em(
    d: &Discriminator<f32>,
    g: &GeneratorNet<f32>,
    vp: &ValPatches,
) -> Result<f64> {
    no_grad(|| -> Result<f64> {
        let fake = g.forward(&vp.lr, BnMode::Train)?;
        let dr = d.forward(&vp.real)?.mean_all().value_f64();
        let df = d.forward(&fake)?.mean_all().value_f64();
        Ok(dr - df)
    })
}

/// Writes per-parameter norm statistics next to the checkpoints so a NaN
/// abort leaves something to debug from.
fn diagnostic_dump(
    out_dir: &Path,
    phase: Phase,
    step: u64,
    reason: &str,
    sets: &[(&str, &ParamSet<f32>)],
) -> PathBuf {
    let mut nets = Map::new();
    for (name, params) in sets {
        let rows: Vec<Value> = params
            .iter()
            .map(|p| {
                let data = p.tensor.to_vec();
                let l2 = data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                let max = data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
                let grad = p.tensor.grad().map(|gt| {
                    let gv = gt.to_vec();
                    gv.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
                });
                serde_json::json!({
                    "name": p.name,
                    "data_l2": format!("{:e}", l2),
                    "data_max_abs": format!("{:e}", max),
                    "grad_l2": grad.map(|v| format!("{:e}", v)),
                })
            })
            .collect();
        nets.insert((*name).to_string(), Value::Array(rows));
    }
    let doc = serde_json::json!({
        "phase": phase.name(),
        "step": step,
        "reason": reason,
        "parameters": nets,
    });
    let path = out_dir.join("diagnostic_dump.json");
    let _ = std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap_or_default());
    path
}

fn ckpt_meta(plan: &TrainPlan, rng: &ChaCha8Rng, epochs: u64, val: Option<f64>) -> Map<String, Value> {
    let mut meta = Map::new();
    meta.insert("phase".into(), Value::from(plan.phase.name()));
    meta.insert("epochs_started".into(), Value::from(epochs));
    meta.insert("rng".into(), rng_state_json(rng));
    if let Some(v) = val {
        meta.insert("val_score".into(), Value::from(v));
    }
    meta
}

pub fn train(plan: &TrainPlan, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    plan.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io_msg(format!("create {}: {}", out_dir.display(), e)))?;
    let train_subjects = load_split(manifest, Split::Train)?;
    if train_subjects.is_empty() {
        return Err(Error::config("manifest has no training subjects"));
    }
    let val_subjects = load_split(manifest, Split::Validation)?;
    log::info!(
        "training on {} subjects, validating on {}, {} steps of batch {}",
        train_subjects.len(),
        val_subjects.len(),
        plan.steps,
        plan.batch
    );

    let mut init_rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let generator = match &plan.init_generator {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let net = restore_generator::<f32>(&ckpt)?;
            if net.cfg.name() != plan.generator.name() {
                log::warn!(
                    "plan asks for {} but checkpoint holds {}; using the checkpoint's network",
                    plan.generator.name(),
                    net.cfg.name()
                );
            }
            net
        }
        None => GeneratorNet::build(&plan.generator, &mut init_rng)?,
    };

    match plan.phase {
        Phase::L1 => train_l1(plan, generator, &train_subjects, &val_subjects, out_dir, init_rng),
        Phase::Gan => train_gan(plan, generator, &train_subjects, &val_subjects, out_dir, init_rng),
    }
}

fn train_l1(
    plan: &TrainPlan,
    g: GeneratorNet<f32>,
    train_subjects: &[SubjectData],
    val_subjects: &[SubjectData],
    out_dir: &Path,
    meta_rng: ChaCha8Rng,
) -> Result<TrainOutcome> {
    let mut events = EventLog::create(out_dir.join("events.jsonl"))?;
    let mut opt = Adam::new(&g.params, AdamConfig::with_lr(plan.lr));
    let mut stream = PatchStream::new(train_subjects, plan.patch, plan.seed);
    let infer_opts = InferOptions {
        patch: plan.val_patch,
        margin: plan.val_margin,
        bn_mode: plan.val_bn_mode,
    };
    let best_ckpt = out_dir.join("best.ckpt");
    let latest_ckpt = out_dir.join("latest.ckpt");
    let mut best: Option<f64> = None;
    let mut final_val: Option<f64> = None;

    for step in 1..=plan.steps {
        let picks = stream.next_batch(plan.batch)?;
        let (lr_t, hr_t) = gather_batch(train_subjects, &picks, plan.patch.size)?;
        g.params.zero_grads();
        let sr = g.forward(&lr_t, BnMode::Train)?;
        let loss = sr.sub(&hr_t)?.abs().mean_all();
        let lv = loss.value_f64();
        if !lv.is_finite() {
            let dump = diagnostic_dump(out_dir, plan.phase, step, "non-finite l1 loss", &[("generator", &g.params)]);
            return Err(Error::TrainingIntegrity(format!(
                "non-finite l1 loss at step {}; diagnostics at {}",
                step,
                dump.display()
            )));
        }
        loss.backward()?;
        opt.step(&g.params)?;
        events.record(step, EventKind::GStep, lv)?;

        if step % plan.val_cadence == 0 || step == plan.steps {
            let score = validate_mse(&g, val_subjects, &infer_opts)?;
            if let Some(mse) = score {
                events.record(step, EventKind::Val, mse)?;
                final_val = Some(mse);
                if best.map_or(true, |b| mse < b) {
                    best = Some(mse);
                    snapshot_generator(&g, Some(&opt), step, ckpt_meta(plan, &meta_rng, stream.epochs_started, score))
                        .save(&best_ckpt)?;
                    events.record(step, EventKind::CkptBest, mse)?;
                }
            }
            snapshot_generator(&g, Some(&opt), step, ckpt_meta(plan, &meta_rng, stream.epochs_started, score))
                .save(&latest_ckpt)?;
            events.record(step, EventKind::CkptLatest, score.unwrap_or(lv))?;
            events.flush()?;
        }
    }
    events.flush()?;
    Ok(TrainOutcome {
        steps_run: plan.steps,
        epochs_started: stream.epochs_started,
        best_val: best,
        final_val,
        events_path: events.path().to_path_buf(),
        best_ckpt,
        latest_ckpt,
        d_ckpt: None,
    })
}

fn train_gan(
    plan: &TrainPlan,
    g: GeneratorNet<f32>,
    train_subjects: &[SubjectData],
    val_subjects: &[SubjectData],
    out_dir: &Path,
    meta_rng: ChaCha8Rng,
) -> Result<TrainOutcome> {
    let mut events = EventLog::create(out_dir.join("events.jsonl"))?;
    let d_cfg = DiscriminatorConfig {
        base_width: plan.d_base_width,
        stages: plan.d_stages,
        head_width: plan.d_head_width,
        input_size: plan.patch.size,
        in_channels: 1,
        allow_truncation: plan.d_allow_truncation,
    };
    let mut d_rng = ChaCha8Rng::seed_from_u64(mix(&[plan.seed, SALT_DISC]));
    let d = Discriminator::<f32>::build(&d_cfg, &mut d_rng)?;
    let mut opt_g = Adam::new(&g.params, AdamConfig::with_lr(plan.lr));
    let mut opt_d = Adam::new(&d.params, AdamConfig::with_lr(plan.d_lr));
    let mut eps_rng = ChaCha8Rng::seed_from_u64(mix(&[plan.seed, SALT_EPS]));
    let mut schedule = GanSchedule::new(plan.warmup, plan.ratio, plan.burst_steps, plan.burst_every);
    let mut stream = PatchStream::new(train_subjects, plan.patch, plan.seed);
    let val_patches = build_val_patches(val_subjects, plan)?;
    let best_ckpt = out_dir.join("best.ckpt");
    let latest_ckpt = out_dir.join("latest.ckpt");
    let d_ckpt = out_dir.join("d_latest.ckpt");
    let mut best: Option<f64> = None;
    let mut final_val: Option<f64> = None;

    for step in 1..=plan.steps {
        let picks = stream.next_batch(plan.batch)?;
        let (lr_t, hr_t) = gather_batch(train_subjects, &picks, plan.patch.size)?;
        match schedule.next() {
            StepKind::D => {
                let fake = no_grad(|| g.forward(&lr_t, BnMode::Train))?;
                let terms = wgan_gp_terms(|x| d.forward(x), &hr_t, &fake, plan.lambda_gp, &mut eps_rng)?;
                let dv = terms.d_loss.value_f64();
                if !dv.is_finite() || !terms.em_estimate.is_finite() {
                    let dump = diagnostic_dump(
                        out_dir,
                        plan.phase,
                        step,
                        "non-finite critic loss",
                        &[("generator", &g.params), ("discriminator", &d.params)],
                    );
                    return Err(Error::TrainingIntegrity(format!(
                        "non-finite critic loss at step {}; diagnostics at {}",
                        step,
                        dump.display()
                    )));
                }
                d.params.zero_grads();
                terms.d_loss.backward()?;
                opt_d.step(&d.params)?;
                events.record(step, EventKind::DStep, dv)?;
            }
            StepKind::G => {
                let sr = g.forward(&lr_t, BnMode::Train)?;
                let g_adv = d.forward(&sr)?.mean_all().neg();
                let loss = composite_generator_loss(&sr, &hr_t, &g_adv, plan.lambda_adv)?;
                let lv = loss.value_f64();
                if !lv.is_finite() {
                    let dump = diagnostic_dump(
                        out_dir,
                        plan.phase,
                        step,
                        "non-finite generator loss",
                        &[("generator", &g.params), ("discriminator", &d.params)],
                    );
                    return Err(Error::TrainingIntegrity(format!(
                        "non-finite generator loss at step {}; diagnostics at {}",
                        step,
                        dump.display()
                    )));
                }
                g.params.zero_grads();
                d.params.zero_grads();
                loss.backward()?;
                opt_g.step(&g.params)?;
                events.record(step, EventKind::GStep, lv)?;
            }
        }

        if step % plan.val_cadence == 0 || step == plan.steps {
            let mut score = None;
            if let Some(vp) = &val_patches {
                let em = validate_em(&d, &g, vp)?;
                events.record(step, EventKind::Val, em)?;
                score = Some(em);
                final_val = Some(em);
                if best.map_or(true, |b| em > b) {
                    best = Some(em);
                    snapshot_generator(&g, Some(&opt_g), step, ckpt_meta(plan, &meta_rng, stream.epochs_started, score))
                        .save(&best_ckpt)?;
                    events.record(step, EventKind::CkptBest, em)?;
                }
            }
            snapshot_generator(&g, Some(&opt_g), step, ckpt_meta(plan, &meta_rng, stream.epochs_started, score))
                .save(&latest_ckpt)?;
            events.record(step, EventKind::CkptLatest, score.unwrap_or(0.0))?;
            events.flush()?;
        }
    }
    snapshot_discriminator(&d, Some(&opt_d), plan.steps, ckpt_meta(plan, &meta_rng, stream.epochs_started, final_val))
        .save(&d_ckpt)?;
    events.flush()?;
    Ok(TrainOutcome {
        steps_run: plan.steps,
        epochs_started: stream.epochs_started,
        best_val: best,
        final_val,
        events_path: events.path().to_path_buf(),
        best_ckpt,
        latest_ckpt,
        d_ckpt: Some(d_ckpt),
    })
}
