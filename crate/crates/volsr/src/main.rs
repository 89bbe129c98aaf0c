//! Command-line front end over the library: degradation, training, tiled
//! inference, evaluation, parameter counting and phantom dataset generation.
//!
//! Every subcommand optionally reads a `key = value` config file; explicit
//! flags override file values. The `examples/` directory exercises the same
//! library calls directly.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use volsr::degrade::{degrade, DegradeSpec};
use volsr::harness::checkpoint::{restore_generator, Checkpoint};
use volsr::harness::config::{parse_bn_mode, parse_triple, ConfigMap, TrainPlan};
use volsr::harness::dataset::{default_split_counts, generate_phantom_dataset, DatasetManifest};
use volsr::harness::infer::{super_resolve, InferOptions};
use volsr::harness::trainer::train;
use volsr::metrics::{
    degraded_plane, dice, jaccard, nrmse_slicewise, psnr_slicewise, ssim_slicewise, EvalReport,
    LabelMap, SubjectScores,
};
use volsr::model::{count_params, describe, GeneratorConfig, ReconVariant};
use volsr::tensor::Dtype;
use volsr::volume::Volume;

#[derive(Parser)]
#[command(name = "volsr", version, about = "Volumetric single-image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Extra overrides as key=value, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<ConfigMap> {
        let mut cfg = match &self.config {
            Some(p) => ConfigMap::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ConfigMap::empty(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {:?} is not key=value", kv))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the low-resolution acquisition for a volume file.
    Degrade {
        #[arg(long = "in", value_name = "VOL")]
        input: PathBuf,
        #[arg(long, value_name = "VOL")]
        out: PathBuf,
        /// Per-axis k-space truncation factors, e.g. 2,2,1. Defaults to 2
        /// along each phase-encoded axis of the input.
        #[arg(long)]
        factors: Option<String>,
        /// Output scalar width: f32 or f64.
        #[arg(long)]
        dtype: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Run one training phase from a plan file and a dataset manifest.
    Train {
        #[arg(long, value_name = "PLAN")]
        config: PathBuf,
        #[arg(long, value_name = "MANIFEST")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Generator checkpoint to start from (required for the gan phase).
        #[arg(long, value_name = "CKPT")]
        init_generator: Option<PathBuf>,
        /// Extra overrides as key=value, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Super-resolve a volume with a trained generator checkpoint.
    Infer {
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long = "in", value_name = "VOL")]
        input: PathBuf,
        #[arg(long, value_name = "VOL")]
        out: PathBuf,
        /// Tile size, e.g. 70 or 70,70,70.
        #[arg(long)]
        patch: Option<String>,
        /// Overlap trimmed from each tile face.
        #[arg(long)]
        margin: Option<usize>,
        /// Batch-norm statistics source: train or eval.
        #[arg(long)]
        bn_mode: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Score a test volume against a reference.
    Eval {
        #[arg(long = "ref", value_name = "VOL")]
        reference: PathBuf,
        #[arg(long, value_name = "VOL")]
        test: PathBuf,
        /// Slice plane for the slicewise metrics: HW, DW or DH. Defaults to
        /// the plane spanned by the reference's phase-encoded axes.
        #[arg(long)]
        plane: Option<String>,
        /// Two label map files (reference, test) for Dice/Jaccard.
        #[arg(long, num_args = 2, value_names = ["REF_MAP", "TEST_MAP"])]
        labels: Option<Vec<PathBuf>>,
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Print the layer table and parameter count for a generator config.
    Params {
        /// Generator config name, e.g. b4u4k12 or b4u4-r.
        #[arg(long, value_name = "NAME")]
        config: String,
        /// Override the reconstruction variant: direct or r.
        #[arg(long)]
        recon: Option<String>,
    },
    /// Generate a deterministic synthetic dataset with a split manifest.
    MakePhantoms {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Volume shape, e.g. 64 or 64,64,64.
        #[arg(long)]
        shape: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Subject counts per split as train,val,eval,test.
        #[arg(long)]
        splits: Option<String>,
        #[command(flatten)]
        common: ConfigArgs,
    },
}

fn parse_dtype(raw: &str) -> Result<Dtype> {
    match raw {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => bail!("unknown dtype {:?}, expected f32 or f64", other),
    }
}

fn parse_plane(raw: &str) -> Result<[usize; 2]> {
    match raw.to_ascii_uppercase().as_str() {
        "HW" => Ok([1, 2]),
        "DW" => Ok([0, 2]),
        "DH" => Ok([0, 1]),
        other => bail!("unknown plane {:?}, expected HW, DW or DH", other),
    }
}

fn triple(raw: &str) -> Result<[usize; 3]> {
    parse_triple(raw).map_err(anyhow::Error::msg)
}

fn run_degrade(
    input: &PathBuf,
    out: &PathBuf,
    factors: Option<&str>,
    dtype: Option<&str>,
    cfg: &ConfigMap,
) -> Result<()> {
    let hr = Volume::read(input).with_context(|| format!("reading {}", input.display()))?;
    let spec = match factors.map(str::to_owned).or_else(|| cfg.get("degrade.factors").map(str::to_owned)) {
        Some(raw) => DegradeSpec::new(triple(&raw)?)?,
        None => DegradeSpec::for_volume(&hr),
    };
    let dtype = match dtype.map(str::to_owned).or_else(|| cfg.get("degrade.dtype").map(str::to_owned)) {
        Some(raw) => parse_dtype(&raw)?,
        None => Dtype::F64,
    };
    let lr = degrade(&hr, &spec)?;
    lr.write(out, dtype)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "degraded {} -> {} with factors {:?}",
        input.display(),
        out.display(),
        spec.factors
    );
    Ok(())
}

fn run_train(
    config: &PathBuf,
    manifest_path: &PathBuf,
    out: &PathBuf,
    init_generator: Option<&PathBuf>,
    set: &[String],
) -> Result<()> {
    let mut cfg = ConfigMap::load(config).with_context(|| format!("loading {}", config.display()))?;
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {:?} is not key=value", kv))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(p) = init_generator {
        cfg.set("train.init_generator", p.to_string_lossy())?;
    }
    let plan = TrainPlan::from_config(&cfg)?;
    let manifest = DatasetManifest::load(manifest_path)
        .with_context(|| format!("loading {}", manifest_path.display()))?;
    let outcome = train(&plan, &manifest, out)?;
    println!(
        "ran {} steps ({} epochs started), events at {}",
        outcome.steps_run,
        outcome.epochs_started,
        outcome.events_path.display()
    );
    match outcome.best_val {
        Some(v) => println!("best validation score {:.6} at {}", v, outcome.best_ckpt.display()),
        None => println!("no validation split; best checkpoint not written"),
    }
    println!("latest checkpoint at {}", outcome.latest_ckpt.display());
    if let Some(d) = &outcome.d_ckpt {
        println!("critic checkpoint at {}", d.display());
    }
    Ok(())
}

fn run_infer(
    ckpt_path: &PathBuf,
    input: &PathBuf,
    out: &PathBuf,
    patch: Option<&str>,
    margin: Option<usize>,
    bn_mode: Option<&str>,
    cfg: &ConfigMap,
) -> Result<()> {
    let defaults = InferOptions::default();
    let patch = match patch.map(str::to_owned).or_else(|| cfg.get("infer.patch").map(str::to_owned)) {
        Some(raw) => triple(&raw)?,
        None => defaults.patch,
    };
    let margin = match margin {
        Some(m) => m,
        None => cfg.get_usize("infer.margin")?.unwrap_or(defaults.margin),
    };
    let bn_mode = match bn_mode.map(str::to_owned).or_else(|| cfg.get("infer.bn_mode").map(str::to_owned)) {
        Some(raw) => parse_bn_mode(&raw)?,
        None => defaults.bn_mode,
    };
    let ckpt = Checkpoint::load(ckpt_path)?;
    let net = restore_generator::<f32>(&ckpt)?;
    let lr = Volume::read(input).with_context(|| format!("reading {}", input.display()))?;
    let result = super_resolve(&net, &lr, &InferOptions { patch, margin, bn_mode })?;
    result
        .sr
        .write(out, Dtype::F64)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "super-resolved {} -> {} ({} config, {} params)",
        input.display(),
        out.display(),
        net.cfg.name(),
        net.params.total_elements()
    );
    println!("tiles {} wall_time_s {:.3}", result.tiles, result.wall_seconds);
    Ok(())
}

fn run_eval(
    reference: &PathBuf,
    test: &PathBuf,
    plane: Option<&str>,
    labels: Option<&[PathBuf]>,
    cfg: &ConfigMap,
) -> Result<()> {
    let hr = Volume::read(reference).with_context(|| format!("reading {}", reference.display()))?;
    let sr = Volume::read(test).with_context(|| format!("reading {}", test.display()))?;
    let plane = match plane.map(str::to_owned).or_else(|| cfg.get("eval.plane").map(str::to_owned)) {
        Some(raw) => parse_plane(&raw)?,
        None => degraded_plane(&hr),
    };
    let id = test
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "test".to_string());
    let report = EvalReport {
        subjects: vec![SubjectScores {
            id,
            psnr: psnr_slicewise(&sr, &hr, plane)?,
            ssim: ssim_slicewise(&sr, &hr, plane)?,
            nrmse: nrmse_slicewise(&sr, &hr, plane)?,
        }],
        param_count: None,
        wall_time_s: None,
    };
    print!("{}", report.render());
    if let Some(paths) = labels {
        let a = LabelMap::read(&paths[0])?;
        let b = LabelMap::read(&paths[1])?;
        println!("# segmentation agreement per label");
        for &l in &a.vocabulary {
            println!(
                "label {} dice {:.6} jaccard {:.6}",
                l,
                dice(&a, &b, l)?,
                jaccard(&a, &b, l)?
            );
        }
    }
    Ok(())
}

fn run_params(config: &str, recon: Option<&str>) -> Result<()> {
    let mut cfg = GeneratorConfig::parse(config)?;
    if let Some(raw) = recon {
        cfg = match raw {
            "direct" => GeneratorConfig::new(cfg.blocks, cfg.units, cfg.growth, ReconVariant::Direct)?,
            "r" => GeneratorConfig::new(cfg.blocks, cfg.units, cfg.growth, ReconVariant::BottleneckR)?,
            other => bail!("unknown recon variant {:?}, expected direct or r", other),
        };
    }
    let report = describe(&cfg)?;
    print!("{}", report.render());
    println!("total parameters {}", count_params(&cfg)?);
    Ok(())
}

fn run_make_phantoms(
    out: &PathBuf,
    count: Option<usize>,
    shape: Option<&str>,
    seed: Option<u64>,
    splits: Option<&str>,
    cfg: &ConfigMap,
) -> Result<()> {
    let count = match count {
        Some(c) => c,
        None => cfg
            .get_usize("phantom.count")?
            .context("--count (or phantom.count) is required")?,
    };
    let shape = match shape.map(str::to_owned).or_else(|| cfg.get("phantom.shape").map(str::to_owned)) {
        Some(raw) => triple(&raw)?,
        None => [64, 64, 64],
    };
    let seed = match seed {
        Some(s) => s,
        None => cfg.get_u64("phantom.seed")?.unwrap_or(0),
    };
    let counts = match splits.map(str::to_owned).or_else(|| cfg.get("phantom.splits").map(str::to_owned)) {
        Some(raw) => {
            let parts: Vec<usize> = raw
                .split(',')
                .map(|t| t.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("bad splits {:?}, expected train,val,eval,test", raw))?;
            if parts.len() != 4 {
                bail!("--splits needs 4 counts, got {}", parts.len());
            }
            if parts.iter().sum::<usize>() != count {
                bail!(
                    "split counts {:?} sum to {}, but count is {}",
                    parts,
                    parts.iter().sum::<usize>(),
                    count
                );
            }
            [parts[0], parts[1], parts[2], parts[3]]
        }
        None => default_split_counts(count),
    };
    let manifest = generate_phantom_dataset(out, shape, seed, counts)?;
    println!(
        "wrote {} phantoms of shape {:?} under {} (splits {:?})",
        count,
        shape,
        out.display(),
        counts
    );
    println!("manifest at {}", manifest.display());
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Degrade { input, out, factors, dtype, common } => {
            let cfg = common.build()?;
            run_degrade(&input, &out, factors.as_deref(), dtype.as_deref(), &cfg)
        }
        Command::Train { config, manifest, out, init_generator, set } => {
            run_train(&config, &manifest, &out, init_generator.as_ref(), &set)
        }
        Command::Infer { ckpt, input, out, patch, margin, bn_mode, common } => {
            let cfg = common.build()?;
            run_infer(&ckpt, &input, &out, patch.as_deref(), margin, bn_mode.as_deref(), &cfg)
        }
        Command::Eval { reference, test, plane, labels, common } => {
            let cfg = common.build()?;
            run_eval(&reference, &test, plane.as_deref(), labels.as_deref(), &cfg)
        }
        Command::Params { config, recon } => run_params(&config, recon.as_deref()),
        Command::MakePhantoms { out, count, shape, seed, splits, common } => {
            let cfg = common.build()?;
            run_make_phantoms(&out, count, shape.as_deref(), seed, splits.as_deref(), &cfg)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
