//! Flat key-value run configuration and the training plan built from it.
//!
//! One `key = value` assignment per line; `#` starts a comment and blank
//! lines are skipped. Keys are namespaced with dots and drawn from a fixed
//! vocabulary so a typo fails loudly instead of silently keeping a default.
//! Command-line flags are applied on top of the file through [`ConfigMap::set`].

use crate::error::{Error, Result};
use crate::model::GeneratorConfig;
use crate::nn::BnMode;
use crate::patchwork::PatchSpec;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Every key any subcommand understands.
pub const KNOWN_KEYS: &[&str] = &[
    "phase",
    "model.config",
    "d.base_width",
    "d.stages",
    "d.head_width",
    "d.allow_truncation",
    "train.lr",
    "train.d_lr",
    "train.batch",
    "train.steps",
    "train.seed",
    "train.init_generator",
    "gan.lambda",
    "gan.lambda_gp",
    "gan.warmup",
    "gan.ratio",
    "gan.burst_steps",
    "gan.burst_every",
    "patch.size",
    "patch.margin",
    "patch.per_subject",
    "val.cadence",
    "val.patches_per_subject",
    "val.patch",
    "val.margin",
    "val.bn_mode",
    "infer.patch",
    "infer.margin",
    "infer.bn_mode",
    "degrade.factors",
    "degrade.dtype",
    "eval.plane",
    "phantom.count",
    "phantom.shape",
    "phantom.seed",
    "phantom.splits",
];

/// Parsed assignments, insertion-order independent.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::empty();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!(
                    "config line {}: expected `key = value`, got {:?}",
                    lineno + 1,
                    raw
                ))
            })?;
            map.set(key.trim(), value.trim())?;
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::io_msg(format!("read config {}: {}", path.as_ref().display(), e))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Parse(format!("unknown config key {:?}", key)));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Parse(format!("config key {}: {:?} is not {}", key, raw, what))
            }),
        }
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parsed(key, "a number")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parsed(key, "a non-negative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some("true") | Some("1") | Some("yes") => Ok(Some(true)),
            Some("false") | Some("0") | Some("no") => Ok(Some(false)),
            Some(raw) => Err(Error::Parse(format!(
                "config key {}: {:?} is not a boolean",
                key, raw
            ))),
        }
    }

    /// Axis triple given as one integer for a cube or three separated by
    /// `,` or `x`.
    pub fn get_triple(&self, key: &str) -> Result<Option<[usize; 3]>> {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        parse_triple(raw)
            .map(Some)
            .map_err(|e| Error::Parse(format!("config key {}: {}", key, e)))
    }
}

/// Parses "n" into [n,n,n] and "a,b,c" or "axbxc" into [a,b,c].
pub fn parse_triple(raw: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = raw
        .split(|c| c == ',' || c == 'x')
        .map(str::trim)
        .collect();
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format!("{:?} is not an axis length", s))
    };
    match parts.as_slice() {
        [one] => {
            let n = parse(one)?;
            Ok([n, n, n])
        }
        [a, b, c] => Ok([parse(a)?, parse(b)?, parse(c)?]),
        _ => Err(format!("{:?} is neither one length nor three", raw)),
    }
}

pub fn parse_bn_mode(raw: &str) -> Result<BnMode> {
    match raw {
        "train" => Ok(BnMode::Train),
        "eval" => Ok(BnMode::Eval),
        other => Err(Error::Parse(format!(
            "bn mode must be `train` or `eval`, got {:?}",
            other
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    L1,
    Gan,
}

impl Phase {
    pub fn parse(raw: &str) -> Result<Self> {
        match raw {
            "l1" => Ok(Phase::L1),
            "gan" => Ok(Phase::Gan),
            other => Err(Error::Parse(format!(
                "phase must be `l1` or `gan`, got {:?}",
                other
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::L1 => "l1",
            Phase::Gan => "gan",
        }
    }
}

/// Resolved settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub phase: Phase,
    pub generator: GeneratorConfig,
    pub d_base_width: usize,
    pub d_stages: usize,
    pub d_head_width: usize,
    pub d_allow_truncation: bool,
    pub lr: f64,
    pub d_lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub init_generator: Option<PathBuf>,
    pub lambda_adv: f64,
    pub lambda_gp: f64,
    pub warmup: u64,
    pub ratio: u64,
    pub burst_steps: u64,
    pub burst_every: u64,
    pub patch: PatchSpec,
    pub val_cadence: u64,
    pub val_patches_per_subject: usize,
    pub val_patch: [usize; 3],
    pub val_margin: usize,
    pub val_bn_mode: BnMode,
}

impl TrainPlan {
    /// Builds a plan from config entries, filling documented defaults.
    /// `train.steps` is the one mandatory key.
    pub fn from_config(cfg: &ConfigMap) -> Result<Self> {
        let phase = Phase::parse(cfg.get("phase").unwrap_or("l1"))?;
        let generator = GeneratorConfig::parse(cfg.get("model.config").unwrap_or("b4u4k12"))?;
        let default_lr = match phase {
            Phase::L1 => 1e-4,
            Phase::Gan => 5e-6,
        };
        let lr = cfg.get_f64("train.lr")?.unwrap_or(default_lr);
        let d_lr = cfg.get_f64("train.d_lr")?.unwrap_or(lr);
        let steps = cfg
            .get_u64("train.steps")?
            .ok_or_else(|| Error::config("train.steps is required"))?;
        let patch = PatchSpec::new(
            cfg.get_triple("patch.size")?.unwrap_or([32, 32, 32]),
            cfg.get_usize("patch.margin")?.unwrap_or(3),
            cfg.get_usize("patch.per_subject")?.unwrap_or(18),
        )?;
        let plan = TrainPlan {
            phase,
            generator,
            d_base_width: cfg.get_usize("d.base_width")?.unwrap_or(64),
            d_stages: cfg.get_usize("d.stages")?.unwrap_or(8),
            d_head_width: cfg.get_usize("d.head_width")?.unwrap_or(1024),
            d_allow_truncation: cfg.get_bool("d.allow_truncation")?.unwrap_or(false),
            lr,
            d_lr,
            batch: cfg.get_usize("train.batch")?.unwrap_or(6),
            steps,
            seed: cfg.get_u64("train.seed")?.unwrap_or(0),
            init_generator: cfg.get("train.init_generator").map(PathBuf::from),
            lambda_adv: cfg.get_f64("gan.lambda")?.unwrap_or(0.1),
            lambda_gp: cfg.get_f64("gan.lambda_gp")?.unwrap_or(10.0),
            warmup: cfg.get_u64("gan.warmup")?.unwrap_or(10_000),
            ratio: cfg.get_u64("gan.ratio")?.unwrap_or(5),
            burst_steps: cfg.get_u64("gan.burst_steps")?.unwrap_or(200),
            burst_every: cfg.get_u64("gan.burst_every")?.unwrap_or(500),
            patch,
            val_cadence: cfg.get_u64("val.cadence")?.unwrap_or(200),
            val_patches_per_subject: cfg.get_usize("val.patches_per_subject")?.unwrap_or(4),
            val_patch: cfg.get_triple("val.patch")?.unwrap_or([70, 70, 70]),
            val_margin: cfg.get_usize("val.margin")?.unwrap_or(3),
            val_bn_mode: parse_bn_mode(cfg.get("val.bn_mode").unwrap_or("train"))?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch must be positive"));
        }
        if self.lr <= 0.0 || self.d_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.phase == Phase::Gan {
            if self.init_generator.is_none() {
                return Err(Error::config(
                    "gan phase requires train.init_generator pointing at a generator checkpoint",
                ));
            }
            if self.lambda_adv < 0.0 || self.lambda_gp < 0.0 {
                return Err(Error::config("gan.lambda and gan.lambda_gp must be non-negative"));
            }
            if self.ratio == 0 {
                return Err(Error::config("gan.ratio must be positive"));
            }
        }
        if self.val_cadence == 0 {
            return Err(Error::config("val.cadence must be positive"));
        }
        Ok(())
    }
}
