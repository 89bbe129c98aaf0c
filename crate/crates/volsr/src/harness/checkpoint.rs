//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `VSRCKPT1`, a little-endian u64 metadata length,
//! a UTF-8 JSON metadata document, then every blob's values as little-endian
//! f64 in metadata order. Values are widened to f64 on save and narrowed on
//! load, which round-trips f32 parameters bit-identically. Writes go through
//! a temporary file and an atomic rename so a failed write never clobbers
//! the previous checkpoint.

use crate::adversary::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::model::{GeneratorConfig, GeneratorNet};
use crate::nn::ParamSet;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Element;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"VSRCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CkptMeta {
    format_version: u32,
    kind: String,
    config: String,
    global_step: u64,
    meta: Map<String, Value>,
    blobs: Vec<BlobInfo>,
}

#[derive(Debug, Clone)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: String,
    pub global_step: u64,
    pub meta: Map<String, Value>,
    pub blobs: Vec<NamedBlob>,
}

impl Checkpoint {
    pub fn blob(&self, name: &str) -> Option<&NamedBlob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let meta = CkptMeta {
            format_version: CKPT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            global_step: self.global_step,
            meta: self.meta.clone(),
            blobs: self
                .blobs
                .iter()
                .map(|b| BlobInfo {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                })
                .collect(),
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .map_err(|e| Error::Format(format!("encode checkpoint metadata: {}", e)))?;
        let tmp = path.with_extension("tmp");
        let write_all = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(CKPT_MAGIC)?;
            f.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
            f.write_all(&meta_bytes)?;
            let mut buf = Vec::with_capacity(1 << 16);
            for b in &self.blobs {
                for &v in &b.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                    if buf.len() >= (1 << 16) {
                        f.write_all(&buf)?;
                        buf.clear();
                    }
                }
            }
            f.write_all(&buf)?;
            f.sync_all()?;
            Ok(())
        };
        if let Err(e) = write_all() {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::io_msg(format!(
                "write checkpoint {}: {}",
                path.display(),
                e
            )));
        }
        std::fs::rename(&tmp, path)
            .map_err(|e| Error::io_msg(format!("finalize checkpoint {}: {}", path.display(), e)))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::io_msg(format!("open checkpoint {}: {}", path.display(), e)))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("checkpoint {}: {}", path.display(), e)))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format(format!(
                "checkpoint {}: bad magic {:?}",
                path.display(),
                magic
            )));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)
            .map_err(|e| Error::Format(format!("checkpoint {}: {}", path.display(), e)))?;
        let meta_len = u64::from_le_bytes(len_bytes) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        f.read_exact(&mut meta_bytes)
            .map_err(|e| Error::Format(format!("checkpoint {}: {}", path.display(), e)))?;
        let meta: CkptMeta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {}", e)))?;
        if meta.format_version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} unsupported, expected {}",
                meta.format_version, CKPT_VERSION
            )));
        }
        let mut blobs = Vec::with_capacity(meta.blobs.len());
        for info in meta.blobs {
            let n: usize = info.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            f.read_exact(&mut raw).map_err(|e| {
                Error::Format(format!("checkpoint blob {}: {}", info.name, e))
            })?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blobs.push(NamedBlob {
                name: info.name,
                shape: info.shape,
                data,
            });
        }
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing).unwrap_or(0) != 0 {
            return Err(Error::Format(format!(
                "checkpoint {}: trailing bytes after payload",
                path.display()
            )));
        }
        Ok(Checkpoint {
            kind: meta.kind,
            config: meta.config,
            global_step: meta.global_step,
            meta: meta.meta,
            blobs,
        })
    }
}

/// Serializable position of a ChaCha stream, enough to reconstruct the
/// exact generator.
pub fn rng_state_json(rng: &ChaCha8Rng) -> Value {
    let seed_hex: String = rng.get_seed().iter().map(|b| format!("{:02x}", b)).collect();
    serde_json::json!({
        "seed": seed_hex,
        "word_pos": rng.get_word_pos().to_string(),
        "stream": rng.get_stream(),
    })
}

pub fn rng_from_state(v: &Value) -> Result<ChaCha8Rng> {
    let bad = |what: &str| Error::Format(format!("rng state: {}", what));
    let seed_hex = v
        .get("seed")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing seed"))?;
    if seed_hex.len() != 64 {
        return Err(bad("seed must be 32 hex bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks_exact(2).enumerate() {
        let s = std::str::from_utf8(chunk).map_err(|_| bad("seed is not hex"))?;
        seed[i] = u8::from_str_radix(s, 16).map_err(|_| bad("seed is not hex"))?;
    }
    let word_pos: u128 = v
        .get("word_pos")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing word_pos"))?
        .parse()
        .map_err(|_| bad("word_pos is not an integer"))?;
    let stream = v
        .get("stream")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("missing stream"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn param_blobs<E: Element>(params: &ParamSet<E>) -> Vec<NamedBlob> {
    params
        .iter()
        .map(|p| NamedBlob {
            name: format!("param/{}", p.name),
            shape: p.tensor.shape().to_vec(),
            data: p
                .tensor
                .to_vec()
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect(),
        })
        .collect()
}

fn adam_blobs<E: Element>(adam: &Adam<E>, params: &ParamSet<E>) -> Vec<NamedBlob> {
    adam.state_blobs(params)
        .into_iter()
        .map(|(name, data)| NamedBlob {
            shape: vec![data.len()],
            data: data.iter().map(|v| v.to_f64().unwrap()).collect(),
            name: format!("opt/{}", name),
        })
        .collect()
}

fn load_params<E: Element>(params: &ParamSet<E>, ckpt: &Checkpoint) -> Result<()> {
    for p in params.iter() {
        let name = format!("param/{}", p.name);
        let blob = ckpt
            .blob(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing {}", name)))?;
        if blob.shape != p.tensor.shape() {
            return Err(Error::Format(format!(
                "checkpoint blob {} has shape {:?}, model expects {:?}",
                name,
                blob.shape,
                p.tensor.shape()
            )));
        }
        p.tensor
            .set_data(blob.data.iter().map(|&v| E::from_f64(v).unwrap()).collect());
    }
    Ok(())
}

/// Rebuilds Adam moments from `opt/...` blobs; the checkpoint must contain
/// state for every parameter.
pub fn restore_adam<E: Element>(
    ckpt: &Checkpoint,
    params: &ParamSet<E>,
    cfg: AdamConfig,
) -> Result<Adam<E>> {
    let mut adam = Adam::new(params, cfg);
    for (i, p) in params.iter().enumerate() {
        let fetch = |suffix: &str| -> Result<Vec<E>> {
            let name = format!("opt/{}/{}", p.name, suffix);
            let blob = ckpt
                .blob(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {}", name)))?;
            if blob.data.len() != p.tensor.numel() {
                return Err(Error::Format(format!("checkpoint blob {} has wrong length", name)));
            }
            Ok(blob.data.iter().map(|&v| E::from_f64(v).unwrap()).collect())
        };
        let m = fetch("adam_m")?;
        let v = fetch("adam_v")?;
        adam.load_state(i, m, v);
    }
    let step = ckpt
        .meta
        .get("adam_step")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("checkpoint is missing adam_step".to_string()))?;
    adam.set_step_count(step);
    Ok(adam)
}

/// Captures the generator, its BN running stats, and optionally its
/// optimizer state.
pub fn snapshot_generator<E: Element>(
    net: &GeneratorNet<E>,
    adam: Option<&Adam<E>>,
    global_step: u64,
    mut meta: Map<String, Value>,
) -> Checkpoint {
    let mut blobs = param_blobs(&net.params);
    for (name, data) in net.buffers() {
        blobs.push(NamedBlob {
            shape: vec![data.len()],
            data: data.iter().map(|v| v.to_f64().unwrap()).collect(),
            name: format!("buffer/{}", name),
        });
    }
    if let Some(adam) = adam {
        blobs.extend(adam_blobs(adam, &net.params));
        meta.insert("adam_step".into(), Value::from(adam.step_count()));
    }
    Checkpoint {
        kind: "generator".to_string(),
        config: net.cfg.name(),
        global_step,
        meta,
        blobs,
    }
}

/// Rebuilds a generator from a checkpoint: same config, parameters, and BN
/// running stats.
pub fn restore_generator<E: Element>(ckpt: &Checkpoint) -> Result<GeneratorNet<E>> {
    if ckpt.kind != "generator" {
        return Err(Error::Format(format!(
            "expected a generator checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let cfg = GeneratorConfig::parse(&ckpt.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = GeneratorNet::build(&cfg, &mut rng)?;
    load_params(&net.params, ckpt)?;
    let buffers: Vec<(String, Vec<E>)> = ckpt
        .blobs
        .iter()
        .filter_map(|b| {
            b.name.strip_prefix("buffer/").map(|name| {
                (
                    name.to_string(),
                    b.data.iter().map(|&v| E::from_f64(v).unwrap()).collect(),
                )
            })
        })
        .collect();
    net.load_buffers(&buffers)?;
    Ok(net)
}

pub fn snapshot_discriminator<E: Element>(
    d: &Discriminator<E>,
    adam: Option<&Adam<E>>,
    global_step: u64,
    mut meta: Map<String, Value>,
) -> Checkpoint {
    let mut blobs = param_blobs(&d.params);
    if let Some(adam) = adam {
        blobs.extend(adam_blobs(adam, &d.params));
        meta.insert("adam_step".into(), Value::from(adam.step_count()));
    }
    Checkpoint {
        kind: "discriminator".to_string(),
        config: serde_json::to_string(&d.cfg).expect("discriminator config serializes"),
        global_step,
        meta,
        blobs,
    }
}

pub fn restore_discriminator<E: Element>(ckpt: &Checkpoint) -> Result<Discriminator<E>> {
    if ckpt.kind != "discriminator" {
        return Err(Error::Format(format!(
            "expected a discriminator checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let cfg: DiscriminatorConfig = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Format(format!("discriminator config: {}", e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = Discriminator::build(&cfg, &mut rng)?;
    load_params(&d.params, ckpt)?;
    Ok(d)
}
