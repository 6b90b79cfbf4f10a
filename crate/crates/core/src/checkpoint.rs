//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json   schema version, run config, seed, step, metrics, id
//! <dir>/model.bin       named f32 tensors
//! <dir>/optimizer.bin   Adam moments (training checkpoints only)
//! <dir>/vocab.json      token table
//! ```
//!
//! Directories are written under a temporary name and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use promptpaint_autograd::{Moments, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::Model;
use crate::trainer::RunConfig;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const PARAM_MAGIC: &[u8; 8] = b"PPCKPT01";
const OPTIM_MAGIC: &[u8; 8] = b"PPOPTM01";
/// Name of the pointer file a training directory keeps to its newest
/// checkpoint.
pub const LATEST: &str = "latest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub checkpoint_id: String,
    pub config: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    /// How per-step randomness is derived, so a resumed run can be replayed.
    pub rng_stream: String,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub moments: Option<Vec<Option<Moments<f32>>>>,
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_tensor(w: &mut impl Write, t: &Tensor<f32>) -> io::Result<()> {
    put_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_tensor(r: &mut impl Read) -> Result<Tensor<f32>> {
    let nd = get_u32(r)? as usize;
    if nd > 8 {
        return Err(Error::Checkpoint(format!("tensor with {nd} dimensions")));
    }
    let mut shape = Vec::with_capacity(nd);
    for _ in 0..nd {
        shape.push(get_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn encode_params(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 4);
    out.extend_from_slice(PARAM_MAGIC);
    put_u32(&mut out, store.len() as u32).expect("vec write");
    for (_, name, t) in store.iter() {
        put_u32(&mut out, name.len() as u32).expect("vec write");
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t).expect("vec write");
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Checkpoint("model.bin has the wrong magic bytes".into()));
    }
    let n = get_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        out.push((name, get_tensor(&mut r)?));
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes in model.bin", r.len())));
    }
    Ok(out)
}

pub fn encode_moments(moments: &[Option<Moments<f32>>], params: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPTIM_MAGIC);
    put_u32(&mut out, params as u32).expect("vec write");
    for i in 0..params {
        match moments.get(i).and_then(|m| m.as_ref()) {
            None => out.push(0),
            Some(m) => {
                out.push(1);
                put_u64(&mut out, m.steps).expect("vec write");
                put_tensor(&mut out, &m.m).expect("vec write");
                put_tensor(&mut out, &m.v).expect("vec write");
            }
        }
    }
    out
}

pub fn decode_moments(bytes: &[u8]) -> Result<Vec<Option<Moments<f32>>>> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != OPTIM_MAGIC {
        return Err(Error::Checkpoint("optimizer.bin has the wrong magic bytes".into()));
    }
    let n = get_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        out.push(match flag[0] {
            0 => None,
            1 => {
                let steps = get_u64(&mut r)?;
                let m = get_tensor(&mut r)?;
                let v = get_tensor(&mut r)?;
                Some(Moments { m, v, steps })
            }
            f => return Err(Error::Checkpoint(format!("bad moment flag {f}"))),
        });
    }
    Ok(out)
}

/// Short content hash of the serialised weights.
pub fn checkpoint_id(model_bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(model_bytes)[..8])
}

pub struct SaveRequest<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore<f32>,
    pub moments: Option<&'a [Option<Moments<f32>>]>,
    pub config: &'a RunConfig,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
}

pub const RNG_STREAM: &str = "chacha8 per step, seeded from (seed, step); scenes from train_seed(seed, step, slot)";

/// Writes a checkpoint directory atomically, replacing any previous one.
pub fn save_checkpoint(dir: &Path, req: SaveRequest<'_>) -> Result<Manifest> {
    let model_bytes = encode_params(req.params);
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        checkpoint_id: checkpoint_id(&model_bytes),
        config: req.config.clone(),
        seed: req.config.train.seed,
        step: req.step,
        metrics: req.metrics,
        rng_stream: RNG_STREAM.into(),
    };
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join("model.bin"), &model_bytes)?;
    if let Some(m) = req.moments {
        fs::write(tmp.join("optimizer.bin"), encode_moments(m, req.params.len()))?;
    }
    fs::write(tmp.join("vocab.json"), req.model.vocab.to_json()?)?;
    fs::write(tmp.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Accepts either a checkpoint directory or a training directory holding a
/// `latest` pointer.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.join("manifest.json").is_file() {
        return Ok(path.to_path_buf());
    }
    let pointer = path.join(LATEST);
    if pointer.is_file() {
        let rel = fs::read_to_string(&pointer)?;
        return Ok(path.join(rel.trim()));
    }
    Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = resolve(path)?;
    let manifest = read_manifest(&dir)?;
    let (model, mut params) = Model::init::<f32>(&manifest.config.model, manifest.seed)?;
    let vocab_json = fs::read_to_string(dir.join("vocab.json"))?;
    let vocab = crate::textcond::Vocabulary::from_json(&vocab_json)?;
    if vocab != model.vocab {
        return Err(Error::Checkpoint("stored vocabulary differs from the configured one".into()));
    }
    let model_bytes = fs::read(dir.join("model.bin"))?;
    if checkpoint_id(&model_bytes) != manifest.checkpoint_id {
        return Err(Error::Checkpoint("model.bin does not match the manifest checksum".into()));
    }
    let stored = decode_params(&model_bytes)?;
    if stored.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            stored.len(),
            params.len()
        )));
    }
    for (name, t) in stored {
        let id = params
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if params.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {:?}, model {:?}",
                t.shape(),
                params.get(id).shape()
            )));
        }
        params.set(id, t)?;
    }
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    let opt_path = dir.join("optimizer.bin");
    let moments = if opt_path.is_file() {
        Some(decode_moments(&fs::read(opt_path)?)?)
    } else {
        None
    };
    Ok(Checkpoint {
        manifest,
        model,
        params,
        moments,
    })
}
