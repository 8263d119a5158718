//! Checkpoint files.
//!
//! Layout: magic `AMRD`, u32 LE version, u64 LE manifest length, UTF-8 JSON
//! manifest, then the raw little-endian f32 blobs in manifest order. Each
//! manifest entry carries the blob's offset (from the start of the blob
//! section), byte length and blake3 hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::loss::BalancerState;
use crate::numerics::{ParamStore, Tensor};
use crate::optim::{AdamWParams, OptimState};

pub const MAGIC: [u8; 4] = *b"AMRD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Position of the counter-based random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    #[serde(flatten)]
    pub hyper: AdamWParams,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub rng_state: RngState,
    pub config_hash: String,
    pub teacher_hashes: BTreeMap<String, String>,
    pub optimizer: OptimizerEntry,
    pub balancer: BalancerState,
    pub tensors: Vec<TensorEntry>,
}

/// Full resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng_state: RngState,
    pub config_hash: String,
    pub teacher_hashes: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
    pub optim: OptimState<f32>,
    pub balancer: BalancerState,
}

const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

fn blob(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor<f32>)> = ck.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    for (n, t) in &ck.optim.m {
        named.push((format!("{M_PREFIX}{n}"), t));
    }
    for (n, t) in &ck.optim.v {
        named.push((format!("{V_PREFIX}{n}"), t));
    }
    let mut blobs = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in named {
        let bytes = blob(t);
        tensors.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: blobs.len() as u64,
            byte_len: bytes.len() as u64,
            hash: blake3::hash(&bytes).to_hex().to_string(),
        });
        blobs.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format: "AMRD".into(),
        step: ck.step,
        rng_state: ck.rng_state,
        config_hash: ck.config_hash.clone(),
        teacher_hashes: ck.teacher_hashes.clone(),
        optimizer: OptimizerEntry { hyper: ck.optim.hyper, t: ck.optim.t },
        balancer: ck.balancer.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blobs.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    Ok(out)
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads only the header and manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("missing magic".into()).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated("header".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version { found: version, expected: VERSION }.into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = HEADER_LEN.checked_add(len).filter(|&e| e <= bytes.len());
    let end = end.ok_or_else(|| CheckpointError::Truncated(format!("manifest of {len} bytes")))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != "AMRD" {
        return Err(CheckpointError::Manifest(format!("format {:?}", manifest.format)).into());
    }
    Ok((manifest, end))
}

/// Parses and verifies a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, start) = read_manifest(bytes)?;
    let body = &bytes[start..];
    let mut seen = BTreeSet::new();
    let mut params = ParamStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in &manifest.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(CheckpointError::DuplicateEntry(e.name.clone()).into());
        }
        if e.dtype != "f32" {
            return Err(CheckpointError::Manifest(format!("{}: dtype {}", e.name, e.dtype)).into());
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != 4 * numel as u64 || e.offset != expected_offset {
            return Err(CheckpointError::Manifest(format!("{}: inconsistent offset or length", e.name)).into());
        }
        expected_offset += e.byte_len;
        let (lo, hi) = (e.offset as usize, (e.offset + e.byte_len) as usize);
        let raw = body.get(lo..hi).ok_or_else(|| CheckpointError::Truncated(format!("blob of {}", e.name)))?;
        if blake3::hash(raw).to_hex().as_str() != e.hash {
            return Err(CheckpointError::HashMismatch(e.name.clone()).into());
        }
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        if let Some(n) = e.name.strip_prefix(M_PREFIX) {
            m.insert(n.to_string(), t);
        } else if let Some(n) = e.name.strip_prefix(V_PREFIX) {
            v.insert(n.to_string(), t);
        } else {
            params.insert(e.name.clone(), t);
        }
    }
    if body.len() as u64 != expected_offset {
        return Err(CheckpointError::Manifest(format!("{} trailing bytes", body.len() as u64 - expected_offset)).into());
    }
    for name in params.names() {
        for (prefix, map) in [(M_PREFIX, &m), (V_PREFIX, &v)] {
            match map.get(name) {
                None => return Err(CheckpointError::MissingEntry(format!("{prefix}{name}")).into()),
                Some(t) if t.shape() != params.get(name).expect("listed").shape() => {
                    return Err(CheckpointError::Manifest(format!("{prefix}{name}: shape differs from parameter")).into())
                }
                _ => {}
            }
        }
    }
    if let Some(extra) = m.keys().chain(v.keys()).find(|n| !params.contains(n)) {
        return Err(CheckpointError::MissingEntry(extra.clone()).into());
    }
    Ok(Checkpoint {
        step: manifest.step,
        rng_state: manifest.rng_state,
        config_hash: manifest.config_hash,
        teacher_hashes: manifest.teacher_hashes,
        params,
        optim: OptimState { hyper: manifest.optimizer.hyper, t: manifest.optimizer.t, m, v },
        balancer: manifest.balancer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&bytes)
}

/// blake3 of the whole file.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(blake3::hash(&fs::read(path)?).to_hex().to_string())
}

/// Fails unless `ck` holds exactly the parameters named in `expected`, with matching shapes.
pub fn check_param_set(ck: &Checkpoint, expected: &ParamStore<f32>) -> Result<()> {
    for (name, t) in expected.iter() {
        match ck.params.get(name) {
            None => return Err(CheckpointError::MissingEntry(name.clone()).into()),
            Some(c) if c.shape() != t.shape() => {
                return Err(CheckpointError::Manifest(format!("{name}: shape {:?}, model expects {:?}", c.shape(), t.shape())).into())
            }
            _ => {}
        }
    }
    if let Some(extra) = ck.params.names().find(|n| !expected.contains(n)) {
        return Err(CheckpointError::Manifest(format!("unexpected parameter {extra}")).into());
    }
    Ok(())
}
