//! Checkpoint files.
//!
//! Layout: magic `MRBC`, u32 LE format version, u64 LE metadata length,
//! UTF-8 JSON metadata, then little-endian tensor payloads in table order.
//! Parameters are stored as `param/<name>` and momentum buffers as
//! `momentum/<name>`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::net::{check_params, NetworkConfig};
use crate::nn::{init_params, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRBC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub iteration: u64,
    pub recall1: f64,
}

/// Loop position and schedule state needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub epoch: u64,
    /// Index of the next batch within the current epoch.
    pub batch_pos: usize,
    pub lr: f64,
    /// Evaluations since the last new best (plateau policy).
    pub stale_evals: usize,
    pub best: Option<BestRecord>,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Self {
        TrainState {
            iteration: 0,
            epoch: 0,
            batch_pos: 0,
            lr: config.lr,
            stale_evals: 0,
            best: None,
            rng_seed: config.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    net_hash: String,
    state: TrainState,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 of the network configuration's JSON form.
pub fn net_config_hash(net: &NetworkConfig) -> String {
    let json = serde_json::to_vec(net).expect("network config serializes");
    hex::encode(Sha256::digest(&json))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.iter() {
            push(format!("param/{name}"), t);
        }
        for name in self.params.names() {
            push(format!("momentum/{name}"), self.params.momentum(name)?);
        }
        let meta = Metadata {
            config: self.config.clone(),
            net_hash: net_config_hash(&self.config.net),
            state: self.state.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and validates a checkpoint: magic, version, tensor table, and
    /// tensor shapes against the stored network configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = |m: String| Error::Checkpoint(m);
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ck("bad magic (not a checkpoint file)".into()));
        }
        if bytes.len() < 16 {
            return Err(ck("truncated header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ck(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let json_end = usize::try_from(json_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ck("truncated metadata".into()))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..json_end]).map_err(|e| ck(format!("metadata: {e}")))?;
        if meta.net_hash != net_config_hash(&meta.config.net) {
            return Err(ck("network config hash does not match the stored config".into()));
        }
        let payload = &bytes[json_end..];

        let mut params = ParamStore::new();
        let mut momenta = Vec::new();
        let mut seen = BTreeSet::new();
        for e in &meta.tensors {
            if e.dtype != "f64" && e.dtype != "f32" {
                return Err(ck(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            if !seen.insert(e.name.clone()) {
                return Err(ck(format!("tensor {} listed twice", e.name)));
            }
            let width = if e.dtype == "f64" { 8 } else { 4 };
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let bytes = start
                .checked_add(n * width)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| ck(format!("truncated: tensor {} missing", e.name)))?;
            let data: Vec<f64> = if width == 8 {
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            } else {
                bytes
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect()
            };
            let t = Tensor::new(&e.shape, data).map_err(|err| ck(format!("tensor {}: {err}", e.name)))?;
            if let Some(name) = e.name.strip_prefix("param/") {
                params.insert(name, t)?;
            } else if let Some(name) = e.name.strip_prefix("momentum/") {
                momenta.push((name.to_string(), t));
            } else {
                return Err(ck(format!("unexpected tensor {}", e.name)));
            }
        }
        for (name, t) in momenta {
            params
                .set_momentum(&name, t)
                .map_err(|err| ck(format!("momentum/{name}: {err}")))?;
        }
        if params.names().any(|n| !seen.contains(&format!("momentum/{n}"))) {
            return Err(ck("a momentum buffer is missing".into()));
        }
        check_params(&params, &meta.config.net).map_err(|e| ck(format!("shape table: {e}")))?;
        Ok(Checkpoint {
            config: meta.config,
            state: meta.state,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Result of loading pretrained weights into a possibly different network.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub params: ParamStore,
    pub loaded: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Parameters for `target` taken from `ck`. With matching network configs
/// every tensor (and momentum) is kept. Otherwise, only when
/// `allow_head_reinit` is set, tensors whose name and shape agree are copied
/// and the rest keep a fresh initialization drawn from `stream`.
pub fn warm_start(
    ck: &Checkpoint,
    target: &NetworkConfig,
    allow_head_reinit: bool,
    stream: RngStream,
) -> Result<WarmStart> {
    if net_config_hash(&ck.config.net) == net_config_hash(target) {
        return Ok(WarmStart {
            params: ck.params.clone(),
            loaded: ck.params.names().map(String::from).collect(),
            reinitialized: Vec::new(),
        });
    }
    if !allow_head_reinit {
        return Err(Error::Contract(
            "checkpoint network config differs from the requested one (use --allow-head-reinit to fine-tune)".into(),
        ));
    }
    let mut params = init_params(target, stream)?;
    let names: Vec<String> = params.names().map(String::from).collect();
    let (mut loaded, mut reinitialized) = (Vec::new(), Vec::new());
    for name in names {
        match ck.params.get(&name) {
            Ok(t) if t.shape() == params.get(&name)?.shape() => {
                params.set(&name, t.clone())?;
                loaded.push(name);
            }
            _ => reinitialized.push(name),
        }
    }
    Ok(WarmStart {
        params,
        loaded,
        reinitialized,
    })
}
