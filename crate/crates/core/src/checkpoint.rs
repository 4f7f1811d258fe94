//! Versioned checkpoint container.
//!
//! ```text
//! magic "VPRGCKPT" | version u32 | manifest length u64 | manifest JSON | payload
//! ```
//!
//! All integers are little-endian. The manifest lists every tensor with its
//! shape and byte range inside the payload; payload values are `f32`
//! little-endian in row-major order. Values are rounded to `f32` when
//! captured, so a loaded checkpoint saves back to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Adam;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VPRGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub epoch: usize,
    pub optimizer_step: u64,
    pub dtype: String,
    pub vocab_size: usize,
    pub d_s: usize,
    pub d_v: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    /// Tensors in manifest order.
    pub tensors: Vec<Array2<f64>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("plain config").as_bytes())
}

fn round32(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v as f32 as f64)
}

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

impl Checkpoint {
    pub fn capture(model: &Model, adam: &Adam, cfg: &TrainConfig, epoch: usize, metrics: &[(String, f64)]) -> Result<Self> {
        let mut named: Vec<(String, Array2<f64>)> = Vec::new();
        for id in model.store.ids() {
            named.push((model.store.name(id).to_string(), round32(model.store.peek(id))));
        }
        for id in model.store.ids() {
            named.push((format!("{FIRST_MOMENT}{}", model.store.name(id)), round32(&adam.first[id.index()])));
        }
        for id in model.store.ids() {
            named.push((format!("{SECOND_MOMENT}{}", model.store.name(id)), round32(&adam.second[id.index()])));
        }
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            let len = 4 * t.len() as u64;
            entries.push(TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
                offset,
                len,
            });
            offset += len;
            tensors.push(t);
        }
        Ok(Checkpoint {
            manifest: Manifest {
                epoch,
                optimizer_step: adam.step,
                dtype: "f32".into(),
                vocab_size: model.vocab.len(),
                d_s: model.vocab.width(),
                d_v: model.d_v,
                config: cfg.clone(),
                config_hash: config_hash(cfg),
                metrics: metrics.iter().cloned().collect(),
                tensors: entries,
            },
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.manifest.tensors.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("plain manifest");
        let payload_len: u64 = self.manifest.tensors.iter().map(|e| e.len).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload_len as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(8, format!("unsupported version {version}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| fail(12, format!("manifest length {manifest_len} exceeds file")))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[HEADER_LEN..payload_start]).map_err(|e| fail(HEADER_LEN, e.to_string()))?;
        if manifest.dtype != "f32" {
            return Err(fail(HEADER_LEN, format!("unsupported dtype {}", manifest.dtype)));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0u64;
        for e in &manifest.tensors {
            let [r, c] = e.shape;
            if e.offset != expected_offset || e.len != 4 * (r * c) as u64 {
                return Err(fail(HEADER_LEN, format!("inconsistent entry for tensor {}", e.name)));
            }
            let end = (e.offset + e.len) as usize;
            if end > payload.len() {
                return Err(fail(
                    payload_start + payload.len(),
                    format!("tensor {} needs bytes up to {end}, payload has {}", e.name, payload.len()),
                ));
            }
            let values: Vec<f64> = payload[e.offset as usize..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(Array2::from_shape_vec((r, c), values).expect("length checked"));
            expected_offset = e.offset + e.len;
        }
        if expected_offset as usize != payload.len() {
            return Err(fail(
                payload_start + expected_offset as usize,
                format!("{} trailing payload bytes", payload.len() - expected_offset as usize),
            ));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Rebuilds the model described by the manifest over `vocab` and loads
    /// every parameter tensor into it.
    pub fn restore_model(&self, vocab: Vocabulary) -> Result<Model> {
        let m = &self.manifest;
        if vocab.len() != m.vocab_size || vocab.width() != m.d_s {
            return Err(Error::invalid(format!(
                "vocabulary is {}×{}, checkpoint expects {}×{}",
                vocab.len(),
                vocab.width(),
                m.vocab_size,
                m.d_s
            )));
        }
        let mut model = Model::new(m.config.model.clone(), vocab, m.d_v, m.config.seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let value = self
                .tensor(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?
                .clone();
            model.store.set(id, value)?;
        }
        Ok(model)
    }

    /// Restores the optimiser moments saved alongside `model`'s parameters.
    pub fn restore_adam(&self, model: &Model, adam: &mut Adam) -> Result<()> {
        for id in model.store.ids() {
            let name = model.store.name(id);
            for (prefix, slot) in [(FIRST_MOMENT, &mut adam.first), (SECOND_MOMENT, &mut adam.second)] {
                let t = self
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks moments of {name}")))?;
                slot[id.index()] = t.clone();
            }
        }
        adam.step = self.manifest.optimizer_step;
        Ok(())
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, ckpt.encode()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
