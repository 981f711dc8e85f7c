//! Checkpoints are a directory holding `manifest.json` (names, shapes, byte
//! offsets, bookkeeping) and `tensors.bin`, the concatenated SKT1 encodings of
//! every parameter followed by the Adam moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::numerics::{skt, Tensor};
use crate::training::adam::AdamState;

pub const FORMAT: &str = "skipclip-checkpoint/1";

/// Where the derived random streams resume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams<f32>,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    fingerprint: String,
    epoch: usize,
    rng: RngState,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>| {
        let bytes = skt::encode(t);
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
            length: bytes.len(),
        });
        blob.extend_from_slice(&bytes);
    };
    for (n, t) in ckpt.params.names.iter().zip(&ckpt.params.tensors) {
        push(n.clone(), t);
    }
    for (n, t) in ckpt.params.names.iter().zip(&ckpt.adam.m) {
        push(format!("adam.m.{n}"), t);
    }
    for (n, t) in ckpt.params.names.iter().zip(&ckpt.adam.v) {
        push(format!("adam.v.{n}"), t);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        fingerprint: ckpt.fingerprint.clone(),
        epoch: ckpt.epoch,
        rng: ckpt.rng,
        adam_step: ckpt.adam.step,
        tensors: entries,
    };
    let bin = dir.join("tensors.bin");
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))
}

/// Loads a checkpoint; with `expected_fingerprint` set, refuses one written
/// for a different architecture.
pub fn load_checkpoint(dir: &Path, expected_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    if manifest.format != FORMAT {
        return Err(Error::Validation {
            path: mpath,
            detail: format!("unknown checkpoint format {}", manifest.format),
        });
    }
    if let Some(expected) = expected_fingerprint {
        if expected != manifest.fingerprint {
            return Err(Error::Fingerprint {
                expected: expected.into(),
                found: manifest.fingerprint,
            });
        }
    }
    let bin = dir.join("tensors.bin");
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &manifest.tensors {
        let end = e.offset + e.length;
        if end > blob.len() {
            return Err(Error::TruncatedPayload {
                path: bin.clone(),
                expected: end,
                found: blob.len(),
            });
        }
        let t = skt::decode(&blob[e.offset..end], &bin)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Validation {
                path: bin.clone(),
                detail: format!("tensor {} header shape disagrees with manifest", e.name),
            });
        }
        if let Some(rest) = e.name.strip_prefix("adam.m.") {
            debug_assert!(names.iter().any(|n| n == rest));
            m.push(t);
        } else if e.name.starts_with("adam.v.") {
            v.push(t);
        } else {
            names.push(e.name.clone());
            params.push(t);
        }
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Validation {
            path: mpath,
            detail: "optimizer moments do not cover every parameter".into(),
        });
    }
    Ok(Checkpoint {
        params: EncoderParams {
            names,
            tensors: params,
        },
        adam: AdamState {
            m,
            v,
            step: manifest.adam_step,
        },
        epoch: manifest.epoch,
        rng: manifest.rng,
        fingerprint: manifest.fingerprint,
    })
}
