//! Binary checkpoints: an 8-byte magic, a little-endian `u32` format
//! version, a `u64` header length, a JSON header and the tensor payload as
//! little-endian `f64`. Every tensor round-trips bit for bit.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::GhostStereo;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"GHSTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: Kind,
    learnable: bool,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm: Normalization,
    rng: ChaCha8Rng,
    adam: AdamConfig,
    adam_t: u64,
    step: u64,
    epoch: u64,
    round: u32,
    round_start_step: u64,
    best_val_epe: Option<f64>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    for e in state.store.entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            kind: Kind::Param,
            learnable: e.learnable,
            shape: e.value.shape().to_vec(),
        });
        payload.push(&e.value);
    }
    for (kind, moments) in [(Kind::AdamM, &state.adam.m), (Kind::AdamV, &state.adam.v)] {
        for (e, t) in state.store.entries().iter().zip(moments) {
            if e.learnable {
                tensors.push(TensorEntry {
                    name: e.name.clone(),
                    kind,
                    learnable: true,
                    shape: t.shape().to_vec(),
                });
                payload.push(t);
            }
        }
    }
    let header = Header {
        config: state.config.clone(),
        norm: state.norm,
        rng: state.rng.clone(),
        adam: state.adam.config.clone(),
        adam_t: state.adam.t,
        step: state.step,
        epoch: state.epoch,
        round: state.round,
        round_start_step: state.round_start_step,
        best_val_epe: state.best_val_epe,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let n: usize = payload.iter().map(|t| t.numel()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in payload {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found,
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(Error::TruncatedPayload {
            expected: hlen,
            found: body.len(),
        });
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let mut blob = &body[hlen..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| 8 * t.shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: blob.len(),
        });
    }

    let mut store = ParamStore::default();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let data = blob[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blob = &blob[8 * n..];
        let t = Tensor::from_vec(&entry.shape, data)?;
        match entry.kind {
            Kind::Param => {
                store.add(entry.name.clone(), t, entry.learnable);
            }
            Kind::AdamM => m.push((entry.name.clone(), t)),
            Kind::AdamV => v.push((entry.name.clone(), t)),
        }
    }
    let mut adam = Adam::new(&store, header.adam);
    adam.t = header.adam_t;
    for (moments, slot) in [(m, &mut adam.m), (v, &mut adam.v)] {
        for (name, t) in moments {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown tensor {name}")))?;
            if slot[id.index()].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for {name} has shape {:?}",
                    t.shape()
                )));
            }
            slot[id.index()] = t;
        }
    }
    Ok(TrainState {
        config: header.config,
        store,
        adam,
        norm: header.norm,
        rng: header.rng,
        step: header.step,
        epoch: header.epoch,
        round: header.round,
        round_start_step: header.round_start_step,
        best_val_epe: header.best_val_epe,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Load a checkpoint and rebuild the network it was trained with. The
/// stored tensors must match the rebuilt parameter inventory exactly.
pub fn load_model(path: &Path) -> Result<(GhostStereo, TrainState)> {
    let state = load(path)?;
    let (model, fresh) = GhostStereo::new(&state.config)?;
    if fresh.len() != state.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the configured model has {}",
            state.store.len(),
            fresh.len()
        )));
    }
    for (a, b) in fresh.entries().iter().zip(state.store.entries()) {
        if a.name != b.name || a.value.shape() != b.value.shape() || a.learnable != b.learnable {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok((model, state))
}
