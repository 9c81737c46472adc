//! Checkpoint container.
//!
//! Layout: `b"GMSACKPT"`, format version `u32`, header length `u64`, a JSON
//! header (config, parameter manifest, trainer state), the raw little-endian
//! `f64` payloads in manifest order (parameters, then optimizer moments),
//! and a SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::train::{AdamW, Trainer, TrainerState};

pub const MAGIC: &[u8; 8] = b"GMSACKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    rates: Vec<usize>,
    state: TrainerState,
    /// Parameters with optimizer moments; each contributes `m` then `v`.
    moments: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    lsa_initialized: bool,
    params: Vec<ParamEntry>,
    training: Option<TrainingHeader>,
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSnapshot {
    pub config: TrainConfig,
    pub rates: Vec<usize>,
    pub state: TrainerState,
    pub opt: AdamW,
}

impl TrainingSnapshot {
    pub fn of(trainer: &Trainer) -> Self {
        TrainingSnapshot {
            config: trainer.config.clone(),
            rates: trainer.rates.clone(),
            state: trainer.state(),
            opt: trainer.opt.clone(),
        }
    }

    /// Rebuilds the trainer at the saved position.
    pub fn resume(self, model: &mut Model) -> Result<Trainer> {
        let mut trainer = Trainer::new(model, self.state.stage, self.config, self.rates)?;
        trainer.restore_state(self.state)?;
        trainer.opt = self.opt;
        Ok(trainer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainingSnapshot>,
}

fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model, training: Option<&TrainingSnapshot>) -> Result<Vec<u8>> {
    let store = &model.store;
    let params = store
        .iter()
        .map(|(_, p)| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect();
    let training_header = training.map(|t| TrainingHeader {
        config: t.config.clone(),
        rates: t.rates.clone(),
        state: t.state.clone(),
        moments: t.opt.moments().map(|(id, _, _)| store.get(id).name.clone()).collect(),
    });
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        lsa_initialized: model.lsa_initialized,
        params,
        training: training_header,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in store.iter() {
        push_f64s(&mut out, p.value.data());
    }
    if let Some(t) = training {
        for (_, m, v) in t.opt.moments() {
            push_f64s(&mut out, m);
            push_f64s(&mut out, v);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.pos + 8 * n;
        if end > self.bytes.len() {
            return Err(Error::Integrity(format!(
                "payload truncated: need {end} bytes, have {}",
                self.bytes.len()
            )));
        }
        let out = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos = end;
        Ok(out)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE_LEN + DIGEST_LEN {
        return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = PREAMBLE_LEN
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[PREAMBLE_LEN..header_end])?;
    let mut reader = Reader {
        bytes: body,
        pos: header_end,
    };
    let mut store = ParameterStore::new();
    for entry in &header.params {
        let n = entry.shape.iter().product();
        let id = store.insert(&entry.name, Tensor::new(entry.shape.clone(), reader.f64s(n)?)?)?;
        store.set_trainable(id, entry.trainable);
    }
    let training = match header.training {
        Some(t) => {
            let mut opt = AdamW::new();
            opt.t = t.state.adam_t;
            for name in &t.moments {
                let id = store.id(name)?;
                let n = store.value(id).numel();
                let m = reader.f64s(n)?;
                let v = reader.f64s(n)?;
                opt.set_moments(id, m, v);
            }
            Some(TrainingSnapshot {
                config: t.config,
                rates: t.rates,
                state: t.state,
                opt,
            })
        }
        None => None,
    };
    if reader.pos != body.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after payloads",
            body.len() - reader.pos
        )));
    }
    let model = Model::from_store(header.model, store, header.lsa_initialized)?;
    Ok(Checkpoint { model, training })
}

pub fn save(path: &Path, model: &Model, training: Option<&TrainingSnapshot>) -> Result<()> {
    let bytes = to_bytes(model, training)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
