//! Binary checkpoint: magic, format version, JSON metadata, f32 tensors and
//! a SHA-256 trailer over everything before it.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ConfigError, Model, ModelConfig};
use crate::nn::{Mat, ParamStore};
use crate::reaction::LeavingGroupVocab;

const MAGIC: &[u8; 8] = b"RETROCKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("checksum mismatch or truncated file")]
    Checksum,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("not a checkpoint file")]
    Magic,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Optimizer and loss-weighting state carried between training sessions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub initial_losses: Vec<Option<f64>>,
    pub prev_losses: Vec<Option<f64>>,
    pub prev2_losses: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    vocab: String,
    train: Option<TrainState>,
    has_velocity: bool,
}

/// Model plus optional training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainState>,
    /// Momentum buffers, aligned with the model's parameters.
    pub velocity: Option<Vec<Mat>>,
}

fn put_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, m: &Mat) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, 2);
    put_u32(buf, m.rows as u32);
    put_u32(buf, m.cols as u32);
    for &x in &m.data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Mat), CheckpointError> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let rank = self.u32()?;
        if rank != 2 {
            return Err(CheckpointError::Format(format!("tensor {name} has rank {rank}")));
        }
        let (rows, cols) = (self.u32()? as usize, self.u32()? as usize);
        let bytes = self.take(rows * cols * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Mat::from_vec(rows, cols, data)))
    }
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            train: None,
            velocity: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Metadata {
            config: self.model.config.clone(),
            vocab: self.model.vocab.to_text(),
            train: self.train.clone(),
            has_velocity: self.velocity.is_some(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, json.len() as u32);
        buf.extend_from_slice(&json);
        let params = &self.model.params;
        let count = params.len() * if self.velocity.is_some() { 2 } else { 1 };
        put_u32(&mut buf, count as u32);
        for id in params.ids() {
            put_tensor(&mut buf, params.name(id), params.value(id));
        }
        if let Some(vel) = &self.velocity {
            for (id, m) in params.ids().zip(vel) {
                put_tensor(&mut buf, &format!("velocity.{}", params.name(id)), m);
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    /// Parses a checkpoint. The checksum is verified before anything else is
    /// read, so corrupted files never yield a partial model.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(CheckpointError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let meta: Metadata =
            serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let vocab = LeavingGroupVocab::from_text(&meta.vocab).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut model = Model::new(meta.config.clone(), vocab)?;
        if model.config != meta.config {
            return Err(CheckpointError::Format("stored config is not self-consistent".into()));
        }
        let count = r.u32()? as usize;
        let mut loaded = ParamStore::new();
        for _ in 0..count {
            let (name, m) = r.tensor()?;
            loaded.add(name, m);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format("trailing data".into()));
        }
        let ids: Vec<_> = model.params.ids().collect();
        let fetch = |name: &str, like: &Mat| -> Result<Mat, CheckpointError> {
            let id = loaded
                .id(name)
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {name}")))?;
            let m = loaded.value(id);
            if m.shape() != like.shape() {
                return Err(CheckpointError::Format(format!("tensor {name} has wrong shape")));
            }
            Ok(m.clone())
        };
        let mut values = Vec::with_capacity(ids.len());
        for &id in &ids {
            values.push(fetch(model.params.name(id), model.params.value(id))?);
        }
        let velocity = if meta.has_velocity {
            let mut vel = Vec::with_capacity(ids.len());
            for &id in &ids {
                vel.push(fetch(&format!("velocity.{}", model.params.name(id)), model.params.value(id))?);
            }
            Some(vel)
        } else {
            None
        };
        for (id, m) in ids.into_iter().zip(values) {
            *model.params.value_mut(id) = m;
        }
        Ok(Checkpoint {
            model,
            train: meta.train,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the stored architecture against `session`.
    pub fn load_for(path: &Path, session: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
        let ck = Self::load(path)?;
        session.ensure_compatible(&ck.model.config)?;
        Ok(ck)
    }
}
