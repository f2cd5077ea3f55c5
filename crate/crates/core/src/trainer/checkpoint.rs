//! Binary checkpoint container.
//!
//! ```text
//! b"MGCOTCKP" | u32 version | u64 header length | JSON header
//! | f64 LE payload (params, then Adam m and v, then best params)
//! | SHA-256 of everything before it
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optimizer::Adam;
use super::runlog::RunLog;
use crate::error::{MgcotError, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MGCOTCKP";

/// Where training stands after the last completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub items: usize,
    pub train_config: String,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    pub progress: Progress,
    pub log: RunLog,
    /// Parameter values of the best epoch so far, same order as `params`.
    pub best: Option<Vec<Array2<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
    frozen_rows: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    items: usize,
    train_config: String,
    params: Vec<ParamMeta>,
    adam: Option<AdamMeta>,
    progress: Progress,
    log: RunLog,
    has_best: bool,
}

fn put(out: &mut Vec<u8>, a: &Array2<f64>) {
    for &x in a.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MgcotError::Integrity("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let raw = self.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("sized"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            items: self.items,
            train_config: self.train_config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, p)| ParamMeta {
                    name: p.name.clone(),
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                    frozen_rows: p.frozen_rows.clone(),
                    trainable: p.trainable,
                })
                .collect(),
            adam: self.adam.as_ref().map(|a| AdamMeta {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                weight_decay: a.weight_decay,
                step: a.step,
            }),
            progress: self.progress.clone(),
            log: self.log.clone(),
            has_best: self.best.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.params.iter() {
            put(&mut out, &p.value);
        }
        if let Some(a) = &self.adam {
            a.m.iter().chain(&a.v).for_each(|x| put(&mut out, x));
        }
        if let Some(best) = &self.best {
            best.iter().for_each(|x| put(&mut out, x));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
            return Err(MgcotError::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(MgcotError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(MgcotError::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| MgcotError::Integrity(format!("bad header: {e}")))?;

        let mut params = ParamStore::new();
        for meta in &header.params {
            let value = r.array(meta.rows, meta.cols)?;
            let id = params.add(meta.name.clone(), value);
            for &row in &meta.frozen_rows {
                params.freeze_row(id, row);
            }
            params.set_trainable(id, meta.trainable);
        }
        let read_all = |r: &mut Reader| -> Result<Vec<Array2<f64>>> {
            header.params.iter().map(|m| r.array(m.rows, m.cols)).collect()
        };
        let adam = match &header.adam {
            Some(meta) => Some(Adam {
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
                weight_decay: meta.weight_decay,
                step: meta.step,
                m: read_all(&mut r)?,
                v: read_all(&mut r)?,
            }),
            None => None,
        };
        let best = if header.has_best { Some(read_all(&mut r)?) } else { None };
        if r.pos != body.len() {
            return Err(MgcotError::Integrity("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            model: header.model,
            items: header.items,
            train_config: header.train_config,
            params,
            adam,
            progress: header.progress,
            log: header.log,
            best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MgcotError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MgcotError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parameters of the best epoch (the current ones when none is recorded).
    pub fn best_params(&self) -> ParamStore {
        let mut store = self.params.clone();
        if let Some(best) = &self.best {
            let ids: Vec<_> = store.ids().collect();
            for (id, v) in ids.into_iter().zip(best) {
                *store.value_mut(id) = v.clone();
            }
        }
        store
    }
}
