//! `UFCKP1` checkpoints, little-endian:
//!
//! ```text
//! "UFCKP1"
//! u32 json_len, json_len bytes of JSON (model config, training config, loop position)
//! u32 tensor_count
//! 3 x tensor_count tensors (parameters, first moments, second moments), each
//!     u32 name_len, name bytes, u32 rank, rank x u32 dims, f32 data
//! u64 step
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::io::{put_f32s, put_u32, read_bytes, write_atomic, Reader};
use crate::vfnet::{FieldNet, ModelConfig, ModelParams, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"UFCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Codebook size the unit ids refer to (0 in mel-input mode).
    pub k: usize,
    pub epoch: u64,
    pub cursor: usize,
    pub wall_s: f64,
    pub loss_history: Vec<(u64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: &TrainState, train: &TrainConfig, k: usize) -> Self {
        Self {
            meta: CheckpointMeta {
                model: state.params().config().clone(),
                train: train.clone(),
                k,
                epoch: state.epoch,
                cursor: state.cursor,
                wall_s: state.wall_s,
                loss_history: state.loss_history.clone(),
            },
            state: state.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let json = serde_json::to_vec(&self.meta).expect("checkpoint meta serializes");
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        let params = self.state.params();
        put_u32(&mut out, params.tensors().len());
        for set in [params, &self.state.m, &self.state.v] {
            for t in set.tensors() {
                put_u32(&mut out, t.name.len());
                out.extend_from_slice(t.name.as_bytes());
                put_u32(&mut out, t.shape.len());
                for &d in &t.shape {
                    put_u32(&mut out, d);
                }
                put_f32s(&mut out, &t.data);
            }
        }
        out.extend_from_slice(&self.state.step.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let json_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)
            .map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", path.display())))?;
        let count = r.u32()? as usize;
        let mut sets = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut tensors = Vec::with_capacity(count);
            for _ in 0..count {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    reason: "tensor name is not UTF-8".into(),
                })?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let data = r.f32s(shape.iter().product())?;
                tensors.push(Tensor { name, shape, data });
            }
            sets.push(ModelParams::from_tensors(&meta.model, tensors)?);
        }
        let step = r.u64()?;
        r.finish()?;
        let v = sets.pop().expect("three sets");
        let m = sets.pop().expect("three sets");
        let params = sets.pop().expect("three sets");
        let state = TrainState {
            net: FieldNet::new(params),
            m,
            v,
            step,
            epoch: meta.epoch,
            cursor: meta.cursor,
            loss_history: meta.loss_history.clone(),
            wall_s: meta.wall_s,
        };
        Ok(Self { meta, state })
    }

    /// Fails unless the stored architecture equals `model`.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if &self.meta.model != model {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint architecture {:?} differs from configured {:?}",
                self.meta.model, model
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState, train: &TrainConfig, k: usize) -> Result<()> {
    write_atomic(path, &Checkpoint::new(state, train, k).encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_bytes(path)?, path)
}
