use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry, TensorWriter};
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor, REAL_DTYPE};

use super::{Adam, AdamConfig, EpochMetrics, Position, TrainSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EXSG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub schedule: TrainSchedule,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub adam: Adam,
    pub position: Position,
    pub rng: Rng,
    pub history: Vec<EpochMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryMeta {
    epoch: usize,
    shard: usize,
    streak: usize,
    step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    config: ModelConfig,
    schedule: TrainSchedule,
    adam: AdamConfig,
    adam_step: u64,
    position: Position,
    rng: Rng,
    params: Vec<String>,
    buffers: Vec<String>,
    history: Vec<HistoryMeta>,
    tensors: Vec<TensorEntry>,
}

// Floats (losses, accuracies) travel in the payload, not the JSON manifest,
// so they round-trip bit-exactly.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = TensorWriter::default();
    for (name, t) in &ckpt.params {
        w.push(format!("param/{name}"), t);
    }
    for (name, t) in &ckpt.buffers {
        w.push(format!("buffer/{name}"), t);
    }
    for (i, (m, v)) in ckpt.adam.m.iter().zip(&ckpt.adam.v).enumerate() {
        w.push(format!("adam.m/{i}"), m);
        w.push(format!("adam.v/{i}"), v);
    }
    let losses: Vec<Real> = ckpt.history.iter().map(|h| h.loss).collect();
    let accs: Vec<Real> = ckpt.history.iter().map(|h| h.train_accuracy).collect();
    w.push_raw("history/loss", &[losses.len()], &losses);
    w.push_raw("history/train_accuracy", &[accs.len()], &accs);

    let manifest = Manifest {
        dtype: REAL_DTYPE.into(),
        config: ckpt.config.clone(),
        schedule: ckpt.schedule.clone(),
        adam: ckpt.adam.config,
        adam_step: ckpt.adam.t,
        position: ckpt.position,
        rng: ckpt.rng,
        params: ckpt.params.iter().map(|(n, _)| n.clone()).collect(),
        buffers: ckpt.buffers.iter().map(|(n, _)| n.clone()).collect(),
        history: ckpt
            .history
            .iter()
            .map(|h| HistoryMeta {
                epoch: h.epoch,
                shard: h.shard,
                streak: h.streak,
                step: h.step,
            })
            .collect(),
        tensors: w.entries,
    };
    container::write_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &manifest, &w.payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (m, payload): (Manifest, _) = container::read_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    if m.dtype != REAL_DTYPE {
        return Err(Error::Corrupt(format!(
            "{}: checkpoint stores {} values, this build uses {REAL_DTYPE}",
            path.display(),
            m.dtype
        )));
    }
    let index: HashMap<&str, &TensorEntry> = m.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let get = |name: &str| -> Result<Tensor> {
        let entry = index
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("{}: missing tensor {name}", path.display())))?;
        container::read_tensor(&payload, entry)
    };
    let params = m
        .params
        .iter()
        .map(|n| Ok((n.clone(), get(&format!("param/{n}"))?)))
        .collect::<Result<Vec<_>>>()?;
    let buffers = m
        .buffers
        .iter()
        .map(|n| Ok((n.clone(), get(&format!("buffer/{n}"))?)))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam {
        config: m.adam,
        t: m.adam_step,
        m: Vec::with_capacity(params.len()),
        v: Vec::with_capacity(params.len()),
    };
    for i in 0..params.len() {
        adam.m.push(get(&format!("adam.m/{i}"))?);
        adam.v.push(get(&format!("adam.v/{i}"))?);
    }
    let losses = get("history/loss")?.into_vec();
    let accs = get("history/train_accuracy")?.into_vec();
    if losses.len() != m.history.len() || accs.len() != m.history.len() {
        return Err(Error::Corrupt(format!("{}: history length mismatch", path.display())));
    }
    let history = m
        .history
        .iter()
        .zip(losses.into_iter().zip(accs))
        .map(|(h, (loss, train_accuracy))| EpochMetrics {
            epoch: h.epoch,
            shard: h.shard,
            streak: h.streak,
            step: h.step,
            loss,
            train_accuracy,
        })
        .collect();
    Ok(Checkpoint {
        config: m.config,
        schedule: m.schedule,
        params,
        buffers,
        adam,
        position: m.position,
        rng: m.rng,
        history,
    })
}
