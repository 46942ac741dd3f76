use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::dataset::PatchSet;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model, ModelConfig};
use crate::par;
use crate::rng::Rng;
use crate::tensor::Real;

use super::{softmax_cross_entropy, Adam, AdamConfig, Checkpoint, PlanStep, TrainSchedule};

const EVAL_CHUNK: usize = 256;

/// Metrics for one completed shard-epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Epochs this shard has seen so far, counting across streaks (1-based).
    pub epoch: usize,
    pub shard: usize,
    pub streak: usize,
    /// Index of this shard-epoch in the whole plan (1-based).
    pub step: usize,
    /// Mean mini-batch loss over the epoch.
    pub loss: Real,
    /// Infer-mode accuracy on the shard after the epoch.
    pub train_accuracy: Real,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,shard,streak,loss,train_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.17e},{:.17e}",
            self.epoch, self.shard, self.streak, self.loss, self.train_accuracy
        )
    }
}

/// Where training resumes: the next shard-epoch to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub step: usize,
    pub streak: usize,
    pub shard: usize,
    pub epoch: usize,
    /// Checkpoints are taken at epoch boundaries, so this is always 0.
    pub batch: usize,
}

/// Owns the model and optimizer state and walks the schedule one
/// shard-epoch at a time.
///
/// All randomness derives from the schedule seed through labelled child
/// streams (`init`, `shards`, `shuffle/{step}`, `dropout/{step}`), so any
/// shard-epoch can be replayed from a checkpoint taken before it.
pub struct Trainer {
    model: Model,
    adam: Adam,
    schedule: TrainSchedule,
    plan: Vec<PlanStep>,
    rng: Rng,
    step: usize,
    history: Vec<EpochMetrics>,
    shards: Option<(usize, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(config: ModelConfig, schedule: TrainSchedule, adam: AdamConfig) -> Result<Self> {
        schedule.validate()?;
        let rng = Rng::new(schedule.seed);
        let model = Model::new(config, &rng.child("init"))?;
        let adam = Adam::new(adam, model.named_params().into_iter().map(|(_, p)| p));
        Ok(Trainer {
            plan: schedule.plan(),
            model,
            adam,
            schedule,
            rng,
            step: 0,
            history: Vec::new(),
            shards: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.schedule.validate()?;
        let mut model = Model::new(ckpt.config.clone(), &Rng::new(0))?;
        let expected = model.named_params().len() + model.named_buffers().len();
        if ckpt.params.len() + ckpt.buffers.len() != expected {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {} tensors, model needs {expected}",
                ckpt.params.len() + ckpt.buffers.len()
            )));
        }
        for (name, t) in ckpt.params.iter().chain(&ckpt.buffers) {
            model.set_tensor(name, t.clone())?;
        }
        let adam = ckpt.adam.clone();
        let names = model.named_params();
        if adam.m.len() != names.len()
            || names
                .iter()
                .zip(&adam.m)
                .zip(&adam.v)
                .any(|(((_, p), m), v)| p.value.shape() != m.shape() || m.shape() != v.shape())
        {
            return Err(Error::Corrupt("optimizer state does not match the model".into()));
        }
        let plan = ckpt.schedule.plan();
        if ckpt.position.step > plan.len() {
            return Err(Error::Corrupt(format!("position {} beyond plan", ckpt.position.step)));
        }
        Ok(Trainer {
            model,
            adam,
            schedule: ckpt.schedule.clone(),
            plan,
            rng: ckpt.rng,
            step: ckpt.position.step,
            history: ckpt.history.clone(),
            shards: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            schedule: self.schedule.clone(),
            params: self
                .model
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, p.value.clone()))
                .collect(),
            buffers: self
                .model
                .named_buffers()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            adam: self.adam.clone(),
            position: self.position(),
            rng: self.rng,
            history: self.history.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.plan.len()
    }

    pub fn position(&self) -> Position {
        match self.plan.get(self.step) {
            Some(p) => Position {
                step: self.step,
                streak: p.streak,
                shard: p.shard,
                epoch: p.epoch,
                batch: 0,
            },
            None => Position {
                step: self.step,
                streak: self.schedule.streaks,
                shard: 0,
                epoch: 0,
                batch: 0,
            },
        }
    }

    /// Fits the schedule to `patches` and assigns them to shards: one seeded
    /// global shuffle, then contiguous slices.
    fn ensure_shards(&mut self, patches: &PatchSet) -> Result<()> {
        if matches!(&self.shards, Some((n, _)) if *n == patches.len()) {
            return Ok(());
        }
        let fitted = self.schedule.fit_to(patches.len())?;
        if fitted != self.schedule {
            if self.step > 0 {
                return Err(Error::InvalidConfig(
                    "patch set no longer matches the schedule this run started with".into(),
                ));
            }
            info!(
                "scaling shard size down from {} to {} to fit {} patches",
                self.schedule.shard_size,
                fitted.shard_size,
                patches.len()
            );
            self.schedule = fitted;
            self.plan = self.schedule.plan();
        }
        let mut order: Vec<usize> = (0..patches.len()).collect();
        self.rng.child("shards").shuffle(&mut order);
        let size = self.schedule.shard_size;
        let shards = (0..self.schedule.shard_count)
            .map(|s| order[s * size..(s + 1) * size].to_vec())
            .collect();
        self.shards = Some((patches.len(), shards));
        Ok(())
    }

    /// Runs the next shard-epoch; `None` once the plan is exhausted.
    pub fn step_epoch(&mut self, patches: &PatchSet) -> Result<Option<EpochMetrics>> {
        self.ensure_shards(patches)?;
        let Some(&PlanStep { streak, shard, epoch }) = self.plan.get(self.step) else {
            return Ok(None);
        };
        let mut indices = self.shards.as_ref().unwrap().1[shard].clone();
        self.rng.child(&format!("shuffle/{}", self.step)).shuffle(&mut indices);
        let mut dropout_rng = self.rng.child(&format!("dropout/{}", self.step));

        let diverged = |batch: usize| Error::Divergence {
            streak,
            shard,
            epoch,
            batch,
        };
        let mut loss_sum = 0.0;
        let batches = indices.len() / self.schedule.batch_size;
        for (b, chunk) in indices.chunks_exact(self.schedule.batch_size).enumerate() {
            let (x, y) = patches.batch(chunk);
            let logits = self
                .model
                .forward(&x, Mode::Train, &mut dropout_rng)
                .map_err(|e| if is_non_finite(&e) { diverged(b) } else { e })?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y).map_err(|e| match e {
                Error::NonFinite(_) => diverged(b),
                other => other,
            })?;
            self.model
                .backward(&grad)
                .map_err(|e| if is_non_finite(&e) { diverged(b) } else { e })?;
            let mut params = self.model.params_mut();
            self.adam
                .step(&mut params)
                .map_err(|e| if is_non_finite(&e) { diverged(b) } else { e })?;
            loss_sum += loss;
            debug!("step {} batch {b}: loss {loss:.6}", self.step);
        }
        let train_accuracy = accuracy(&self.model, patches, &indices)?;
        let metrics = EpochMetrics {
            epoch: streak * self.schedule.epochs_per_shard + epoch + 1,
            shard,
            streak,
            step: self.step + 1,
            loss: loss_sum / batches as Real,
            train_accuracy,
        };
        self.history.push(metrics);
        self.step += 1;
        Ok(Some(metrics))
    }

    /// Runs to the end of the plan, calling `on_epoch` after each
    /// shard-epoch. Returning `false` from the callback stops early.
    pub fn run(
        &mut self,
        patches: &PatchSet,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<bool>,
    ) -> Result<()> {
        while let Some(m) = self.step_epoch(patches)? {
            if !on_epoch(self, &m)? {
                break;
            }
        }
        Ok(())
    }
}

fn is_non_finite(e: &Error) -> bool {
    match e {
        Error::NonFinite(_) => true,
        Error::Layer { source, .. } => is_non_finite(source),
        _ => false,
    }
}

/// Fraction of `indices` whose infer-mode argmax matches the label.
pub(crate) fn accuracy(model: &Model, patches: &PatchSet, indices: &[usize]) -> Result<Real> {
    if indices.is_empty() {
        return Err(Error::Empty("accuracy over zero patches"));
    }
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_CHUNK).collect();
    let correct = par::map_range(model.exec(), chunks.len(), |i| -> Result<usize> {
        let (x, _) = patches.batch(chunks[i]);
        let logits = model.predict(&x)?;
        Ok(logits
            .argmax_rows()
            .iter()
            .zip(chunks[i])
            .filter(|(&pred, &idx)| pred == patches.records[idx].label.index())
            .count())
    });
    let mut total = 0;
    for c in correct {
        total += c?;
    }
    Ok(total as Real / indices.len() as Real)
}
