use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order in which shard-epochs are visited within a streak.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShardOrder {
    /// All epochs of shard 0, then all epochs of shard 1, …
    #[default]
    Sequential,
    /// One epoch of each shard in turn, repeated `epochs_per_shard` times.
    Interleaved,
}

fn default_checkpoint_every() -> usize {
    0
}

/// Training data is split into `shard_count` shards of `shard_size`
/// patches. A streak trains every shard for `epochs_per_shard` epochs, and
/// the whole streak repeats `streaks` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub shard_count: usize,
    pub shard_size: usize,
    pub epochs_per_shard: usize,
    pub streaks: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub order: ShardOrder,
    /// Shrink `shard_size` to fit the available patches instead of failing.
    #[serde(default)]
    pub allow_scale_down: bool,
    /// Emit a checkpoint every this many shard-epochs (0: only at the end).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

/// One shard-epoch of the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub streak: usize,
    pub shard: usize,
    /// Epoch index within this shard and streak, 0-based.
    pub epoch: usize,
}

impl Default for TrainSchedule {
    /// 5 shards of 40000 patches, 500 epochs each, 3 streaks, batches of 50.
    fn default() -> Self {
        TrainSchedule {
            shard_count: 5,
            shard_size: 40_000,
            epochs_per_shard: 500,
            streaks: 3,
            batch_size: 50,
            seed: 0,
            order: ShardOrder::Sequential,
            allow_scale_down: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("shard_count", self.shard_count),
            ("shard_size", self.shard_size),
            ("epochs_per_shard", self.epochs_per_shard),
            ("streaks", self.streaks),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("schedule.{name} must be positive")));
        }
        if !self.shard_size.is_multiple_of(self.batch_size) {
            return Err(Error::InvalidConfig(format!(
                "shard_size {} is not a multiple of batch_size {}",
                self.shard_size, self.batch_size
            )));
        }
        Ok(())
    }

    /// Patches consumed by the full schedule.
    pub fn required_patches(&self) -> usize {
        self.shard_count * self.shard_size
    }

    /// Number of epochs each shard sees over all streaks.
    pub fn epochs_per_shard_total(&self) -> usize {
        self.epochs_per_shard * self.streaks
    }

    pub fn total_shard_epochs(&self) -> usize {
        self.shard_count * self.epochs_per_shard_total()
    }

    /// Checks the schedule against `available` patches, shrinking the shard
    /// size (to a multiple of the batch size) when scale-down is allowed.
    pub fn fit_to(&self, available: usize) -> Result<TrainSchedule> {
        self.validate()?;
        if available >= self.required_patches() {
            return Ok(self.clone());
        }
        if !self.allow_scale_down {
            return Err(Error::InsufficientPatches {
                needed: self.required_patches(),
                available,
            });
        }
        let shard_size = available / self.shard_count / self.batch_size * self.batch_size;
        if shard_size == 0 {
            return Err(Error::InsufficientPatches {
                needed: self.shard_count * self.batch_size,
                available,
            });
        }
        Ok(TrainSchedule {
            shard_size,
            ..self.clone()
        })
    }

    /// Every shard-epoch in execution order.
    pub fn plan(&self) -> Vec<PlanStep> {
        let mut steps = Vec::with_capacity(self.total_shard_epochs());
        for streak in 0..self.streaks {
            match self.order {
                ShardOrder::Sequential => {
                    for shard in 0..self.shard_count {
                        for epoch in 0..self.epochs_per_shard {
                            steps.push(PlanStep { streak, shard, epoch });
                        }
                    }
                }
                ShardOrder::Interleaved => {
                    for epoch in 0..self.epochs_per_shard {
                        for shard in 0..self.shard_count {
                            steps.push(PlanStep { streak, shard, epoch });
                        }
                    }
                }
            }
        }
        steps
    }

    /// Human-readable summary of the plan.
    pub fn describe(&self) -> String {
        format!(
            "{} streak(s) x {} shard(s) of {} patches x {} epoch(s) per shard ({} epochs per shard in total, {} shard-epochs, {} batches of {} per epoch, {:?} shard order)",
            self.streaks,
            self.shard_count,
            self.shard_size,
            self.epochs_per_shard,
            self.epochs_per_shard_total(),
            self.total_shard_epochs(),
            self.shard_size / self.batch_size.max(1),
            self.batch_size,
            self.order,
        )
    }
}
