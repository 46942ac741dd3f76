//! Loss, optimizer, shard/streak schedule and checkpoints.

mod adam;
mod checkpoint;
mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_update, Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::softmax_cross_entropy;
pub use schedule::{PlanStep, ShardOrder, TrainSchedule};
pub use trainer::{EpochMetrics, Position, Trainer};
