//! Synthetic instruction tasks, ground-truth masks and federated splits.

mod partition;
mod tasks;
pub mod vocab;

pub use partition::{partition, PartitionScheme, PartitionSpec, Shard, Weight};
pub use tasks::{generate_mix, generate_task, public_dataset, required_vocab, Sample, TaskKind, TaskMix, TaskParams};
