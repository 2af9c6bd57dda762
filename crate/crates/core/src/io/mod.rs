//! Run configuration files and checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{unix_time, Checkpoint, Header, ManifestEntry, MAGIC, VERSION};
pub use config::{parse_pairs, DatasetKind, RunConfig, KEYS};
