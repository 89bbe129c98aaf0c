//! Training, evaluation and file-format plumbing around the networks:
//! run configuration, dataset manifests, the event log, checkpoints, the
//! critic/generator step schedule, tiled full-volume inference and the
//! two-phase trainer itself.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod events;
pub mod infer;
pub mod schedule;
pub mod trainer;
