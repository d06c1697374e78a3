//! Post-training analysis: linear probes on frozen representations, winner
//! sparsity statistics and feature-map export.

mod maps;
mod probe;
mod sparsity;

pub use maps::{block_overlap, feature_map_export, write_pgm, FeatureMaps};
pub use probe::{
    linear_probe, probe_accuracy, probe_report, LinearProbe, ProbeReport, ProbeTarget, PROBE_MAX_ITER, PROBE_TOL,
};
pub use sparsity::{sparsity_report, LayerSparsity, SparsityReport, DEAD_BLOCK_SHARE, GATE_BINS};
