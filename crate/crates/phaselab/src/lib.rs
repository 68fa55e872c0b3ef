//! phaselab — a desk-scale laboratory for mapping preference-optimization
//! phase diagrams.
//!
//! The crate trains a tiny deterministic transformer with low-rank adapters
//! under a swept preference-strength parameter β, measures capability-probe
//! margins and training roughness at every grid point, detects pockets,
//! collapses and hysteresis, and runs the associated statistical battery
//! (Pearson, paired t, Cohen's d_z, exact Wilcoxon signed-rank).
//!
//! Everything is bit-reproducible: runs are keyed by content hashes and
//! counter-based random streams, run logs are canonical JSON, and analysis
//! is a pure function of the log directory.

pub mod adapter;
pub mod checkpoint;
pub mod dpo;
pub mod graph;
pub mod model;
pub mod optim;
pub mod policy;
pub mod probes;
pub mod runlog;
pub mod sweep;
pub mod rng;
pub mod stats;
pub mod tensor;
