//! Analytic simulator for a 16-cube near-memory attention accelerator.
//!
//! The crate is layered bottom-up:
//!
//! * [`workload`]: attention model descriptions, stage GEMMs, roofline math.
//! * [`sa_model`]: per-cube systolic-array tiling, utilization and kernel time.
//! * [`fabric`]: cube mesh, die-to-die links, collective cost model.
//! * [`mapper`]: placements and schedules for TP16, HP and HP_RO.
//! * [`numerics`]: double-precision check that the distributed softmax
//!   flows reproduce exact attention followed by the output projection.
//! * [`engine`]: end-to-end latency, energy, ablations and sweeps.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod engine;
pub mod error;
pub mod fabric;
pub mod mapper;
pub mod numerics;
pub mod par;
pub mod sa_model;
pub mod workload;

pub use error::{Error, Result};
