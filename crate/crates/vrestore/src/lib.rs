//! Two-stage compressed-video restoration at desk scale: a PQF-guided
//! recurrent enhancement network trained with a progressive block-growth
//! schedule, cascaded into a windowed-attention per-frame refiner, with
//! dihedral self-ensemble inference and a PSNR evaluation harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod flow;
pub mod layers;
pub mod params;
pub mod stage1;
pub mod stage2;
pub mod synth;
pub mod tensorize;
pub mod train;

pub use error::{Error, Result};
