//! Joint MR image reconstruction and segmentation from under-sampled k-space.
//!
//! The crate covers the whole pipeline: synthetic phantoms and dataset files
//! ([`phantom`]), the undersampling forward model ([`kspace`]), the cascaded
//! reconstruction network ([`recon`]), the segmentation network ([`seg`]),
//! joint training with epoch-dependent loss weights and alternating teacher
//! forcing ([`trainer`]), evaluation metrics ([`metrics`]) and the
//! command-line front end ([`cli`]).

pub mod arrayfile;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod kspace;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod real;
pub mod recon;
pub mod schedule;
pub mod seg;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
