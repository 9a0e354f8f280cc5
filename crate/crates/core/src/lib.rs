//! Voxel-wise uncertainty maps from Monte Carlo segmentation samples.
//!
//! Class-overlap divergences between per-voxel sample histograms sit
//! alongside the usual predictive entropy. The crate also provides a
//! volume container format, segmentation metrics, a counterexample harness
//! contrasting the two estimators, and a small mean-teacher simulator that
//! uses either one to gate its consistency loss.

pub mod cli;
pub mod counterexample;
pub mod divergence;
pub mod histogram;
pub mod io;
pub mod metrics;
pub mod sim;
pub mod uncertainty;
pub mod volume;
