//! Anomalous sound detection with a normalizing flow whose latent space is
//! split into a velocity-carrying block and a velocity-invariant remainder.
//!
//! Pipeline: [`synth`] generates slide-rail-like clips, [`features`] turns
//! them into standardized log-mel patches, [`flow`] and [`vae`] are the
//! models, [`prior`] holds the likelihoods and scores, [`train`] the
//! optimisation loops and [`eval`] the AUC and velocity reports.

mod binio;
pub mod checkpoint;
pub mod config;
mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod prior;
pub mod synth;
pub mod train;
pub mod vae;
pub mod wav;

pub use error::{Error, Result};
