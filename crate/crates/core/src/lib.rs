//! Monitoring toolkit for deployed predictive models.
//!
//! * [`data`]: dataset ingestion and nonconformity scores (absolute
//!   residuals, weak-label min-scores).
//! * [`conformal`]: split-conformal p-values, randomization, region p-values
//!   and Z-scores.
//! * [`regions`]: partition, interval and nearest-neighbour ball families.
//! * [`detect`]: step-up detection of degraded regions with FDR control.
//! * [`identify`]: the penalized multi-scale scan.
//! * [`refit`]: two-step refitting, SURE-tuned baselines and local-model
//!   aggregation.
//! * [`sim`]: Gaussian-sequence instances and reproducible sweeps.

pub mod conformal;
pub mod data;
pub mod detect;
pub mod error;
pub mod identify;
pub mod normal;
pub mod refit;
pub mod regions;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
