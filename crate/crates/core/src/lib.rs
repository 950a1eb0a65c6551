//! Federated evaluation and calibration of binary classifiers under
//! secure aggregation, distributed DP and local DP.
//!
//! Clients hold `(score, label)` pairs. Each privacy regime produces noisy
//! hierarchical counts over a dyadic score grid, from which quantile
//! histograms, precision/recall/accuracy, ROC AUC and calibration maps are
//! estimated.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod formats;
pub mod harness;
pub mod hierarchy;
pub mod metrics;
pub mod oracle;
pub mod privacy;
pub mod rng;
pub mod types;

pub use error::{DegenerateEstimate, Error, Result};
pub use types::{
    ClientShard, Label, LabeledScore, NoisyCount, PrivacySpec, Regime, Simulation, Spike,
    WellBehavedSpec,
};
