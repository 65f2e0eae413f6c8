//! Task-aware evaluation of action-conditional glucose forecasters.
//!
//! The crate covers the whole benchmark pipeline: harmonizing raw device
//! logs onto a 5-minute grid, forecasting baselines, pointwise and
//! risk-weighted error metrics, alarm gating, a deterministic virtual-patient
//! simulator for paired counterfactual episodes, counterfactual scoring and
//! report generation.

pub mod bench;
pub mod counterfactual;
pub mod error;
pub mod forecast;
pub mod gating;
pub mod harmonize;
pub mod io;
pub mod risk;
pub mod report;
pub mod sim;
pub mod timeseries;

pub use error::{Error, Result};
