//! Forecasting and simulation toolkit for hourly count-valued arrival processes.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`data`] turns timestamped call records into a day × hour count matrix with
//!    calendar covariates and contiguous observation blocks.
//! 2. [`factor`] fits the log-linear latent factor model `log M = H B Fᵀ`, optionally
//!    with calendar constraints on the loadings and penalized splines ([`spline`])
//!    on both the intraday factors and the week-of-year loadings.
//! 3. [`ciir`] models the multiplicative deviation `η_t` of the conditional intensity
//!    from the factor fit with integer-GARCH style recursions, so that
//!    `λ_t = μ_t η_t`.
//! 4. [`metrics`] and [`queue`] score forecasts statistically (residual RMSE,
//!    deviance) and operationally (hourly M/M/s staffing cost).
//!
//! [`synth`] generates data with a known truth for all of the above.

pub mod ciir;
pub mod data;
pub mod error;
pub mod factor;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod queue;
pub mod rng;
pub mod spline;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
