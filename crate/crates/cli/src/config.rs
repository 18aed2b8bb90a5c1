//! Versioned JSON documents read and written by the commands.

use std::fs;
use std::path::Path;

use callrate::ciir::{CiirModel, CiirParams, CiirSpec};
use callrate::factor::{FactorModelDoc, FitReport, SmoothingParams, Variant};
use callrate::metrics::EvalModel;
use callrate::synth::SyntheticSpec;
use callrate::{Error, Result};
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Parses a config file; unreadable files and schema violations are configuration errors.
pub fn read_config<T: DeserializeOwned + Versioned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value: T = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if value.version() != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            value.version()
        )));
    }
    Ok(value)
}

pub trait Versioned {
    fn version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn version(&self) -> u32 {
                self.version
            }
        })*
    };
}

versioned!(SynthConfig, FitFactorConfig, FitCiirConfig, EvaluateConfig, QueueConfig, ModelFile);

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub version: u32,
    pub start: NaiveDate,
    pub days: usize,
    #[serde(default = "default_rate")]
    pub mean_rate: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub ciir: Option<CiirModel>,
}

fn default_rate() -> f64 {
    24.0
}

fn default_k() -> usize {
    2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFactorConfig {
    pub version: u32,
    pub k: usize,
    pub variant: Variant,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
    #[serde(default)]
    pub hour_dim: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCiirConfig {
    pub version: u32,
    pub ciir: CiirSpec,
    #[serde(default)]
    pub init: Option<CiirParams>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub version: u32,
    pub models: Vec<EvalModel>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    pub version: u32,
    pub q: Vec<f64>,
    pub nu: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(default = "default_j")]
    pub j: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_s_min")]
    pub s_min: usize,
}

fn default_j() -> usize {
    25_000
}

fn default_replications() -> usize {
    100
}

fn default_s_min() -> usize {
    1
}

/// Ground truth written next to synthetic counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub version: u32,
    pub spec: SyntheticSpec,
    /// True `μ_t`, day-major.
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiirFitDoc {
    pub model: CiirModel,
    pub loglik: f64,
    pub init_loglik: f64,
    pub converged: bool,
}

/// Fitted model: factor component, its fit trace and an optional CIIR component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub factor: FactorModelDoc,
    pub fit_report: FitReport,
    pub in_sample_deviance: f64,
    #[serde(default)]
    pub ciir: Option<CiirFitDoc>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub k: usize,
    pub iterations: usize,
    pub converged: bool,
    pub stored_deviance: f64,
    pub recomputed_deviance: f64,
    pub smoothing: SmoothingParams,
    pub ciir: Option<CiirFitDoc>,
}
