//! Forecast residuals, RMSE summaries, Poisson deviance, the simple-prediction (SP)
//! baseline, and the out-of-sample evaluation harness.

use std::collections::BTreeMap;
use std::io;

use chrono::{Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ciir::{filter, fit_ciir, CiirModel, CiirSpec};
use crate::data::{build_design, segment_blocks, HourlyCountSeries, HOURS_PER_DAY};
use crate::error::{Error, Result};
use crate::factor::{fit_factor_model, FactorConfig, FactorModel, FitReport, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Multiplicative,
    Pearson,
    Anscombe,
}

pub fn residual(kind: ResidualKind, y: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Data(format!("forecast intensity {lambda} must be positive")));
    }
    Ok(match kind {
        ResidualKind::Multiplicative => y / lambda - 1.0,
        ResidualKind::Pearson => (y - lambda) / lambda.sqrt(),
        ResidualKind::Anscombe => 1.5 * (y.powf(2.0 / 3.0) - lambda.powf(2.0 / 3.0)) / lambda.powf(1.0 / 6.0),
    })
}

/// Root mean squared residual over `index`.
pub fn rmse(kind: ResidualKind, y: &[f64], lambda: &[f64], index: &[usize]) -> Result<f64> {
    if index.is_empty() {
        return Err(Error::Data("RMSE over an empty index set".into()));
    }
    if y.len() != lambda.len() {
        return Err(Error::Config("observations and forecasts differ in length".into()));
    }
    let mut sum = 0.0;
    for &t in index {
        let v = y.get(t).ok_or_else(|| Error::Data(format!("index {t} outside the series")))?;
        sum += residual(kind, *v, lambda[t])?.powi(2);
    }
    Ok((sum / index.len() as f64).sqrt())
}

/// `2 Σ { y log(y/μ) − (y − μ) }`, the first term taken as zero when `y = 0`.
pub fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    crate::spline::poisson_deviance_terms(y, mu)
}

/// Reference offsets of the SP baseline: the previous two weeks and the same and
/// previous week one 52-week year earlier.
pub const SP_OFFSETS: [u64; 4] = [7, 14, 364, 371];

/// SP forecast for `hour` (0-based) of `date`: the mean of the counts at the four
/// reference slots that are retained days of `history`. References on excluded
/// days, or outside the record, are dropped.
pub fn simple_prediction(history: &HourlyCountSeries, date: NaiveDate, hour: usize) -> Result<f64> {
    if hour >= HOURS_PER_DAY {
        return Err(Error::Config(format!("hour {hour} outside 0..24")));
    }
    let refs: Vec<f64> = SP_OFFSETS
        .iter()
        .filter_map(|&off| date.checked_sub_days(Days::new(off)))
        .filter_map(|d| history.count_on(d, hour))
        .map(f64::from)
        .collect();
    if refs.is_empty() {
        return Err(Error::Data(format!("no simple-prediction reference available for {date} hour {}", hour + 1)));
    }
    Ok(refs.iter().sum::<f64>() / refs.len() as f64)
}

/// Factor-model settings shared by FM and FM+CIIR rows.
type FactorKey = (Variant, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalModel {
    /// Simple-prediction baseline.
    Sp,
    Fm { variant: Variant, k: usize },
    FmCiir { variant: Variant, k: usize, ciir: CiirSpec },
}

impl EvalModel {
    pub fn id(&self) -> String {
        match self {
            EvalModel::Sp => "SP".into(),
            EvalModel::Fm { .. } => "FM".into(),
            EvalModel::FmCiir { ciir, .. } => format!("FM+{}", ciir.variant.name()),
        }
    }

    fn factor_key(&self) -> Option<FactorKey> {
        match *self {
            EvalModel::Sp => None,
            EvalModel::Fm { variant, k } | EvalModel::FmCiir { variant, k, .. } => Some((variant, k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub constraints: Option<bool>,
    pub smoothing: Option<bool>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    /// `None` when the model cannot produce out-of-sample forecasts.
    pub rmsme: Option<f64>,
    pub rmspe: Option<f64>,
    pub rmsae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub k: usize,
    pub report: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiirTrace {
    pub model: String,
    pub variant: Variant,
    #[serde(rename = "K")]
    pub k: usize,
    pub fitted: CiirModel,
    pub train_loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Evaluated hours (test hours minus the first hour of each test block).
    pub n_eval: usize,
    pub fits: Vec<FitTrace>,
    pub ciir: Vec<CiirTrace>,
}

impl EvalReport {
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["model", "constraints", "smoothing", "K", "rmsme", "rmspe", "rmsae"])?;
        let yn = |b: Option<bool>| b.map(|v| if v { "yes" } else { "no" }.to_string()).unwrap_or_else(|| "NA".into());
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                yn(r.constraints),
                yn(r.smoothing),
                r.k.map(|k| k.to_string()).unwrap_or_else(|| "NA".into()),
                num(r.rmsme),
                num(r.rmspe),
                num(r.rmsae),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Forecasts of every model over the test series, plus the index set they are scored on.
#[derive(Debug, Clone)]
pub struct Forecasts {
    pub lambda: Vec<Option<Vec<f64>>>,
    pub index: Vec<usize>,
    pub fits: Vec<FitTrace>,
    pub ciir: Vec<CiirTrace>,
}

/// Out-of-sample intensities for each model over `test`:
/// SP from the merged record, FM from calendar prediction (`λ̂ = μ̂`), FM+CIIR by fitting
/// the CIIR on the training residuals and filtering the test year one step ahead on
/// the observed counts.
pub fn forecast_models(
    models: &[EvalModel],
    train: &HourlyCountSeries,
    test: &HourlyCountSeries,
    seed: u64,
) -> Result<Forecasts> {
    if train.day_dates().iter().any(|d| test.position(*d).is_some()) {
        return Err(Error::Data("training and test series overlap".into()));
    }
    let history = train.merge(test)?;
    let keys: Vec<FactorKey> = {
        let mut k: Vec<FactorKey> = models.iter().filter_map(|m| m.factor_key()).collect();
        k.sort();
        k.dedup();
        k
    };
    let design = if keys.iter().any(|k| k.0.is_constrained()) { Some(build_design(train)?) } else { None };
    let fitted: Vec<(FactorKey, Result<(FactorModel, FitReport)>)> = keys
        .par_iter()
        .map(|&key| (key, fit_factor_model(train, design.as_ref(), &FactorConfig::new(key.1, key.0))))
        .collect();
    let mut fits_by_key = BTreeMap::new();
    for (key, f) in fitted {
        fits_by_key.insert(key, f?);
    }

    let y_test = test.values();
    let test_blocks = segment_blocks(test);
    let index: Vec<usize> = (0..y_test.len()).filter(|&t| !test_blocks.is_block_start(t)).collect();
    let test_cov = test.covariates();
    let y_train = train.values();
    let train_blocks = segment_blocks(train);

    let results = models
        .par_iter()
        .map(|m| -> Result<(Option<Vec<f64>>, Option<CiirTrace>)> {
            let Some(key) = m.factor_key() else {
                let mut out = Vec::with_capacity(y_test.len());
                for &d in test.day_dates() {
                    for h in 0..HOURS_PER_DAY {
                        out.push(simple_prediction(&history, d, h)?);
                    }
                }
                return Ok((Some(out), None));
            };
            let (model, _) = &fits_by_key[&key];
            let mu = match model.predict_aligned(&test_cov) {
                Ok(mu) => flatten_day_major(&mu),
                Err(Error::Config(_)) => return Ok((None, None)),
                Err(e) => return Err(e),
            };
            let EvalModel::FmCiir { ciir, .. } = m else {
                return Ok((Some(mu), None));
            };
            let mu_train = flatten_day_major(&model.fitted_mu());
            let fit = fit_ciir(ciir, &y_train, &mu_train, &train_blocks, None, seed)?;
            let lambda = filter(ciir, &fit.params, &y_test, &mu, &test_blocks)?.lambda;
            let trace = CiirTrace {
                model: m.id(),
                variant: key.0,
                k: key.1,
                fitted: CiirModel { spec: *ciir, params: fit.params },
                train_loglik: fit.loglik,
                converged: fit.converged,
            };
            Ok((Some(lambda), Some(trace)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lambda, ciir): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let ciir = ciir.into_iter().flatten().collect();
    let fits = fits_by_key
        .into_iter()
        .map(|((variant, k), (_, report))| FitTrace { variant, k, report })
        .collect();
    Ok(Forecasts { lambda, index, fits, ciir })
}

pub fn flatten_day_major(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let (d, h) = m.shape();
    (0..d * h).map(|t| m[(t / h, t % h)]).collect()
}

/// Table of RMSME / RMSPE / RMSAE per model on the test set.
pub fn evaluate(models: &[EvalModel], train: &HourlyCountSeries, test: &HourlyCountSeries, seed: u64) -> Result<EvalReport> {
    let fc = forecast_models(models, train, test, seed)?;
    evaluate_forecasts(models, test, &fc)
}

/// Scores precomputed forecasts of `models` against `test`.
pub fn evaluate_forecasts(models: &[EvalModel], test: &HourlyCountSeries, fc: &Forecasts) -> Result<EvalReport> {
    if fc.lambda.len() != models.len() {
        return Err(Error::Config("one forecast stream per model is required".into()));
    }
    let y = test.values();
    let mut rows = Vec::with_capacity(models.len());
    for (m, lam) in models.iter().zip(&fc.lambda) {
        let (constraints, smoothing, k) = match *m {
            EvalModel::Sp => (None, None, None),
            EvalModel::Fm { variant, k } | EvalModel::FmCiir { variant, k, .. } => {
                (Some(variant.is_constrained()), Some(variant.is_smoothed()), Some(k))
            }
        };
        let score = |kind| lam.as_ref().map(|l| rmse(kind, &y, l, &fc.index)).transpose();
        rows.push(EvalRow {
            model: m.id(),
            constraints,
            smoothing,
            k,
            rmsme: score(ResidualKind::Multiplicative)?,
            rmspe: score(ResidualKind::Pearson)?,
            rmsae: score(ResidualKind::Anscombe)?,
        });
    }
    Ok(EvalReport { rows, n_eval: fc.index.len(), fits: fc.fits.clone(), ciir: fc.ciir.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeRow {
    /// Improvement from `k` to `k + 1` factors.
    #[serde(rename = "K")]
    pub k: usize,
    pub deviance: f64,
    pub next_deviance: f64,
    pub improvement: f64,
    /// Improvement as a percentage of the deviance at `k`.
    pub pct_improvement: f64,
    /// Improvement relative to the `1 → 2` improvement.
    pub relative_to_first: f64,
}

/// Marginal deviance improvements from in-sample deviances at consecutive `K`.
pub fn scree(deviance_by_k: &[(usize, f64)]) -> Result<Vec<ScreeRow>> {
    let mut v = deviance_by_k.to_vec();
    v.sort_by_key(|p| p.0);
    if v.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
        return Err(Error::Config("scree needs consecutive K values".into()));
    }
    let first = v.windows(2).next().map(|w| w[0].1 - w[1].1);
    Ok(v.windows(2)
        .map(|w| {
            let imp = w[0].1 - w[1].1;
            ScreeRow {
                k: w[0].0,
                deviance: w[0].1,
                next_deviance: w[1].1,
                improvement: imp,
                pct_improvement: 100.0 * imp / w[0].1,
                relative_to_first: first.map(|f| imp / f).unwrap_or(f64::NAN),
            }
        })
        .collect())
}
