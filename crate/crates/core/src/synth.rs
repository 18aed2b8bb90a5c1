//! Synthetic hourly counts with a known calendar-constrained factor structure and an
//! optional CIIR process.
//!
//! The log-mean surface is `log μ_ij = Σ_k φ_k(j) (a_k(dow_i) + w_k(woy_i))` with
//! harmonic hour shapes `φ_k` and smooth cyclic week curves `w_k`, rescaled so the
//! average intensity equals `mean_rate`. When a CIIR is configured, `η` is driven by its
//! own realized residuals: `y_t ~ Poisson(μ_t η_t)`, then `ê_t = y_t / μ_t`.

use chrono::{Days, NaiveDate};
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::ciir::{eta_step, hour_label, CiirModel};
use crate::data::{Covariates, HourlyCountSeries, DAYS_PER_WEEK, HOURS_PER_DAY};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Purpose};

pub const MAX_TRUE_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub start: NaiveDate,
    pub days: usize,
    #[serde(default = "default_rate")]
    pub mean_rate: f64,
    /// Number of true factors, 1..=4.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub ciir: Option<CiirModel>,
    pub seed: u64,
}

fn default_rate() -> f64 {
    24.0
}

fn default_k() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub series: HourlyCountSeries,
    /// True `μ_t`, day-major.
    pub mu: Vec<f64>,
    /// True `η_t` (all ones without a CIIR).
    pub eta: Vec<f64>,
}

/// Hour shape of true factor `k` at 1-based hour `j`.
pub fn hour_shape(k: usize, j: usize) -> f64 {
    let x = 2.0 * std::f64::consts::PI * (j as f64 - 1.0) / HOURS_PER_DAY as f64;
    match k {
        0 => 1.0,
        1 => (x - 2.2).sin(),
        2 => (2.0 * x + 0.5).cos(),
        _ => (3.0 * x - 1.0).sin(),
    }
}

/// Day-of-week and week-of-year loading components of true factor `k`.
pub fn loading(k: usize, c: Covariates) -> f64 {
    let dow = c.day_of_week as usize - 1;
    let week = 2.0 * std::f64::consts::PI * (c.week_of_year as f64 - 1.0) / 53.0;
    let weekend = if dow >= 5 { 1.0 } else { 0.0 };
    match k {
        0 => 0.08 * weekend - 0.03 * (dow as f64 / (DAYS_PER_WEEK - 1) as f64) + 0.08 * week.cos(),
        1 => 0.55 - 0.12 * weekend + 0.05 * week.sin(),
        2 => 0.14 + 0.06 * ((dow % 3) as f64 - 1.0) + 0.04 * (2.0 * week).cos(),
        _ => 0.10 + 0.08 * (2.0 * std::f64::consts::PI * dow as f64 / DAYS_PER_WEEK as f64).sin() + 0.05 * (3.0 * week).cos(),
    }
}

/// True intensity for the given days (d × 24, day-major), before CIIR inflation.
pub fn true_mu(dates: &[NaiveDate], k: usize, mean_rate: f64) -> Vec<f64> {
    let mut log_mu: Vec<f64> = Vec::with_capacity(dates.len() * HOURS_PER_DAY);
    for &d in dates {
        let c = Covariates::from_date(d);
        for j in 1..=HOURS_PER_DAY {
            log_mu.push((0..k).map(|kk| hour_shape(kk, j) * loading(kk, c)).sum());
        }
    }
    if log_mu.is_empty() {
        return log_mu;
    }
    let mean: f64 = log_mu.iter().map(|v| v.exp()).sum::<f64>() / log_mu.len() as f64;
    let shift = (mean_rate / mean).ln();
    log_mu.iter().map(|v| (v + shift).exp()).collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if !(1..=MAX_TRUE_K).contains(&spec.k) {
        return Err(Error::Config(format!("true K must be in 1..={MAX_TRUE_K}")));
    }
    if !(spec.mean_rate > 0.0 && spec.mean_rate.is_finite()) {
        return Err(Error::Config("mean rate must be positive".into()));
    }
    if let Some(m) = &spec.ciir {
        m.spec.validate()?;
        m.params.validate()?;
        if m.params.variant() != m.spec.variant {
            return Err(Error::Config("CIIR parameters do not match the variant".into()));
        }
    }
    let dates: Vec<NaiveDate> = (0..spec.days).map(|i| spec.start + Days::new(i as u64)).collect();
    let mu = true_mu(&dates, spec.k, spec.mean_rate);
    let mut rng = stream_rng(spec.seed, Purpose::Synth, 0, 0);
    let mut eta = vec![1.0; mu.len()];
    let mut y = vec![0u32; mu.len()];
    for t in 0..mu.len() {
        if t > 0 {
            if let Some(m) = &spec.ciir {
                eta[t] = eta_step(&m.spec, &m.params, y[t - 1] as f64 / mu[t - 1], eta[t - 1], hour_label(t))?;
            }
        }
        let rate = mu[t] * eta[t];
        y[t] = Poisson::new(rate).map_err(|e| Error::Numerical(e.to_string()))?.sample(&mut rng) as u32;
    }
    let counts = y
        .chunks(HOURS_PER_DAY)
        .map(|c| {
            let mut row = [0u32; HOURS_PER_DAY];
            row.copy_from_slice(c);
            row
        })
        .collect();
    let series = HourlyCountSeries::new(dates, counts, Default::default())?;
    Ok(SyntheticData { series, mu, eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ciir::{CiirParams, CiirSpec, CiirVariant};

    fn spec(days: usize, ciir: Option<CiirModel>) -> SyntheticSpec {
        SyntheticSpec { start: NaiveDate::from_ymd_opt(2007, 1, 1).unwrap(), days, mean_rate: 24.0, k: 2, ciir, seed: 11 }
    }

    #[test]
    fn mean_rate_and_determinism() {
        let a = generate(&spec(364, None)).unwrap();
        let b = generate(&spec(364, None)).unwrap();
        assert_eq!(a, b);
        let mean = a.mu.iter().sum::<f64>() / a.mu.len() as f64;
        assert!((mean - 24.0).abs() < 1e-9);
        assert!(a.eta.iter().all(|&e| e == 1.0));
    }

    #[test]
    fn empty_and_invalid() {
        let e = generate(&spec(0, None)).unwrap();
        assert!(e.series.is_empty() && e.mu.is_empty());
        let bad = CiirModel { spec: CiirSpec::new(CiirVariant::IntGarch), params: CiirParams::IntGarch { alpha: 0.6, beta: 0.6 } };
        assert!(generate(&spec(10, Some(bad))).is_err());
    }

    #[test]
    fn poisson_dispersion_on_constant_mean() {
        // with K = 1 and no CIIR the within-day intensity is constant
        let mut s = spec(2000, None);
        s.k = 1;
        let d = generate(&s).unwrap();
        let mut ratios = Vec::new();
        for i in 0..d.series.n_days() {
            let ys: Vec<f64> = (0..24).map(|j| d.series.count(i, j) as f64).collect();
            let m = ys.iter().sum::<f64>() / 24.0;
            let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 23.0;
            ratios.push(v / m);
        }
        let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((avg - 1.0).abs() < 0.05, "{avg}");
    }
}
