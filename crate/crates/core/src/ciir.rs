//! Conditional intensity inflation rate `η_t`: integer-GARCH style recursions on the
//! multiplicative residual `ê_t = y_t / μ̂_t`, so that `λ_t = μ̂_t η_t`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{BlockSegmentation, HOURS_PER_DAY};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::rng::{stream_rng, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiirVariant {
    IntGarch,
    IntExpGarch,
    IntThreshGarch,
    IntRsGarch,
}

impl CiirVariant {
    pub fn name(self) -> &'static str {
        match self {
            CiirVariant::IntGarch => "int_garch",
            CiirVariant::IntExpGarch => "int_exp_garch",
            CiirVariant::IntThreshGarch => "int_thresh_garch",
            CiirVariant::IntRsGarch => "int_rs_garch",
        }
    }
}

/// Variant plus its fixed constants: thresholds `(c1, c2)` and regime hours `(t1, t2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiirSpec {
    pub variant: CiirVariant,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
    #[serde(default = "default_t1")]
    pub t1: u8,
    #[serde(default = "default_t2")]
    pub t2: u8,
}

fn default_c1() -> f64 {
    1.0 / 1.15
}
fn default_c2() -> f64 {
    1.15
}
fn default_t1() -> u8 {
    10
}
fn default_t2() -> u8 {
    16
}

impl CiirSpec {
    pub fn new(variant: CiirVariant) -> Self {
        Self { variant, c1: default_c1(), c2: default_c2(), t1: default_t1(), t2: default_t2() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c1 < 1.0 && self.c2 > 1.0) {
            return Err(Error::Config(format!("thresholds need 0 < c1 < 1 < c2, got ({}, {})", self.c1, self.c2)));
        }
        if !(1 <= self.t1 && self.t1 < self.t2 && self.t2 as usize <= HOURS_PER_DAY) {
            return Err(Error::Config(format!("regime hours need 1 ≤ t1 < t2 ≤ 24, got ({}, {})", self.t1, self.t2)));
        }
        Ok(())
    }

    /// Regime 1 iff the hour-of-day label lies in `(t1, t2]`.
    pub fn in_regime_one(&self, hour: u8) -> bool {
        self.t1 < hour && hour <= self.t2
    }

    pub fn default_params(&self) -> CiirParams {
        match self.variant {
            CiirVariant::IntGarch => CiirParams::IntGarch { alpha: 0.1, beta: 0.8 },
            CiirVariant::IntExpGarch => CiirParams::IntExpGarch { alpha: 0.1, beta: 0.8, delta: 0.05, gamma: 0.1 },
            CiirVariant::IntThreshGarch => {
                CiirParams::IntThreshGarch { omega: 0.1, alpha: 0.1, beta: 0.8, gamma: 0.02, delta: -0.02 }
            }
            CiirVariant::IntRsGarch => CiirParams::IntRsGarch {
                omega1: 0.1,
                alpha1: 0.1,
                beta1: 0.8,
                omega2: 0.1,
                alpha2: 0.1,
                beta2: 0.8,
            },
        }
    }
}

/// Parameters per variant. For `IntGarch`, `ω = 1 − α − β` is implied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum CiirParams {
    IntGarch { alpha: f64, beta: f64 },
    IntExpGarch { alpha: f64, beta: f64, delta: f64, gamma: f64 },
    IntThreshGarch { omega: f64, alpha: f64, beta: f64, gamma: f64, delta: f64 },
    IntRsGarch { omega1: f64, alpha1: f64, beta1: f64, omega2: f64, alpha2: f64, beta2: f64 },
}

impl CiirParams {
    pub fn variant(&self) -> CiirVariant {
        match self {
            CiirParams::IntGarch { .. } => CiirVariant::IntGarch,
            CiirParams::IntExpGarch { .. } => CiirVariant::IntExpGarch,
            CiirParams::IntThreshGarch { .. } => CiirVariant::IntThreshGarch,
            CiirParams::IntRsGarch { .. } => CiirVariant::IntRsGarch,
        }
    }

    /// Parameter vector in declaration order; `IntGarch` reports `(ω, α, β)`.
    pub fn values(&self) -> Vec<f64> {
        match *self {
            CiirParams::IntGarch { alpha, beta } => vec![1.0 - alpha - beta, alpha, beta],
            CiirParams::IntExpGarch { alpha, beta, delta, gamma } => vec![alpha, beta, delta, gamma],
            CiirParams::IntThreshGarch { omega, alpha, beta, gamma, delta } => vec![omega, alpha, beta, gamma, delta],
            CiirParams::IntRsGarch { omega1, alpha1, beta1, omega2, alpha2, beta2 } => {
                vec![omega1, alpha1, beta1, omega2, alpha2, beta2]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CiirParams::IntGarch { alpha, beta } => alpha >= 0.0 && beta >= 0.0 && alpha + beta < 1.0,
            CiirParams::IntExpGarch { alpha, beta, delta, gamma } => {
                alpha > 0.0 && beta > 0.0 && delta > 0.0 && gamma > 0.0 && alpha + beta < 1.0
            }
            CiirParams::IntThreshGarch { omega, alpha, beta, gamma, delta } => {
                omega > 0.0
                    && alpha > 0.0
                    && beta > 0.0
                    && gamma >= 0.0
                    && delta <= 0.0
                    && alpha + gamma > 0.0
                    && beta + delta > 0.0
                    && alpha + beta + gamma + delta < 1.0
            }
            CiirParams::IntRsGarch { omega1, alpha1, beta1, omega2, alpha2, beta2 } => {
                [omega1, alpha1, beta1, omega2, alpha2, beta2].iter().all(|&v| v > 0.0)
            }
        };
        let finite = self.values().iter().all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::Config(format!("{:?} violates the parameter constraints", self)))
        }
    }
}

/// One step of the `η` recursion.
pub fn eta_step(spec: &CiirSpec, params: &CiirParams, e_prev: f64, eta_prev: f64, hour: u8) -> Result<f64> {
    let next = eta_raw(spec, params, e_prev, eta_prev, hour);
    if next > 0.0 && next.is_finite() {
        Ok(next)
    } else {
        Err(Error::Numerical(format!("intensity inflation rate {next} is not positive")))
    }
}

#[inline]
fn eta_raw(spec: &CiirSpec, params: &CiirParams, e: f64, eta: f64, hour: u8) -> f64 {
    match *params {
        CiirParams::IntGarch { alpha, beta } => (1.0 - alpha - beta) + alpha * e + beta * eta,
        CiirParams::IntExpGarch { alpha, beta, delta, gamma } => alpha * e + (beta + delta * (-gamma * eta * eta).exp()) * eta,
        CiirParams::IntThreshGarch { omega, alpha, beta, gamma, delta } => {
            let base = omega + alpha * e + beta * eta;
            if e <= spec.c1 || e >= spec.c2 {
                base + gamma * e + delta * eta
            } else {
                base
            }
        }
        CiirParams::IntRsGarch { omega1, alpha1, beta1, omega2, alpha2, beta2 } => {
            if spec.in_regime_one(hour) {
                omega1 + alpha1 * e + beta1 * eta
            } else {
                omega2 + alpha2 * e + beta2 * eta
            }
        }
    }
}

/// Hour-of-day label (1..=24) of linear hour index `t`.
pub fn hour_label(t: usize) -> u8 {
    (t % HOURS_PER_DAY) as u8 + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Standardized residuals `y_t / λ̂_t`.
    pub eps: Vec<f64>,
}

fn check_inputs(y: &[f64], mu: &[f64], blocks: &BlockSegmentation) -> Result<()> {
    if y.len() != mu.len() {
        return Err(Error::Config(format!("{} counts but {} fitted means", y.len(), mu.len())));
    }
    if blocks.is_empty() {
        return Err(Error::Data("no observation blocks".into()));
    }
    if blocks.iter().any(|b| b.end > y.len() || b.start >= b.end) {
        return Err(Error::Data("observation block outside the series".into()));
    }
    if mu.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(Error::Data("fitted means must be positive".into()));
    }
    Ok(())
}

/// Runs the recursion within each block with `η = 1` at every block head and
/// `ê_{t−1} = y_{t−1} / μ̂_{t−1}`. Hours outside every block keep `η = 1`.
pub fn filter(spec: &CiirSpec, params: &CiirParams, y: &[f64], mu: &[f64], blocks: &BlockSegmentation) -> Result<FilterOutput> {
    check_inputs(y, mu, blocks)?;
    let n = y.len();
    let mut eta = vec![1.0; n];
    for b in blocks.iter() {
        for t in b.start + 1..b.end {
            eta[t] = eta_step(spec, params, y[t - 1] / mu[t - 1], eta[t - 1], hour_label(t))?;
        }
    }
    let lambda: Vec<f64> = eta.iter().zip(mu).map(|(e, m)| e * m).collect();
    let eps = y.iter().zip(&lambda).map(|(y, l)| y / l).collect();
    Ok(FilterOutput { eta, lambda, eps })
}

/// Conditional Poisson log-likelihood summed over blocks, omitting each block's first hour.
/// Returns `−∞` for parameters producing a non-positive or non-finite intensity.
pub fn loglik(spec: &CiirSpec, params: &CiirParams, y: &[f64], mu: &[f64], blocks: &BlockSegmentation) -> Result<f64> {
    check_inputs(y, mu, blocks)?;
    let lg: Vec<f64> = y.iter().map(|&v| ln_gamma(v + 1.0)).collect();
    Ok(loglik_unchecked(spec, params, y, mu, &lg, blocks))
}

fn loglik_unchecked(spec: &CiirSpec, params: &CiirParams, y: &[f64], mu: &[f64], lgy: &[f64], blocks: &BlockSegmentation) -> f64 {
    let mut total = 0.0;
    for b in blocks.iter() {
        let mut eta = 1.0;
        for t in b.start + 1..b.end {
            eta = eta_raw(spec, params, y[t - 1] / mu[t - 1], eta, hour_label(t));
            if !(eta > 0.0) || !eta.is_finite() {
                return f64::NEG_INFINITY;
            }
            let lam = mu[t] * eta;
            total += y[t] * lam.ln() - lam - lgy[t];
        }
    }
    if total.is_finite() { total } else { f64::NEG_INFINITY }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax of `(θ…, 0)`: interior point of the probability simplex with `len(θ)+1` parts.
fn simplex(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(0.0, f64::max);
    let mut e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    e.push((-m).exp());
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn simplex_inv(parts: &[f64]) -> Vec<f64> {
    let last = parts[parts.len() - 1];
    parts[..parts.len() - 1].iter().map(|p| (p / last).ln()).collect()
}

/// Unconstrained coordinates for each variant's constraint set.
fn to_theta(p: &CiirParams) -> Vec<f64> {
    match *p {
        CiirParams::IntGarch { alpha, beta } => simplex_inv(&[alpha, beta, 1.0 - alpha - beta]),
        CiirParams::IntExpGarch { alpha, beta, delta, gamma } => {
            let mut t = simplex_inv(&[alpha, beta, 1.0 - alpha - beta]);
            t.extend([delta.ln(), gamma.ln()]);
            t
        }
        CiirParams::IntThreshGarch { omega, alpha, beta, gamma, delta } => {
            let b = beta + delta;
            let s = -delta / beta;
            let g = gamma.max(1e-8);
            let mut t = vec![omega.ln()];
            t.extend(simplex_inv(&[alpha, g, b, (1.0 - alpha - g - b).max(1e-8)]));
            t.push((s.clamp(1e-8, 1.0 - 1e-8) / (1.0 - s.clamp(1e-8, 1.0 - 1e-8))).ln());
            t
        }
        CiirParams::IntRsGarch { omega1, alpha1, beta1, omega2, alpha2, beta2 } => {
            [omega1, alpha1, beta1, omega2, alpha2, beta2].iter().map(|v| v.ln()).collect()
        }
    }
}

fn from_theta(variant: CiirVariant, t: &[f64]) -> CiirParams {
    match variant {
        CiirVariant::IntGarch => {
            let s = simplex(&t[..2]);
            CiirParams::IntGarch { alpha: s[0], beta: s[1] }
        }
        CiirVariant::IntExpGarch => {
            let s = simplex(&t[..2]);
            CiirParams::IntExpGarch { alpha: s[0], beta: s[1], delta: t[2].exp(), gamma: t[3].exp() }
        }
        CiirVariant::IntThreshGarch => {
            let s = simplex(&t[1..4]);
            let (alpha, gamma, b) = (s[0], s[1], s[2]);
            let frac = logistic(t[4]);
            let beta = b / (1.0 - frac);
            CiirParams::IntThreshGarch { omega: t[0].exp(), alpha, beta, gamma, delta: -frac * beta }
        }
        CiirVariant::IntRsGarch => CiirParams::IntRsGarch {
            omega1: t[0].exp(),
            alpha1: t[1].exp(),
            beta1: t[2].exp(),
            omega2: t[3].exp(),
            alpha2: t[4].exp(),
            beta2: t[5].exp(),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiirFit {
    pub params: CiirParams,
    pub loglik: f64,
    pub init_loglik: f64,
    /// False when neither the initial run nor the restart met the simplex tolerance.
    pub converged: bool,
}

/// Conditional maximum likelihood by Nelder–Mead on unconstrained coordinates, from
/// `init` (or the variant default) plus one random restart drawn from `seed`.
pub fn fit_ciir(
    spec: &CiirSpec,
    y: &[f64],
    mu: &[f64],
    blocks: &BlockSegmentation,
    init: Option<CiirParams>,
    seed: u64,
) -> Result<CiirFit> {
    spec.validate()?;
    check_inputs(y, mu, blocks)?;
    let init = init.unwrap_or_else(|| spec.default_params());
    if init.variant() != spec.variant {
        return Err(Error::Config("initial parameters belong to a different variant".into()));
    }
    init.validate()?;
    let lgy: Vec<f64> = y.iter().map(|&v| ln_gamma(v + 1.0)).collect();
    let objective = |t: &[f64]| -loglik_unchecked(spec, &from_theta(spec.variant, t), y, mu, &lgy, blocks);
    let theta0 = to_theta(&init);
    let init_loglik = -objective(&theta0);
    if !init_loglik.is_finite() {
        return Err(Error::Numerical("log-likelihood is not finite at the initial parameters".into()));
    }
    let opts = NelderMeadOptions { max_evals: 400 * theta0.len() * theta0.len(), ..Default::default() };
    let first = nelder_mead(objective, &theta0, &opts);
    let mut rng = stream_rng(seed, Purpose::CiirRestart, 0, 0);
    let restart: Vec<f64> = theta0.iter().map(|t| t + rng.sample::<f64, _>(StandardNormal)).collect();
    let second = nelder_mead(objective, &restart, &opts);
    let best = if second.value < first.value { &second } else { &first };
    let polished = nelder_mead(objective, &best.x, &NelderMeadOptions { initial_step: 0.05, ..opts });
    let winner = if polished.value <= best.value { &polished } else { best };
    let converged = first.converged || second.converged || polished.converged;
    let (params, ll) = if -winner.value >= init_loglik {
        (from_theta(spec.variant, &winner.x), -winner.value)
    } else {
        (init, init_loglik)
    };
    Ok(CiirFit { params, loglik: ll, init_loglik, converged })
}

/// `λ̂_{t+1} = μ̂_{t+1} · η_{t+1}` from the filtered state `(ê_t, η̂_t)`.
pub fn forecast_one_step(spec: &CiirSpec, params: &CiirParams, state: (f64, f64), mu_next: f64, hour: u8) -> Result<f64> {
    Ok(mu_next * eta_step(spec, params, state.0, state.1, hour)?)
}

/// Serialized CIIR component of a model document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiirModel {
    pub spec: CiirSpec,
    pub params: CiirParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn garch(o: f64, a: f64, b: f64) -> (CiirSpec, CiirParams) {
        assert!((o - (1.0 - a - b)).abs() < 1e-12);
        (CiirSpec::new(CiirVariant::IntGarch), CiirParams::IntGarch { alpha: a, beta: b })
    }

    #[test]
    fn recursion_arithmetic() {
        let (s, p) = garch(1.0, 0.0, 0.0);
        assert_eq!(eta_step(&s, &p, 3.7, 0.2, 5).unwrap(), 1.0);
        let (s, p) = garch(0.2, 0.3, 0.5);
        assert!((eta_step(&s, &p, 2.0, 1.0, 5).unwrap() - 1.3).abs() < 1e-12);
        assert!((forecast_one_step(&s, &p, (2.0, 1.0), 10.0, 5).unwrap() - 13.0).abs() < 1e-12);
        assert!((forecast_one_step(&s, &p, (1.0, 1.0), 10.0, 5).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_indicator_off_inside_band() {
        let spec = CiirSpec::new(CiirVariant::IntThreshGarch);
        let p = CiirParams::IntThreshGarch { omega: 0.2, alpha: 0.3, beta: 0.4, gamma: 0.05, delta: -0.1 };
        let v = eta_step(&spec, &p, 1.0, 1.2, 1).unwrap();
        assert!((v - (0.2 + 0.3 + 0.4 * 1.2)).abs() < 1e-12);
        let w = eta_step(&spec, &p, 2.0, 1.2, 1).unwrap();
        assert!((w - (0.2 + 0.6 + 0.48 + 0.1 - 0.12)).abs() < 1e-12);
    }

    #[test]
    fn regime_selection() {
        let spec = CiirSpec::new(CiirVariant::IntRsGarch);
        let p = CiirParams::IntRsGarch { omega1: 0.5, alpha1: 0.2, beta1: 0.2, omega2: 0.1, alpha2: 0.1, beta2: 0.6 };
        let a = forecast_one_step(&spec, &p, (1.5, 1.1), 10.0, 12).unwrap();
        let b = forecast_one_step(&spec, &p, (1.5, 1.1), 10.0, 20).unwrap();
        assert_ne!(a, b);
        assert!(spec.in_regime_one(16) && !spec.in_regime_one(10));
    }

    #[test]
    fn filter_identities() {
        let (s, p) = garch(0.1, 0.3, 0.6);
        let mu = vec![2.0, 3.0, 4.0, 5.0];
        let out = filter(&s, &p, &mu.clone(), &mu, &BlockSegmentation::single(4)).unwrap();
        assert!(out.eta.iter().all(|&e| (e - 1.0).abs() < 1e-15));
        assert_eq!(out.lambda, mu);

        let y = vec![3.0, 1.0];
        let mu = vec![2.0, 2.0];
        let out = filter(&s, &p, &y, &mu, &BlockSegmentation::single(2)).unwrap();
        assert!((out.eta[1] - (0.1 + 0.3 * 1.5 + 0.6)).abs() < 1e-12);

        let blocks = BlockSegmentation { blocks: vec![0..2, 2..4] };
        let y = vec![5.0, 5.0, 5.0, 5.0];
        let out = filter(&s, &p, &y, &[1.0; 4], &blocks).unwrap();
        assert_eq!(out.eta[2], 1.0);
        assert!(filter(&s, &p, &y, &[1.0; 4], &BlockSegmentation::default()).is_err());
    }

    #[test]
    fn loglik_identities() {
        let (s, p) = garch(0.1, 0.3, 0.6);
        let b = BlockSegmentation::single(2);
        assert!((loglik(&s, &p, &[1.0, 1.0], &[1.0, 1.0], &b).unwrap() + 1.0).abs() < 1e-12);
        let ll = loglik(&s, &p, &[0.0, 0.0], &[1.0, 1.0], &b).unwrap();
        assert!((ll + (0.1 + 0.6)).abs() < 1e-12);
        // α = β = 0: static Poisson likelihood
        let (s0, p0) = garch(1.0, 0.0, 0.0);
        let y = [3.0, 0.0, 7.0, 2.0];
        let mu = [2.5, 1.0, 4.0, 3.0];
        let stat: f64 = (1..4).map(|t| y[t] * f64::ln(mu[t]) - mu[t] - ln_gamma(y[t] + 1.0)).sum();
        assert!((loglik(&s0, &p0, &y, &mu, &BlockSegmentation::single(4)).unwrap() - stat).abs() < 1e-12);
    }

    #[test]
    fn reparameterizations_round_trip() {
        for spec in [CiirVariant::IntGarch, CiirVariant::IntExpGarch, CiirVariant::IntThreshGarch, CiirVariant::IntRsGarch] {
            let p = CiirSpec::new(spec).default_params();
            let back = from_theta(spec, &to_theta(&p));
            for (a, b) in p.values().iter().zip(back.values()) {
                assert!((a - b).abs() < 1e-9, "{spec:?}");
            }
            back.validate().unwrap();
        }
    }

    #[test]
    fn serde_shape() {
        let m = CiirModel { spec: CiirSpec::new(CiirVariant::IntGarch), params: CiirParams::IntGarch { alpha: 0.3, beta: 0.6 } };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"variant\":\"int_garch\""));
        assert_eq!(serde_json::from_str::<CiirModel>(&s).unwrap(), m);
    }
}
