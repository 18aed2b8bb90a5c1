//! Log-linear latent factor model `log M = H B Fᵀ` for a day × hour count matrix.
//!
//! Estimation alternates two Poisson GAM fits — loadings given factors, factors given
//! loadings — each followed by an SVD re-orthonormalization of the product, starting
//! from the SVD of `log(Y ∨ c)`.
//!
//! The calendar loadings `[H1 H2]` carry one exact linear dependency (every day has
//! exactly one weekday and one week). It is removed by constraining each factor's week
//! effects to sum to zero over the represented days, `Σ_w n_w B2[w, k] = 0`, which leaves
//! every fitted `μ` unchanged.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CalendarDesign, Covariates, HourlyCountSeries, DAYS_PER_WEEK, HOURS_PER_DAY, WEEKS_PER_YEAR};
use crate::error::{Error, Result};
use crate::linalg::thin_svd;
use crate::spline::{
    fit_penalized_poisson, make_basis, poisson_deviance_terms, BasisSpec, CubicBasis, FitControl, Lambda, ModelMatrix,
    PenalizedDesign, PenaltyBlock, Reparameterized,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One free loading vector per day (`H = I_d`), unsmoothed.
    Plain,
    /// Calendar-constrained loadings, unsmoothed.
    Constrained,
    /// Calendar-constrained loadings with a cyclic week spline and spline factors.
    ConstrainedSmoothed,
}

impl Variant {
    pub fn is_constrained(self) -> bool {
        self != Variant::Plain
    }

    pub fn is_smoothed(self) -> bool {
        self == Variant::ConstrainedSmoothed
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Constrained => "constrained",
            Variant::ConstrainedSmoothed => "constrained_smoothed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorConfig {
    pub k: usize,
    pub variant: Variant,
    /// Zero guard for the initial SVD of `log(Y ∨ c)`.
    pub c: f64,
    /// Relative Frobenius change of `log M` declaring convergence.
    pub tol: f64,
    pub max_iter: usize,
    /// Dimension of the hour-of-day spline basis for smoothed factors.
    pub hour_dim: usize,
    pub inner: FitControl,
}

impl FactorConfig {
    pub fn new(k: usize, variant: Variant) -> Self {
        Self { k, variant, c: 0.5, tol: 1e-6, max_iter: 50, hour_dim: 10, inner: FitControl::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    /// Poisson deviance of the initial `exp(L0 F0ᵀ)`.
    pub initial_deviance: f64,
    pub deviance_trace: Vec<f64>,
    pub rel_change_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SmoothingParams {
    /// One per factor: week-of-year block of the loadings.
    pub loadings: Vec<f64>,
    /// One per factor: hour-of-day block of the factors.
    pub factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub k: usize,
    pub variant: Variant,
    /// m × K, orthonormal columns.
    pub f: DMatrix<f64>,
    /// r × K calendar loadings (rows: 7 weekdays then 53 weeks); `None` for the plain variant.
    pub b: Option<DMatrix<f64>>,
    /// d × K per-day loadings `L`.
    pub loadings: DMatrix<f64>,
    pub train_covariates: Vec<Covariates>,
    pub hour_basis: Option<BasisSpec>,
    pub week_basis: Option<BasisSpec>,
    pub smoothing: SmoothingParams,
}

/// Day × hour count matrix.
pub fn count_matrix(series: &HourlyCountSeries) -> DMatrix<f64> {
    let d = series.n_days();
    DMatrix::from_fn(d, HOURS_PER_DAY, |i, j| series.count(i, j) as f64)
}

/// Hour basis used for smoothed factors.
pub fn hour_basis_spec(dim: usize) -> BasisSpec {
    BasisSpec::cubic(dim, 1.0, HOURS_PER_DAY as f64)
}

/// Cyclic week basis: knots at weeks 1..=53, period 53, so week 54 is week 1.
pub fn week_basis_spec() -> BasisSpec {
    BasisSpec::cyclic(WEEKS_PER_YEAR, 1.0, WEEKS_PER_YEAR as f64 + 1.0)
}

/// Rows `(i, j)` in day-major order `t = i·m + j`: `x_t = outer_u ⊗ inner_v` with column
/// index `a·p_inner + c`, where `(u, v)` is `(i, j)` when the outer factor is indexed by
/// day and `(j, i)` otherwise.
#[derive(Debug, Clone)]
pub struct KroneckerDesign {
    outer: DMatrix<f64>,
    inner: DMatrix<f64>,
    outer_is_day: bool,
    inner_nonzeros: Vec<Vec<(usize, f64)>>,
}

impl KroneckerDesign {
    /// Varying-coefficient design for the factors: `log μ_ij = Σ_k L_ik (X_h γ_k)_j`.
    pub fn for_factors(loadings: &DMatrix<f64>, hour_basis: &DMatrix<f64>) -> Self {
        Self::new(loadings.clone(), hour_basis.clone(), true)
    }

    /// Varying-coefficient design for the loadings: `log μ_ij = Σ_k F_jk (h_i · b_k)`.
    pub fn for_loadings(factors: &DMatrix<f64>, day_rows: &DMatrix<f64>) -> Self {
        Self::new(factors.clone(), day_rows.clone(), false)
    }

    fn new(outer: DMatrix<f64>, inner: DMatrix<f64>, outer_is_day: bool) -> Self {
        let inner_nonzeros = inner
            .row_iter()
            .map(|r| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(c, v)| (c, *v)).collect())
            .collect();
        Self { outer, inner, outer_is_day, inner_nonzeros }
    }

    fn days(&self) -> usize {
        if self.outer_is_day { self.outer.nrows() } else { self.inner.nrows() }
    }

    fn hours(&self) -> usize {
        if self.outer_is_day { self.inner.nrows() } else { self.outer.nrows() }
    }

    fn t(&self, u: usize, v: usize) -> usize {
        if self.outer_is_day { u * self.hours() + v } else { v * self.hours() + u }
    }
}

impl ModelMatrix for KroneckerDesign {
    fn nrows(&self) -> usize {
        self.days() * self.hours()
    }

    fn ncols(&self) -> usize {
        self.outer.ncols() * self.inner.ncols()
    }

    fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        let coef = DMatrix::from_column_slice(self.inner.ncols(), self.outer.ncols(), beta.as_slice());
        // inner_v · C · outer_uᵀ for every (v, u)
        let fitted = &self.inner * coef * self.outer.transpose();
        let mut eta = DVector::zeros(self.nrows());
        for u in 0..self.outer.nrows() {
            for v in 0..self.inner.nrows() {
                eta[self.t(u, v)] = fitted[(v, u)];
            }
        }
        eta
    }

    fn weighted_gram(&self, weights: &DVector<f64>) -> DMatrix<f64> {
        let (pout, pin) = (self.outer.ncols(), self.inner.ncols());
        let mut g = DMatrix::zeros(pout * pin, pout * pin);
        let mut m_u = DMatrix::zeros(pin, pin);
        for u in 0..self.outer.nrows() {
            m_u.fill(0.0);
            for (v, nz) in self.inner_nonzeros.iter().enumerate() {
                let w = weights[self.t(u, v)];
                if w == 0.0 {
                    continue;
                }
                for &(c, x) in nz {
                    for &(c2, x2) in nz {
                        m_u[(c, c2)] += w * x * x2;
                    }
                }
            }
            for a in 0..pout {
                let oa = self.outer[(u, a)];
                if oa == 0.0 {
                    continue;
                }
                for a2 in 0..pout {
                    let ob = self.outer[(u, a2)];
                    if ob == 0.0 {
                        continue;
                    }
                    let scale = oa * ob;
                    for c2 in 0..pin {
                        for c in 0..pin {
                            g[(a * pin + c, a2 * pin + c2)] += scale * m_u[(c, c2)];
                        }
                    }
                }
            }
        }
        g
    }

    fn transpose_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        let (nu, nv) = (self.outer.nrows(), self.inner.nrows());
        let vm = DMatrix::from_fn(nv, nu, |vi, u| v[self.t(u, vi)]);
        let g = self.inner.tr_mul(&vm) * &self.outer;
        DVector::from_column_slice(g.as_slice())
    }
}

/// SVD of `log(Y ∨ c)`: `L0 = U_K D_K`, `F0 = V_K`.
pub fn init_svd(y: &DMatrix<f64>, c: f64, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::Config(format!("zero guard c = {c} must lie in (0, 1)")));
    }
    let (d, m) = y.shape();
    if k == 0 || k > d.min(m) {
        return Err(Error::Config(format!("K = {k} must be in 1..={}", d.min(m))));
    }
    let logy = y.map(|v| v.max(c).ln());
    let (u, s, v) = thin_svd(&logy)?;
    if s[k - 1] <= 1e-12 * s[0].max(f64::MIN_POSITIVE) {
        return Err(Error::RankDeficient(format!("K = {k} exceeds the numeric rank of log(Y ∨ c)")));
    }
    let mut l0 = u.columns(0, k).into_owned();
    for j in 0..k {
        l0.column_mut(j).scale_mut(s[j]);
    }
    let mut f0 = v.columns(0, k).into_owned();
    apply_sign_convention(&mut l0, &mut f0);
    Ok((l0, f0))
}

/// Flips each factor column (and its loadings) so that its largest-magnitude entry is positive.
fn apply_sign_convention(loadings: &mut DMatrix<f64>, factors: &mut DMatrix<f64>) {
    for k in 0..factors.ncols() {
        let col = factors.column(k);
        let idx = col.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(i, _)| i).unwrap_or(0);
        if col[idx] < 0.0 {
            factors.column_mut(k).neg_mut();
            loadings.column_mut(k).neg_mut();
        }
    }
}

/// `B F_rawᵀ = U D Vᵀ`; returns `(U_K D_K, V_K)` under the sign convention.
pub fn orthonormalize(b: &DMatrix<f64>, f_raw: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = b.ncols();
    if f_raw.ncols() != k {
        return Err(Error::Config("loadings and factors disagree on K".into()));
    }
    let (u, s, v) = thin_svd(&(b * f_raw.transpose()))?;
    if s.len() < k || s[k - 1] < 1e-12 * s[0].max(1.0) {
        return Err(Error::RankDeficient(format!("factor product has rank below K = {k}; use fewer factors")));
    }
    let mut b_next = u.columns(0, k).into_owned();
    for j in 0..k {
        b_next.column_mut(j).scale_mut(s[j]);
    }
    let mut f_next = v.columns(0, k).into_owned();
    apply_sign_convention(&mut b_next, &mut f_next);
    Ok((b_next, f_next))
}

/// Orthonormal basis (53 × 52) of the week vectors with `Σ_w n_w b_w = 0`.
fn week_constraint_basis(counts: &[usize; WEEKS_PER_YEAR]) -> DMatrix<f64> {
    let n = DVector::from_iterator(WEEKS_PER_YEAR, counts.iter().map(|&c| c as f64));
    let nhat = &n / n.norm();
    let mut u = nhat.clone();
    u[0] += if nhat[0] >= 0.0 { 1.0 } else { -1.0 };
    let house = DMatrix::identity(WEEKS_PER_YEAR, WEEKS_PER_YEAR) - (&u * u.transpose()) * (2.0 / u.norm_squared());
    house.columns(1, WEEKS_PER_YEAR - 1).into_owned()
}

/// Coefficient layout of the constrained loadings fit: per factor, 7 weekday
/// coefficients followed by 52 free week coefficients.
struct LoadingLayout {
    k: usize,
    z_week: DMatrix<f64>,
}

impl LoadingLayout {
    const PER_FACTOR: usize = DAYS_PER_WEEK + WEEKS_PER_YEAR - 1;

    fn z(&self) -> DMatrix<f64> {
        let r = CalendarDesign::r();
        let mut z = DMatrix::zeros(r * self.k, Self::PER_FACTOR * self.k);
        for k in 0..self.k {
            for d in 0..DAYS_PER_WEEK {
                z[(k * r + d, k * Self::PER_FACTOR + d)] = 1.0;
            }
            z.view_mut((k * r + DAYS_PER_WEEK, k * Self::PER_FACTOR + DAYS_PER_WEEK), (WEEKS_PER_YEAR, WEEKS_PER_YEAR - 1))
                .copy_from(&self.z_week);
        }
        z
    }

    fn week_start(&self, k: usize) -> usize {
        k * Self::PER_FACTOR + DAYS_PER_WEEK
    }
}

/// Warm-start state carried between outer iterations.
#[derive(Debug, Clone, Default)]
struct Warm {
    loading_lambdas: Option<Vec<f64>>,
    factor_lambdas: Option<Vec<f64>>,
}

fn flatten_cols(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// B (r × K) maximizing the (penalized) Poisson likelihood with `F` fixed.
pub fn update_loadings(y: &DMatrix<f64>, f: &DMatrix<f64>, design: &CalendarDesign, smoothing: bool) -> Result<DMatrix<f64>> {
    let control = FitControl::default();
    Ok(loadings_step(y, f, design, smoothing, None, &control, &mut Warm::default())?.0)
}

fn loadings_step(
    y: &DMatrix<f64>,
    f: &DMatrix<f64>,
    design: &CalendarDesign,
    smoothing: bool,
    start_b: Option<&DMatrix<f64>>,
    control: &FitControl,
    warm: &mut Warm,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let k = f.ncols();
    let r = CalendarDesign::r();
    if design.n_days() != y.nrows() {
        return Err(Error::Config("calendar design does not match the count matrix".into()));
    }
    let counts = design.week_counts();
    let layout = LoadingLayout { k, z_week: week_constraint_basis(&counts) };
    let z = layout.z();
    let x = Reparameterized { inner: KroneckerDesign::for_loadings(f, &design.h()), z: z.clone() };
    let mut blocks = Vec::new();
    if smoothing {
        let basis = CubicBasis::new(week_basis_spec())?;
        let s = layout.z_week.tr_mul(&(basis.penalty() * &layout.z_week));
        let prev = warm.loading_lambdas.clone();
        for kk in 0..k {
            let initial = prev.as_ref().and_then(|p| p.get(kk).copied());
            blocks.push(PenaltyBlock::new(layout.week_start(kk), s.clone(), Lambda::Gcv { initial }));
        }
    } else if counts.contains(&0) {
        // weeks without data are not identified; a negligible ridge pins them
        let ridge = 1e-8 * y.sum() / y.len().max(1) as f64;
        for kk in 0..k {
            blocks.push(PenaltyBlock::new(
                layout.week_start(kk),
                DMatrix::identity(WEEKS_PER_YEAR - 1, WEEKS_PER_YEAR - 1),
                Lambda::Fixed(ridge),
            ));
        }
    }
    let n = y.len();
    let pd = PenalizedDesign::new(x, DVector::zeros(n), blocks)?;
    let obs = day_major(y);
    let start = start_b.map(|b| z.tr_mul(&flatten_cols(b)));
    let fit = fit_penalized_poisson(&pd, &obs, control, start.as_ref())?;
    let b = DMatrix::from_column_slice(r, k, (&z * &fit.coefficients).as_slice());
    let lambdas = if smoothing { fit.smoothing.clone() } else { Vec::new() };
    if smoothing {
        warm.loading_lambdas = Some(fit.smoothing);
    }
    Ok((b, lambdas))
}

fn day_major(y: &DMatrix<f64>) -> Vec<f64> {
    let (d, m) = y.shape();
    (0..d * m).map(|t| y[(t / m, t % m)]).collect()
}

fn hour_design(smoothing: bool, hour_dim: usize) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    if smoothing {
        let hours: Vec<f64> = (1..=HOURS_PER_DAY).map(|h| h as f64).collect();
        let (x, s) = make_basis(hour_basis_spec(hour_dim), &hours)?;
        Ok((x, Some(s)))
    } else {
        Ok((DMatrix::identity(HOURS_PER_DAY, HOURS_PER_DAY), None))
    }
}

/// Raw factors (m × K) maximizing the (penalized) Poisson likelihood with `L` fixed.
pub fn update_factors(y: &DMatrix<f64>, loadings: &DMatrix<f64>, smoothing: bool) -> Result<DMatrix<f64>> {
    let control = FitControl::default();
    Ok(factors_step(y, loadings, smoothing, 10, None, &control, &mut Warm::default())?.0)
}

fn factors_step(
    y: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    smoothing: bool,
    hour_dim: usize,
    start_f: Option<&DMatrix<f64>>,
    control: &FitControl,
    warm: &mut Warm,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if !loadings.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite loadings".into()));
    }
    let k = loadings.ncols();
    let (xh, s) = hour_design(smoothing, hour_dim)?;
    let q = xh.ncols();
    let mut blocks = Vec::new();
    if let Some(s) = &s {
        let prev = warm.factor_lambdas.clone();
        for kk in 0..k {
            let initial = prev.as_ref().and_then(|p| p.get(kk).copied());
            blocks.push(PenaltyBlock::new(kk * q, s.clone(), Lambda::Gcv { initial }));
        }
    }
    let x = KroneckerDesign::for_factors(loadings, &xh);
    let pd = PenalizedDesign::new(x, DVector::zeros(y.len()), blocks)?;
    // coefficients reproducing a current factor matrix that lies in the basis span
    let start = match start_f {
        Some(f) => {
            let chol = (xh.tr_mul(&xh)).cholesky().ok_or_else(|| Error::Numerical("hour basis is singular".into()))?;
            Some(flatten_cols(&chol.solve(&xh.tr_mul(f))))
        }
        None => None,
    };
    let fit = fit_penalized_poisson(&pd, &day_major(y), control, start.as_ref())?;
    let gamma = DMatrix::from_column_slice(q, k, fit.coefficients.as_slice());
    let lambdas = if smoothing { fit.smoothing.clone() } else { Vec::new() };
    if smoothing {
        warm.factor_lambdas = Some(fit.smoothing);
    }
    Ok((xh * gamma, lambdas))
}

/// Per-day Poisson regressions of the plain variant: row `i` of `L` given `F`.
fn plain_loadings(y: &DMatrix<f64>, f: &DMatrix<f64>, start: Option<&DMatrix<f64>>, control: &FitControl) -> Result<DMatrix<f64>> {
    let (d, k) = (y.nrows(), f.ncols());
    let mut l = DMatrix::zeros(d, k);
    for i in 0..d {
        let yi: Vec<f64> = y.row(i).iter().copied().collect();
        if yi.iter().all(|&v| v == 0.0) {
            return Err(Error::Data(format!("day {} has no counts; exclude it before fitting", i + 1)));
        }
        let pd = PenalizedDesign::unpenalized(f.clone());
        let s = start.map(|l0| l0.row(i).transpose());
        let fit = fit_penalized_poisson(&pd, &yi, control, s.as_ref())?;
        l.row_mut(i).copy_from(&fit.coefficients.transpose());
    }
    Ok(l)
}

fn log_mean_from(loadings: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    loadings * f.transpose()
}

fn deviance_of(y: &DMatrix<f64>, log_mu: &DMatrix<f64>) -> f64 {
    let mu: Vec<f64> = day_major(log_mu).iter().map(|v| v.exp().max(1e-300)).collect();
    poisson_deviance_terms(&day_major(y), &mu)
}

/// Per-day loadings `L = H B` from calendar loadings.
fn calendar_loadings(b: &DMatrix<f64>, covariates: &[Covariates]) -> DMatrix<f64> {
    let k = b.ncols();
    DMatrix::from_fn(covariates.len(), k, |i, kk| {
        let c = &covariates[i];
        b[(c.dow_index(), kk)] + b[(DAYS_PER_WEEK + c.week_index(), kk)]
    })
}

/// Fits the factor model to `series`. `design` is required for the constrained variants
/// and ignored by the plain variant.
pub fn fit_factor_model(
    series: &HourlyCountSeries,
    design: Option<&CalendarDesign>,
    config: &FactorConfig,
) -> Result<(FactorModel, FitReport)> {
    let y = count_matrix(series);
    if config.variant.is_constrained() {
        let design = design.ok_or_else(|| Error::Config("constrained variants need a calendar design".into()))?;
        design.check_rank()?;
        fit_constrained(&y, design, config)
    } else {
        fit_plain(&y, &series.covariates(), config)
    }
}

struct Best {
    deviance: f64,
    b: DMatrix<f64>,
    f: DMatrix<f64>,
    smoothing: SmoothingParams,
}

fn fit_constrained(y: &DMatrix<f64>, design: &CalendarDesign, config: &FactorConfig) -> Result<(FactorModel, FitReport)> {
    let smoothing = config.variant.is_smoothed();
    let covariates = design.covariates().to_vec();
    let (l0, f0) = init_svd(y, config.c, config.k)?;
    let mut log_m = log_mean_from(&l0, &f0);
    let initial_deviance = deviance_of(y, &log_m);
    let mut warm = Warm::default();
    let mut f = f0;
    let mut b: Option<DMatrix<f64>> = None;
    let mut report = FitReport { iterations: 0, initial_deviance, deviance_trace: vec![], rel_change_trace: vec![], converged: false };
    let mut best: Option<Best> = None;

    for iter in 1..=config.max_iter {
        report.iterations = iter;
        let (b_star, lam_b) = loadings_step(y, &f, design, smoothing, b.as_ref(), &config.inner, &mut warm)?;
        let l_star = calendar_loadings(&b_star, &covariates);
        let start_f = (iter > 1).then_some(&f);
        let (f_raw, lam_f) = factors_step(y, &l_star, smoothing, config.hour_dim, start_f, &config.inner, &mut warm)?;
        let (b_next, f_next) = orthonormalize(&b_star, &f_raw)?;
        let next_log_m = log_mean_from(&calendar_loadings(&b_next, &covariates), &f_next);
        let rel = (&next_log_m - &log_m).norm() / log_m.norm().max(f64::MIN_POSITIVE);
        let dev = deviance_of(y, &next_log_m);
        report.deviance_trace.push(dev);
        report.rel_change_trace.push(rel);
        let params = SmoothingParams { loadings: lam_b, factors: lam_f };
        if best.as_ref().is_none_or(|bst| dev < bst.deviance) {
            best = Some(Best { deviance: dev, b: b_next.clone(), f: f_next.clone(), smoothing: params.clone() });
        }
        log_m = next_log_m;
        f = f_next;
        b = Some(b_next);
        if rel < config.tol {
            report.converged = true;
            let bst = Best { deviance: dev, b: b.clone().expect("set above"), f: f.clone(), smoothing: params };
            best = Some(bst);
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Config("max_iter must be at least 1".into()))?;
    let loadings = calendar_loadings(&best.b, &covariates);
    let model = FactorModel {
        k: config.k,
        variant: config.variant,
        f: best.f,
        b: Some(best.b),
        loadings,
        train_covariates: covariates,
        hour_basis: smoothing.then(|| hour_basis_spec(config.hour_dim)),
        week_basis: smoothing.then(week_basis_spec),
        smoothing: best.smoothing,
    };
    Ok((model, report))
}

fn fit_plain(y: &DMatrix<f64>, covariates: &[Covariates], config: &FactorConfig) -> Result<(FactorModel, FitReport)> {
    let (l0, f0) = init_svd(y, config.c, config.k)?;
    let mut log_m = log_mean_from(&l0, &f0);
    let initial_deviance = deviance_of(y, &log_m);
    let mut warm = Warm::default();
    let mut f = f0;
    let mut l: Option<DMatrix<f64>> = None;
    let mut report = FitReport { iterations: 0, initial_deviance, deviance_trace: vec![], rel_change_trace: vec![], converged: false };
    let mut best: Option<(f64, DMatrix<f64>, DMatrix<f64>)> = None;
    for iter in 1..=config.max_iter {
        report.iterations = iter;
        let l_star = plain_loadings(y, &f, l.as_ref(), &config.inner)?;
        let start_f = (iter > 1).then_some(&f);
        let (f_raw, _) = factors_step(y, &l_star, false, config.hour_dim, start_f, &config.inner, &mut warm)?;
        let (l_next, f_next) = orthonormalize(&l_star, &f_raw)?;
        let next_log_m = log_mean_from(&l_next, &f_next);
        let rel = (&next_log_m - &log_m).norm() / log_m.norm().max(f64::MIN_POSITIVE);
        let dev = deviance_of(y, &next_log_m);
        report.deviance_trace.push(dev);
        report.rel_change_trace.push(rel);
        let converged = rel < config.tol;
        if converged || best.as_ref().is_none_or(|b| dev < b.0) {
            best = Some((dev, l_next.clone(), f_next.clone()));
        }
        log_m = next_log_m;
        f = f_next;
        l = Some(l_next);
        if converged {
            report.converged = true;
            break;
        }
    }
    let (_, loadings, f) = best.ok_or_else(|| Error::Config("max_iter must be at least 1".into()))?;
    let model = FactorModel {
        k: config.k,
        variant: Variant::Plain,
        f,
        b: None,
        loadings,
        train_covariates: covariates.to_vec(),
        hour_basis: None,
        week_basis: None,
        smoothing: SmoothingParams::default(),
    };
    Ok((model, report))
}

impl FactorModel {
    /// In-sample fitted intensity (d × m).
    pub fn fitted_mu(&self) -> DMatrix<f64> {
        log_mean_from(&self.loadings, &self.f).map(f64::exp)
    }

    /// Intensity for new calendar days. Week effects are the fitted cyclic spline (or raw
    /// incidence coefficients) evaluated at the integer week, which is the week's own
    /// coefficient.
    pub fn predict_mu(&self, covariates: &[Covariates]) -> Result<DMatrix<f64>> {
        let b = self.b.as_ref().ok_or_else(|| Error::Config("unconstrained model has no out-of-sample loadings".into()))?;
        check_covariates(covariates)?;
        Ok(log_mean_from(&calendar_loadings(b, covariates), &self.f).map(f64::exp))
    }

    /// Out-of-sample intensity for any variant. The plain variant borrows, for each new day,
    /// the mean training loading over days with the same weekday in the cyclically
    /// nearest observed week (earlier week on ties).
    pub fn predict_aligned(&self, covariates: &[Covariates]) -> Result<DMatrix<f64>> {
        if self.variant.is_constrained() {
            return self.predict_mu(covariates);
        }
        check_covariates(covariates)?;
        let mut l = DMatrix::zeros(covariates.len(), self.k);
        for (row, c) in covariates.iter().enumerate() {
            let same_dow: Vec<usize> =
                (0..self.train_covariates.len()).filter(|&i| self.train_covariates[i].day_of_week == c.day_of_week).collect();
            if same_dow.is_empty() {
                return Err(Error::Data(format!("weekday {} never observed in training", c.day_of_week)));
            }
            let dist = |w: u8| {
                let diff = (w as i32 - c.week_of_year as i32).rem_euclid(WEEKS_PER_YEAR as i32);
                let back = diff.min(WEEKS_PER_YEAR as i32 - diff);
                // prefer the earlier week on ties
                (back, if diff == back && diff != 0 { 1 } else { 0 })
            };
            let target = same_dow.iter().map(|&i| dist(self.train_covariates[i].week_of_year)).min().expect("nonempty");
            let chosen: Vec<usize> =
                same_dow.into_iter().filter(|&i| dist(self.train_covariates[i].week_of_year) == target).collect();
            for &i in &chosen {
                let add = self.loadings.row(i) / chosen.len() as f64;
                let mut r = l.row_mut(row);
                r += add;
            }
        }
        Ok(log_mean_from(&l, &self.f).map(f64::exp))
    }
}

fn check_covariates(covariates: &[Covariates]) -> Result<()> {
    for c in covariates {
        if !(1..=DAYS_PER_WEEK as u8).contains(&c.day_of_week) || !(1..=WEEKS_PER_YEAR as u8).contains(&c.week_of_year) {
            return Err(Error::Data(format!("covariates {c:?} outside the calendar basis")));
        }
    }
    Ok(())
}

/// Serialized form of a factor model. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorModelDoc {
    pub k: usize,
    pub variant: Variant,
    pub hours: usize,
    pub weekday_order: String,
    pub week_rule: String,
    pub f: Vec<f64>,
    pub b: Option<Vec<f64>>,
    pub loadings: Vec<f64>,
    pub train_covariates: Vec<Covariates>,
    pub hour_basis: Option<BasisDoc>,
    pub week_basis: Option<BasisDoc>,
    pub smoothing: SmoothingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisDoc {
    pub spec: BasisSpec,
    pub knots: Vec<f64>,
}

pub const WEEKDAY_ORDER: &str = "monday_first";
pub const WEEK_RULE: &str = "ceil_day_of_year_div_7_cap_53";

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, v: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Data(format!("{what}: expected {rows}×{cols} values, found {}", v.len())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, v))
}

fn basis_doc(spec: Option<BasisSpec>) -> Result<Option<BasisDoc>> {
    spec.map(|s| Ok(BasisDoc { spec: s, knots: CubicBasis::new(s)?.knots().to_vec() })).transpose()
}

impl FactorModel {
    pub fn to_doc(&self) -> Result<FactorModelDoc> {
        Ok(FactorModelDoc {
            k: self.k,
            variant: self.variant,
            hours: HOURS_PER_DAY,
            weekday_order: WEEKDAY_ORDER.into(),
            week_rule: WEEK_RULE.into(),
            f: row_major(&self.f),
            b: self.b.as_ref().map(row_major),
            loadings: row_major(&self.loadings),
            train_covariates: self.train_covariates.clone(),
            hour_basis: basis_doc(self.hour_basis)?,
            week_basis: basis_doc(self.week_basis)?,
            smoothing: self.smoothing.clone(),
        })
    }

    pub fn from_doc(doc: &FactorModelDoc) -> Result<Self> {
        if doc.hours != HOURS_PER_DAY || doc.weekday_order != WEEKDAY_ORDER || doc.week_rule != WEEK_RULE {
            return Err(Error::Data("model document uses an unsupported calendar convention".into()));
        }
        let b = doc.b.as_ref().map(|b| from_row_major(CalendarDesign::r(), doc.k, b, "b")).transpose()?;
        if doc.variant.is_constrained() != b.is_some() {
            return Err(Error::Data("calendar loadings present iff the variant is constrained".into()));
        }
        Ok(Self {
            k: doc.k,
            variant: doc.variant,
            f: from_row_major(HOURS_PER_DAY, doc.k, &doc.f, "f")?,
            b,
            loadings: from_row_major(doc.train_covariates.len(), doc.k, &doc.loadings, "loadings")?,
            train_covariates: doc.train_covariates.clone(),
            hour_basis: doc.hour_basis.as_ref().map(|b| b.spec),
            week_basis: doc.week_basis.as_ref().map(|b| b.spec),
            smoothing: doc.smoothing.clone(),
        })
    }
}
