//! One-dimensional penalized cubic regression splines and penalized Poisson
//! regression with GCV smoothing selection.
//!
//! Both bases are parameterized by the function values at the knots, so a coefficient
//! vector can be read directly as the curve sampled at the knots. The penalty is the
//! integrated squared second derivative `∫ f''(x)² dx` expressed in that
//! parameterization.
//!
//! [`fit_penalized_poisson`] runs penalized IRLS with a log link. Smoothing parameters
//! marked [`Lambda::Gcv`] are re-selected by GCV on the working model at every IRLS
//! step (performance iteration), one block at a time.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::thin_svd;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Cubic,
    CyclicCubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub dim: usize,
    pub domain: (f64, f64),
}

impl BasisSpec {
    pub fn cubic(dim: usize, lo: f64, hi: f64) -> Self {
        Self { kind: BasisKind::Cubic, dim, domain: (lo, hi) }
    }

    /// Cyclic basis on `[lo, hi]` with period `hi - lo`; `f(lo) = f(hi)`.
    pub fn cyclic(dim: usize, lo: f64, hi: f64) -> Self {
        Self { kind: BasisKind::CyclicCubic, dim, domain: (lo, hi) }
    }
}

/// Evaluated cubic regression spline basis with its curvature penalty.
#[derive(Debug, Clone)]
pub struct CubicBasis {
    spec: BasisSpec,
    knots: Vec<f64>,
    /// Maps knot values to second derivatives at the knots.
    second_deriv: DMatrix<f64>,
    penalty: DMatrix<f64>,
}

impl CubicBasis {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        let (lo, hi) = spec.domain;
        if spec.dim < 4 {
            return Err(Error::Config(format!("basis dimension {} below 4", spec.dim)));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid basis domain [{lo}, {hi}]")));
        }
        let k = spec.dim;
        match spec.kind {
            BasisKind::Cubic => {
                let knots: Vec<f64> = (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect();
                let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
                let mut d = DMatrix::zeros(k - 2, k);
                let mut b = DMatrix::zeros(k - 2, k - 2);
                for i in 0..k - 2 {
                    d[(i, i)] = 1.0 / h[i];
                    d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
                    d[(i, i + 2)] = 1.0 / h[i + 1];
                    b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
                    if i + 1 < k - 2 {
                        b[(i, i + 1)] = h[i + 1] / 6.0;
                        b[(i + 1, i)] = h[i + 1] / 6.0;
                    }
                }
                let chol = Cholesky::new(b).ok_or_else(|| Error::Numerical("spline band matrix not PD".into()))?;
                let interior = chol.solve(&d);
                let mut second_deriv = DMatrix::zeros(k, k);
                second_deriv.rows_mut(1, k - 2).copy_from(&interior);
                let penalty = symmetrize(&(d.transpose() * &interior));
                Ok(Self { spec, knots, second_deriv, penalty })
            }
            BasisKind::CyclicCubic => {
                let period = hi - lo;
                let knots: Vec<f64> = (0..k).map(|j| lo + period * j as f64 / k as f64).collect();
                let h: Vec<f64> = (0..k)
                    .map(|j| if j + 1 < k { knots[j + 1] - knots[j] } else { lo + period - knots[k - 1] })
                    .collect();
                let mut d = DMatrix::zeros(k, k);
                let mut b = DMatrix::zeros(k, k);
                for j in 0..k {
                    let prev = (j + k - 1) % k;
                    let next = (j + 1) % k;
                    d[(j, prev)] += 1.0 / h[prev];
                    d[(j, j)] += -1.0 / h[prev] - 1.0 / h[j];
                    d[(j, next)] += 1.0 / h[j];
                    b[(j, prev)] += h[prev] / 6.0;
                    b[(j, j)] += (h[prev] + h[j]) / 3.0;
                    b[(j, next)] += h[j] / 6.0;
                }
                let chol = Cholesky::new(b).ok_or_else(|| Error::Numerical("cyclic band matrix not PD".into()))?;
                let second_deriv = chol.solve(&d);
                let penalty = symmetrize(&(d.transpose() * &second_deriv));
                Ok(Self { spec, knots, second_deriv, penalty })
            }
        }
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// Basis row at `x`. Cyclic bases wrap `x` into `[lo, hi)`, so `hi` evaluates as `lo`.
    pub fn evaluate(&self, x: f64) -> Result<Vec<f64>> {
        let (lo, hi) = self.spec.domain;
        let slack = 1e-12 * (hi - lo);
        if !x.is_finite() || x < lo - slack || x > hi + slack {
            return Err(Error::Data(format!("covariate {x} outside basis domain [{lo}, {hi}]")));
        }
        let k = self.spec.dim;
        let (j, left, right, next) = match self.spec.kind {
            BasisKind::Cubic => {
                let x = x.clamp(lo, hi);
                let j = self.knots.partition_point(|&kn| kn <= x).saturating_sub(1).min(k - 2);
                (j, self.knots[j], self.knots[j + 1], j + 1)
            }
            BasisKind::CyclicCubic => {
                let period = hi - lo;
                let mut xr = lo + (x - lo).rem_euclid(period);
                if xr >= hi {
                    xr = lo;
                }
                let j = self.knots.partition_point(|&kn| kn <= xr).saturating_sub(1);
                let right = if j + 1 < k { self.knots[j + 1] } else { lo + period };
                return Ok(self.row(j, (j + 1) % k, self.knots[j], right, xr));
            }
        };
        Ok(self.row(j, next, left, right, x))
    }

    fn row(&self, j: usize, next: usize, left: f64, right: f64, x: f64) -> Vec<f64> {
        let h = right - left;
        let am = (right - x) / h;
        let ap = (x - left) / h;
        let cm = ((right - x).powi(3) / h - h * (right - x)) / 6.0;
        let cp = ((x - left).powi(3) / h - h * (x - left)) / 6.0;
        let mut row: Vec<f64> = (0..self.spec.dim)
            .map(|c| cm * self.second_deriv[(j, c)] + cp * self.second_deriv[(next, c)])
            .collect();
        row[j] += am;
        row[next] += ap;
        row
    }

    pub fn design(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(xs.len(), self.spec.dim);
        for (i, &v) in xs.iter().enumerate() {
            let row = self.evaluate(v)?;
            for (c, r) in row.into_iter().enumerate() {
                x[(i, c)] = r;
            }
        }
        Ok(x)
    }

    /// Second derivatives of the fitted curve at the knots for `coef`.
    pub fn knot_second_derivatives(&self, coef: &DVector<f64>) -> DVector<f64> {
        &self.second_deriv * coef
    }
}

/// Basis matrix at `x` and the curvature penalty for `spec`.
pub fn make_basis(spec: BasisSpec, x: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if spec.dim > distinct.len() {
        return Err(Error::Config(format!(
            "basis dimension {} exceeds the {} distinct covariate values",
            spec.dim,
            distinct.len()
        )));
    }
    let basis = CubicBasis::new(spec)?;
    let design = basis.design(x)?;
    Ok((design, basis.penalty().clone()))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Linear model matrix abstraction. The solver only needs `Xβ`, `XᵀWX` and `Xᵀv`, so
/// structured designs never have to be materialized.
pub trait ModelMatrix {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64>;
    fn weighted_gram(&self, weights: &DVector<f64>) -> DMatrix<f64>;
    fn transpose_mul(&self, v: &DVector<f64>) -> DVector<f64>;
}

impl ModelMatrix for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        self * beta
    }

    fn weighted_gram(&self, weights: &DVector<f64>) -> DMatrix<f64> {
        let mut scaled = self.clone();
        for (mut row, &w) in scaled.row_iter_mut().zip(weights.iter()) {
            row *= w;
        }
        symmetrize(&self.tr_mul(&scaled))
    }

    fn transpose_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.tr_mul(v)
    }
}

/// `X = X_inner · Z` for a fixed `p_inner × p` matrix `Z`.
#[derive(Debug, Clone)]
pub struct Reparameterized<M> {
    pub inner: M,
    pub z: DMatrix<f64>,
}

impl<M: ModelMatrix> ModelMatrix for Reparameterized<M> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    fn ncols(&self) -> usize {
        self.z.ncols()
    }

    fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        self.inner.linear_predictor(&(&self.z * beta))
    }

    fn weighted_gram(&self, weights: &DVector<f64>) -> DMatrix<f64> {
        let g = self.inner.weighted_gram(weights);
        symmetrize(&(self.z.tr_mul(&(g * &self.z))))
    }

    fn transpose_mul(&self, v: &DVector<f64>) -> DVector<f64> {
        self.z.tr_mul(&self.inner.transpose_mul(v))
    }
}

/// Smoothing parameter treatment for one penalty block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    /// Selected by GCV; `initial` seeds the search, otherwise a scale-matched value is used.
    Gcv { initial: Option<f64> },
}

#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    /// First coefficient covered by the block.
    pub start: usize,
    /// Symmetric PSD penalty over `start..start + matrix.nrows()`.
    pub matrix: DMatrix<f64>,
    pub lambda: Lambda,
}

impl PenaltyBlock {
    pub fn new(start: usize, matrix: DMatrix<f64>, lambda: Lambda) -> Self {
        Self { start, matrix, lambda }
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    fn quad(&self, beta: &DVector<f64>) -> f64 {
        let b = beta.rows(self.start, self.size());
        b.dot(&(&self.matrix * b))
    }
}

#[derive(Debug, Clone)]
pub struct PenalizedDesign<M> {
    pub x: M,
    pub offset: DVector<f64>,
    pub blocks: Vec<PenaltyBlock>,
}

impl<M: ModelMatrix> PenalizedDesign<M> {
    pub fn new(x: M, offset: DVector<f64>, blocks: Vec<PenaltyBlock>) -> Result<Self> {
        if offset.len() != x.nrows() {
            return Err(Error::Config(format!("offset length {} != {} rows", offset.len(), x.nrows())));
        }
        let p = x.ncols();
        let mut taken = vec![false; p];
        for b in &blocks {
            if b.matrix.nrows() != b.matrix.ncols() || b.start + b.size() > p {
                return Err(Error::Config("penalty block does not fit the design".into()));
            }
            for t in &mut taken[b.start..b.start + b.size()] {
                if *t {
                    return Err(Error::Config("overlapping penalty blocks".into()));
                }
                *t = true;
            }
        }
        Ok(Self { x, offset, blocks })
    }

    /// Design without offset or penalties.
    pub fn unpenalized(x: M) -> Self {
        let n = x.nrows();
        Self { x, offset: DVector::zeros(n), blocks: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitControl {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for FitControl {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-7, max_halvings: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coefficients: DVector<f64>,
    /// Smoothing parameter per penalty block, in block order.
    pub smoothing: Vec<f64>,
    pub edf: f64,
    pub gcv: f64,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Penalized deviance after each accepted step.
    pub penalized_deviance_trace: Vec<f64>,
}

/// Poisson deviance. Cells with `y = 0` contribute `2μ`.
pub fn poisson_deviance_terms(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| if y > 0.0 { y * (y / m).ln() - (y - m) } else { m })
        .sum::<f64>()
}

fn robust_cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let p = a.nrows().max(1);
    let scale = (a.trace() / p as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = 1e-12 * scale;
    for _ in 0..12 {
        let mut j = a.clone();
        for i in 0..a.nrows() {
            j[(i, i)] += eps;
        }
        if let Some(c) = Cholesky::new(j) {
            return Ok(c);
        }
        eps *= 10.0;
    }
    Err(Error::Numerical("penalized normal equations are not positive definite".into()))
}

/// Orthogonal change of coefficients that diagonalizes every penalty block; in these
/// coordinates a symmetric diagonal rescaling keeps `G + Σ λS` well conditioned even
/// for very large λ.
struct PenaltyBasis {
    vectors: Vec<DMatrix<f64>>,
    values: Vec<DVector<f64>>,
}

impl PenaltyBasis {
    fn new(blocks: &[PenaltyBlock]) -> Self {
        let mut vectors = Vec::with_capacity(blocks.len());
        let mut values = Vec::with_capacity(blocks.len());
        for b in blocks {
            let eig = symmetrize(&b.matrix).symmetric_eigen();
            let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            values.push(eig.eigenvalues.map(|v| if v > 1e-12 * max_ev { v } else { 0.0 }));
            vectors.push(eig.eigenvectors);
        }
        Self { vectors, values }
    }

    fn rotate_gram(&self, blocks: &[PenaltyBlock], mut g: DMatrix<f64>) -> DMatrix<f64> {
        for (b, v) in blocks.iter().zip(&self.vectors) {
            let s = b.size();
            let cols = g.columns(b.start, s) * v;
            g.columns_mut(b.start, s).copy_from(&cols);
            let rows = v.tr_mul(&g.rows(b.start, s));
            g.rows_mut(b.start, s).copy_from(&rows);
        }
        symmetrize(&g)
    }

    fn rotate_vec(&self, blocks: &[PenaltyBlock], mut x: DVector<f64>) -> DVector<f64> {
        for (b, v) in blocks.iter().zip(&self.vectors) {
            let r = v.tr_mul(&x.rows(b.start, b.size()));
            x.rows_mut(b.start, b.size()).copy_from(&r);
        }
        x
    }

    fn unrotate_vec(&self, blocks: &[PenaltyBlock], mut x: DVector<f64>) -> DVector<f64> {
        for (b, v) in blocks.iter().zip(&self.vectors) {
            let r = v * x.rows(b.start, b.size());
            x.rows_mut(b.start, b.size()).copy_from(&r);
        }
        x
    }
}

/// Weighted penalized least-squares sub-problem of one IRLS step, held in the
/// penalty eigenbasis.
struct WorkingSystem<'a> {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    zwz: f64,
    n: f64,
    blocks: &'a [PenaltyBlock],
    basis: &'a PenaltyBasis,
}

struct Solved {
    beta: DVector<f64>,
    rss: f64,
    edf: f64,
}

fn gcv_from(n: f64, rss: f64, edf: f64) -> f64 {
    if edf >= n {
        f64::INFINITY
    } else {
        n * rss / (n - edf).powi(2)
    }
}

fn jacobi_scale(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(a.nrows(), (0..a.nrows()).map(|i| {
        let d = a[(i, i)];
        if d > 0.0 && d.is_finite() { 1.0 / d.sqrt() } else { 1.0 }
    }))
}

fn scale_sym(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j])
}

impl<'a> WorkingSystem<'a> {
    fn build<M: ModelMatrix>(
        x: &M,
        z: &DVector<f64>,
        w: &DVector<f64>,
        blocks: &'a [PenaltyBlock],
        basis: &'a PenaltyBasis,
    ) -> Self {
        let wz = w.component_mul(z);
        Self {
            gram: basis.rotate_gram(blocks, x.weighted_gram(w)),
            rhs: basis.rotate_vec(blocks, x.transpose_mul(&wz)),
            zwz: wz.dot(z),
            n: z.len() as f64,
            blocks,
            basis,
        }
    }

    /// `G + Σ_b λ_b Λ_b` with block `shift.0` using `shift.1` in place of its λ.
    fn penalized(&self, lambdas: &[f64], shift: Option<(usize, f64)>) -> DMatrix<f64> {
        let mut a = self.gram.clone();
        for (b, (blk, &lam)) in self.blocks.iter().zip(lambdas).enumerate() {
            let lam = match shift {
                Some((sb, l)) if sb == b => l,
                _ => lam,
            };
            if lam == 0.0 {
                continue;
            }
            for (i, ev) in self.basis.values[b].iter().enumerate() {
                a[(blk.start + i, blk.start + i)] += lam * ev;
            }
        }
        a
    }

    fn solve(&self, lambdas: &[f64]) -> Result<Solved> {
        let a = self.penalized(lambdas, None);
        let d = jacobi_scale(&a);
        let chol = robust_cholesky(&scale_sym(&a, &d))?;
        let theta = chol.solve(&self.rhs.component_mul(&d)).component_mul(&d);
        let edf = chol.solve(&scale_sym(&self.gram, &d)).trace();
        let rss = (self.zwz - 2.0 * theta.dot(&self.rhs) + theta.dot(&(&self.gram * &theta))).max(0.0);
        Ok(Solved { beta: self.basis.unrotate_vec(self.blocks, theta), rss, edf })
    }

    /// Default smoothing parameter matching the penalty to the block's share of the Gram matrix.
    fn lambda_scale(&self, b: usize) -> f64 {
        let blk = &self.blocks[b];
        let g = self.gram.view((blk.start, blk.start), (blk.size(), blk.size())).trace();
        let t = self.basis.values[b].sum();
        if t > 0.0 && g > 0.0 {
            g / t
        } else {
            1.0
        }
    }

    /// GCV profile of block `b` around its current smoothing parameter.
    fn profile(&self, lambdas: &[f64], b: usize) -> Result<BlockProfile> {
        let blk = &self.blocks[b];
        let p = self.gram.nrows();
        let lambda0 = lambdas[b];
        let c = self.penalized(lambdas, None);
        let d = jacobi_scale(&c);
        let chol = robust_cholesky(&scale_sym(&c, &d))?;
        let l = chol.l();
        let solve_l = |m: &DMatrix<f64>| {
            l.solve_lower_triangular(m)
                .ok_or_else(|| Error::Numerical("singular triangular factor".into()))
        };
        let evs = &self.basis.values[b];
        let keep: Vec<usize> = (0..blk.size()).filter(|&i| evs[i] > 0.0).collect();
        let mut rt = DMatrix::zeros(p, keep.len());
        for (col, &i) in keep.iter().enumerate() {
            rt[(blk.start + i, col)] = evs[i].sqrt() * d[blk.start + i];
        }
        let (u, sv, _) = thin_svd(&solve_l(&rt)?)?;
        let sig2 = DVector::from_iterator(sv.len(), sv.iter().map(|s| s * s));
        let cvec = solve_l(&DMatrix::from_column_slice(p, 1, self.rhs.component_mul(&d).as_slice()))?
            .column(0)
            .into_owned();
        let t = solve_l(&scale_sym(&self.gram, &d))?;
        let pm = symmetrize(&solve_l(&t.transpose())?);
        let pu = &pm * &u;
        Ok(BlockProfile {
            a: u.tr_mul(&cvec),
            lambda0,
            cc: cvec.dot(&cvec),
            cpc: cvec.dot(&(&pm * &cvec)),
            q: pu.tr_mul(&cvec),
            qq: u.tr_mul(&pu),
            trp: pm.trace(),
            sig2,
            zwz: self.zwz,
            n: self.n,
        })
    }
}

/// GCV profile of one block's smoothing parameter with the others held fixed.
/// With `C = LLᵀ` the penalized Gram matrix at the current `λ₀` and
/// `L⁻¹ S L⁻ᵀ = U Σ² Uᵀ`, moving to `λ` gives
/// `A⁻¹ = L⁻ᵀ (I − U D Uᵀ) L⁻¹` with `D = δσ²/(1 + δσ²)`, `δ = λ − λ₀`,
/// so each evaluation costs O(rank²).
struct BlockProfile {
    a: DVector<f64>,
    lambda0: f64,
    sig2: DVector<f64>,
    cc: f64,
    cpc: f64,
    q: DVector<f64>,
    qq: DMatrix<f64>,
    trp: f64,
    zwz: f64,
    n: f64,
}

impl BlockProfile {
    fn gcv(&self, lambda: f64) -> f64 {
        let delta = lambda - self.lambda0;
        let d = self.sig2.map(|s| delta * s / (1.0 + delta * s));
        let da = d.component_mul(&self.a);
        let vc = self.cc - da.dot(&self.a);
        let vpv = self.cpc - 2.0 * da.dot(&self.q) + da.dot(&(&self.qq * &da));
        let rss = (self.zwz - 2.0 * vc + vpv).max(0.0);
        let edf = self.trp - d.iter().enumerate().map(|(i, di)| di * self.qq[(i, i)]).sum::<f64>();
        let g = gcv_from(self.n, rss, edf);
        if g.is_finite() { g } else { f64::INFINITY }
    }
}

const GRID_POINTS: usize = 21;
const LOG_LAMBDA_SPAN: f64 = std::f64::consts::LN_10;

/// Log-grid scan over two decades centred on `current`, then golden-section refinement
/// around the best grid point. Returns the new smoothing parameter and its GCV score.
fn search_block(profile: &BlockProfile, current: f64, scale: f64) -> (f64, f64) {
    let lo_bound = (scale * 1e-12).ln();
    let hi_bound = (scale * 1e12).ln();
    let centre = current.ln().clamp(lo_bound, hi_bound);
    let f = |ll: f64| profile.gcv(ll.exp());
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| (centre - LOG_LAMBDA_SPAN + 2.0 * LOG_LAMBDA_SPAN * i as f64 / (GRID_POINTS - 1) as f64).clamp(lo_bound, hi_bound))
        .collect();
    let scores: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(GRID_POINTS / 2);
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(GRID_POINTS - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..40 {
        if (b - a).abs() < 1e-4 {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = f(x2);
        }
    }
    let (xg, fg) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    if fg <= scores[best] {
        (xg.exp(), fg)
    } else {
        (grid[best].exp(), scores[best])
    }
}

/// One coordinate sweep of GCV smoothing selection over the non-fixed blocks.
fn sweep_smoothing(system: &WorkingSystem<'_>, lambdas: &mut [f64]) -> Result<()> {
    for b in 0..system.blocks.len() {
        if matches!(system.blocks[b].lambda, Lambda::Fixed(_)) {
            continue;
        }
        let scale = system.lambda_scale(b);
        let profile = system.profile(lambdas, b)?;
        let (lam, _) = search_block(&profile, lambdas[b], scale);
        lambdas[b] = lam;
    }
    Ok(())
}

fn initial_lambdas(system: &WorkingSystem<'_>) -> Vec<f64> {
    system
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| match b.lambda {
            Lambda::Fixed(v) => v,
            Lambda::Gcv { initial: Some(v) } if v > 0.0 => v,
            Lambda::Gcv { .. } => system.lambda_scale(i),
        })
        .collect()
}

/// Deviance-based GCV `n·D_w / (n − edf)²` of the weighted penalized least-squares
/// problem with working response `z` and weights `w`.
pub fn gcv_score<M: ModelMatrix>(
    z: &[f64],
    w: &[f64],
    x: &M,
    blocks: &[PenaltyBlock],
    lambdas: &[f64],
) -> Result<f64> {
    let (z, w) = check_working(z, w, x)?;
    if lambdas.len() != blocks.len() {
        return Err(Error::Config("one smoothing parameter per block required".into()));
    }
    let basis = PenaltyBasis::new(blocks);
    let system = WorkingSystem::build(x, &z, &w, blocks, &basis);
    let s = system.solve(lambdas)?;
    Ok(gcv_from(system.n, s.rss, s.edf))
}

/// Effective degrees of freedom `tr((XᵀWX + Σ λS)⁻¹ XᵀWX)`.
pub fn effective_dof<M: ModelMatrix>(w: &[f64], x: &M, blocks: &[PenaltyBlock], lambdas: &[f64]) -> Result<f64> {
    let z = vec![0.0; w.len()];
    let (z, w) = check_working(&z, w, x)?;
    let basis = PenaltyBasis::new(blocks);
    let system = WorkingSystem::build(x, &z, &w, blocks, &basis);
    Ok(system.solve(lambdas)?.edf)
}

/// GCV-optimal smoothing parameters for a fixed working problem, by repeated
/// coordinate sweeps until the parameters stop moving.
pub fn select_smoothing<M: ModelMatrix>(z: &[f64], w: &[f64], x: &M, blocks: &[PenaltyBlock]) -> Result<(Vec<f64>, f64)> {
    let (z, w) = check_working(z, w, x)?;
    let basis = PenaltyBasis::new(blocks);
    let system = WorkingSystem::build(x, &z, &w, blocks, &basis);
    let mut lambdas = initial_lambdas(&system);
    for _ in 0..50 {
        let before = lambdas.clone();
        sweep_smoothing(&system, &mut lambdas)?;
        let moved = before.iter().zip(&lambdas).any(|(a, b)| (a.ln() - b.ln()).abs() > 1e-6);
        if !moved {
            break;
        }
    }
    let s = system.solve(&lambdas)?;
    Ok((lambdas, gcv_from(system.n, s.rss, s.edf)))
}

fn check_working<M: ModelMatrix>(z: &[f64], w: &[f64], x: &M) -> Result<(DVector<f64>, DVector<f64>)> {
    if z.len() != x.nrows() || w.len() != x.nrows() {
        return Err(Error::Config("working response/weights do not match the design".into()));
    }
    if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Data("working weights must be positive".into()));
    }
    Ok((DVector::from_column_slice(z), DVector::from_column_slice(w)))
}

struct Iterate {
    beta: DVector<f64>,
    eta: DVector<f64>,
    mu: DVector<f64>,
    deviance: f64,
}

fn evaluate_beta<M: ModelMatrix>(design: &PenalizedDesign<M>, y: &[f64], beta: DVector<f64>) -> Iterate {
    let eta = design.x.linear_predictor(&beta) + &design.offset;
    let mu = eta.map(|e| e.exp().max(1e-300));
    let deviance = poisson_deviance_terms(y, mu.as_slice());
    Iterate { beta, eta, mu, deviance }
}

fn penalty_value(blocks: &[PenaltyBlock], lambdas: &[f64], beta: &DVector<f64>) -> f64 {
    blocks.iter().zip(lambdas).map(|(b, &l)| if l == 0.0 { 0.0 } else { l * b.quad(beta) }).sum()
}

/// Penalized Poisson regression with log link:
/// minimizes `D(β) + Σ_b λ_b β_bᵀ S_b β_b`, with GCV blocks re-selected every step.
///
/// `start` warm-starts the coefficients; otherwise the iteration starts from
/// `μ = y + 0.1`.
pub fn fit_penalized_poisson<M: ModelMatrix>(
    design: &PenalizedDesign<M>,
    y: &[f64],
    control: &FitControl,
    start: Option<&DVector<f64>>,
) -> Result<PenalizedFit> {
    let n = design.x.nrows();
    let p = design.x.ncols();
    if y.len() != n {
        return Err(Error::Config(format!("{} responses for {n} design rows", y.len())));
    }
    if y.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data("responses must be finite and nonnegative".into()));
    }
    if y.iter().all(|&v| v == 0.0) {
        return Err(Error::Data("all-zero response: the Poisson log-mean is unbounded".into()));
    }

    let mut current: Option<Iterate> = start
        .filter(|b| b.len() == p)
        .map(|b| evaluate_beta(design, y, b.clone()))
        .filter(|it| it.deviance.is_finite());
    let (mut eta, mut mu) = match &current {
        Some(it) => (it.eta.clone(), it.mu.clone()),
        None => {
            let mu = DVector::from_iterator(n, y.iter().map(|&v| v + 0.1));
            (mu.map(f64::ln), mu)
        }
    };

    let basis = PenaltyBasis::new(&design.blocks);
    let mut lambdas: Option<Vec<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_stats = (f64::NAN, f64::NAN);
    let mut best: Option<(f64, Iterate, Vec<f64>, (f64, f64))> = None;

    for iter in 1..=control.max_iter {
        iterations = iter;
        let z = DVector::from_iterator(
            n,
            (0..n).map(|i| eta[i] - design.offset[i] + (y[i] - mu[i]) / mu[i]),
        );
        let system = WorkingSystem::build(&design.x, &z, &mu, &design.blocks, &basis);
        let lam = lambdas.get_or_insert_with(|| initial_lambdas(&system));
        sweep_smoothing(&system, lam)?;
        let lam = lam.clone();
        let solved = system.solve(&lam)?;
        let mut next = evaluate_beta(design, y, solved.beta);
        let mut pd_next = next.deviance + penalty_value(&design.blocks, &lam, &next.beta);

        if let Some(prev) = &current {
            let pd_prev = prev.deviance + penalty_value(&design.blocks, &lam, &prev.beta);
            let mut halvings = 0;
            while (!pd_next.is_finite() || pd_next > pd_prev + 1e-12 * pd_prev.abs()) && halvings < control.max_halvings {
                let mid = (&prev.beta + &next.beta) * 0.5;
                next = evaluate_beta(design, y, mid);
                pd_next = next.deviance + penalty_value(&design.blocks, &lam, &next.beta);
                halvings += 1;
            }
        }
        if !pd_next.is_finite() {
            return Err(Error::Numerical("fitted mean overflowed; step-halving did not recover".into()));
        }

        let change = match &current {
            Some(prev) => (&next.beta - &prev.beta).norm() / next.beta.norm().max(1.0),
            None => f64::INFINITY,
        };
        last_stats = (solved.edf, gcv_from(system.n, solved.rss, solved.edf));
        trace.push(pd_next);
        eta = next.eta.clone();
        mu = next.mu.clone();
        let improves = best.as_ref().is_none_or(|(b, ..)| pd_next < *b);
        if improves {
            best = Some((pd_next, Iterate { beta: next.beta.clone(), eta: eta.clone(), mu: mu.clone(), deviance: next.deviance }, lam.clone(), last_stats));
        }
        current = Some(next);
        if change < control.tol {
            converged = true;
            break;
        }
    }

    let lambdas = lambdas.unwrap_or_default();
    let (final_it, smoothing, (edf, gcv)) = if converged {
        (current.expect("at least one iteration"), lambdas, last_stats)
    } else {
        let (_, it, lam, stats) = best.expect("at least one iteration");
        (it, lam, stats)
    };
    Ok(PenalizedFit {
        coefficients: final_it.beta,
        smoothing,
        edf,
        gcv,
        converged,
        iterations,
        deviance: final_it.deviance,
        penalized_deviance_trace: trace,
    })
}
