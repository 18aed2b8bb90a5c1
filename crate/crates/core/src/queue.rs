//! Hourly-varying M/M/s staffing benchmark.
//!
//! Observed counts drive a discrete-event simulation: the `y_t` arrivals of hour `t`
//! are sorted uniforms on `[t, t+1)`, each caller carries an Exponential(ν) service
//! requirement, and the server count `ŝ_t` chosen from a forecast `λ̂_t` is applied at
//! the hour boundary. The hourly cost is `Pen(n_t, y_t) + ŝ_t` with
//! `Pen = q (y − n)` when fewer than `θ y` callers were served immediately.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};
use std::io;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{segment_blocks, HourlyCountSeries};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Purpose};

/// Steady-state probability that an M/M/s arrival is served immediately,
/// `1 − ErlangC(s, λ/ν)`; zero when `ρ = λ/(νs) ≥ 1`.
///
/// Evaluated through the Erlang-B recursion `B_k = r B_{k−1} / (k + r B_{k−1})`, which
/// stays finite for any `s`.
pub fn erlang_g(lambda: f64, s: usize, nu: f64) -> Result<f64> {
    if s < 1 {
        return Err(Error::Config("server count must be at least 1".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) || !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::Config(format!("invalid arrival rate {lambda} or service rate {nu}")));
    }
    let r = lambda / nu;
    let rho = r / s as f64;
    if rho >= 1.0 {
        return Ok(0.0);
    }
    let mut b = 1.0;
    for k in 1..=s {
        b = r * b / (k as f64 + r * b);
    }
    let c = b / (1.0 - rho * (1.0 - b));
    Ok((1.0 - c).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueParams {
    /// Penalty per caller not served immediately, in server-hours.
    pub q: f64,
    /// Target fraction served immediately.
    pub theta: f64,
    /// Service rate per server per hour.
    pub nu: f64,
    /// Monte-Carlo draws per staffing decision.
    #[serde(default = "default_j")]
    pub j: usize,
    #[serde(default = "default_s_min")]
    pub s_min: usize,
}

fn default_j() -> usize {
    25_000
}

fn default_s_min() -> usize {
    1
}

impl QueueParams {
    pub fn new(q: f64, theta: f64, nu: f64) -> Self {
        Self { q, theta, nu, j: default_j(), s_min: default_s_min() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return Err(Error::Config(format!("penalty q = {} must be non-negative", self.q)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta = {} must lie in (0, 1)", self.theta)));
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("service rate nu = {} must be positive", self.nu)));
        }
        if self.j < 1 || self.s_min < 1 {
            return Err(Error::Config("J and s_min must be at least 1".into()));
        }
        Ok(())
    }

    /// `Pen(n, y)`: `q (y − n)` if `n < θ y`, else zero.
    pub fn penalty(&self, n: u32, y: u32) -> f64 {
        self.q * penalty_units(n, y, self.theta) as f64
    }
}

fn penalty_units(n: u32, y: u32, theta: f64) -> u64 {
    if (n as f64) < theta * y as f64 {
        (y - n) as u64
    } else {
        0
    }
}

/// `F(n) = P(N ≤ n)` for `N ~ Binomial(y, g)`, `n = 0..=y`.
pub fn binomial_cdf(y: u32, g: f64) -> Vec<f64> {
    binomial_cdf_upto(y, g, y)
}

/// `F(0), …, F(min(top, y))`.
fn binomial_cdf_upto(y: u32, g: f64, top: u32) -> Vec<f64> {
    let top = top.min(y) as usize;
    let y = y as usize;
    if g <= 0.0 {
        return vec![1.0; top + 1];
    }
    if g >= 1.0 {
        let mut f = vec![0.0; top + 1];
        if top == y {
            f[y] = 1.0;
        }
        return f;
    }
    let lq = (-g).ln_1p();
    let mut f = Vec::with_capacity(top + 1);
    let p0 = (y as f64 * lq).exp();
    if p0 > 1e-280 {
        // pmf ratio recurrence p(n) = p(n−1) (y−n+1)/n · g/(1−g)
        let odds = g / (1.0 - g);
        let (mut p, mut acc) = (p0, 0.0);
        for n in 0..=top {
            if n > 0 {
                p *= (y - n + 1) as f64 / n as f64 * odds;
            }
            acc += p;
            f.push(acc.min(1.0));
        }
    } else {
        let lg = g.ln();
        let (mut log_choose, mut acc) = (0.0, 0.0);
        for n in 0..=top {
            if n > 0 {
                log_choose += ((y - n + 1) as f64).ln() - (n as f64).ln();
            }
            acc += (log_choose + n as f64 * lg + (y - n) as f64 * lq).exp();
            f.push(acc.min(1.0));
        }
    }
    f
}

/// Inverse-CDF binomial draw from a uniform: the smallest `n` with `u < F(n)`.
pub fn binomial_from_uniform(cdf: &[f64], u: f64) -> u32 {
    cdf.iter().position(|&f| u < f).unwrap_or(cdf.len() - 1) as u32
}

/// The `J` Monte-Carlo pairs `(Y_j, U_j)` behind one staffing decision; `N_j | Y_j` is
/// then `binomial_from_uniform(F(·; Y_j, g_s), U_j)` for every candidate `s`, so the
/// candidates share draws and the estimated penalty is monotone in `s`.
pub fn draw_pairs<R: Rng + ?Sized>(lambda: f64, j: usize, rng: &mut R) -> Result<Vec<(u32, f64)>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Numerical(format!("forecast intensity {lambda} is not a valid rate")));
    }
    if lambda == 0.0 {
        return Ok(vec![(0, 0.0); j]);
    }
    let pois = Poisson::new(lambda).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((0..j)
        .map(|_| {
            let y = pois.sample(rng) as u32;
            (y, rng.random::<f64>())
        })
        .collect())
}

/// Staffing draws grouped by `Y`, with the uniforms of each group sorted.
#[derive(Debug, Clone)]
pub struct StaffingDraws {
    /// `(y, start, end)` ranges into `uniforms`.
    groups: Vec<(u32, usize, usize)>,
    uniforms: Vec<f64>,
    j: usize,
}

impl StaffingDraws {
    pub fn from_pairs(pairs: &[(u32, f64)]) -> Self {
        let mut sorted = pairs.to_vec();
        sorted.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut groups: Vec<(u32, usize, usize)> = Vec::new();
        for (i, &(y, _)) in sorted.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.0 == y => g.2 = i + 1,
                _ => groups.push((y, i, i + 1)),
            }
        }
        Self { groups, uniforms: sorted.into_iter().map(|p| p.1).collect(), j: pairs.len() }
    }

    /// Σ_j (Y_j − N_j) 1[N_j < θ Y_j] under immediate-service probability `g`.
    pub fn penalty_units(&self, g: f64, theta: f64) -> u64 {
        let mut total = 0u64;
        for &(y, start, end) in &self.groups {
            if y == 0 {
                continue;
            }
            let us = &self.uniforms[start..end];
            // penalized draws have N < θY, i.e. N ≤ top
            let Some(top) = (0..y).rev().find(|&n| (n as f64) < theta * y as f64) else { continue };
            let cdf = binomial_cdf_upto(y, g, top);
            // draws with N = n are those with F(n−1) ≤ u < F(n)
            let mut below_prev = 0usize;
            for (n, &f) in cdf.iter().enumerate() {
                let n = n as u32;
                let below = below_prev + us[below_prev..].partition_point(|&u| u < f);
                total += (below - below_prev) as u64 * (y - n) as u64;
                below_prev = below;
            }
        }
        total
    }

    pub fn len(&self) -> usize {
        self.j
    }

    pub fn is_empty(&self) -> bool {
        self.j == 0
    }
}

/// Monte-Carlo estimate of `E[Pen(N, Y)] + s` for `s` servers.
pub fn estimated_cost(draws: &StaffingDraws, lambda: f64, s: usize, params: &QueueParams) -> Result<f64> {
    let g = erlang_g(lambda, s, params.nu)?;
    let units = if params.q == 0.0 { 0 } else { draws.penalty_units(g, params.theta) };
    Ok(params.q * units as f64 / draws.len() as f64 + s as f64)
}

/// `ŝ = argmin_s E[Pen(N, Y)] + s` over `s ≥ s_min` (smallest `s` on ties).
///
/// The penalty is non-negative, so every `s' ≥ s` costs at least `s`; scanning stops at
/// the first candidate with `s ≥ best_total`, which makes the answer the global argmin.
pub fn staff_level<R: Rng + ?Sized>(lambda: f64, params: &QueueParams, rng: &mut R) -> Result<usize> {
    params.validate()?;
    if lambda == 0.0 || params.q == 0.0 {
        return Ok(params.s_min);
    }
    let draws = StaffingDraws::from_pairs(&draw_pairs(lambda, params.j, rng)?);
    staff_from_draws(&draws, lambda, params)
}

pub fn staff_from_draws(draws: &StaffingDraws, lambda: f64, params: &QueueParams) -> Result<usize> {
    let mut best = (params.s_min, estimated_cost(draws, lambda, params.s_min, params)?);
    // every s with ρ ≥ 1 has g = 0 and the same penalty as s_min plus more servers
    let stable = ((lambda / params.nu).floor() as usize + 1).max(params.s_min + 1);
    let mut s = if erlang_g(lambda, params.s_min, params.nu)? == 0.0 { stable } else { params.s_min + 1 };
    while (s as f64) < best.1 {
        let c = estimated_cost(draws, lambda, s, params)?;
        if c < best.1 {
            best = (s, c);
        }
        if c == s as f64 {
            // zero penalty: larger s only add servers
            break;
        }
        s += 1;
    }
    Ok(best.0)
}

/// Sorted arrival times of `y` callers in `[t, t+1)`.
pub fn gen_arrivals<R: Rng + ?Sized>(y: u32, t: f64, rng: &mut R) -> Vec<f64> {
    let mut a: Vec<f64> = (0..y).map(|_| t + rng.random::<f64>()).collect();
    a.sort_by(f64::total_cmp);
    // guard against t + u rounding up to t + 1
    let top = t + 1.0;
    for v in &mut a {
        if *v >= top {
            *v = top.next_down();
        }
    }
    a
}

/// Unit-rate exponential draws; a caller's service time at rate ν is `e / ν`.
pub fn gen_unit_services<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| Exp1.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Queue state between hours.
#[derive(Debug, Clone, Default)]
pub struct SimState {
    /// Completion times of callers in service.
    in_service: BinaryHeap<Reverse<Time>>,
    /// Waiting callers as `(arrival time, service duration)`, first come first served.
    waiting: VecDeque<(f64, f64)>,
    servers: usize,
}

impl SimState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn busy(&self) -> usize {
        self.in_service.len()
    }

    pub fn waiting(&self) -> usize {
        self.waiting.len()
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    /// Completion times of the callers in service, ascending.
    pub fn completion_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.in_service.iter().map(|r| r.0 .0).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    fn fill_idle(&mut self, now: f64) {
        while self.in_service.len() < self.servers {
            let Some((_, dur)) = self.waiting.pop_front() else { break };
            self.in_service.push(Reverse(Time(now + dur)));
        }
    }

    /// Applies a new server count at time `now`: idle servers are removed first, then busy
    /// servers in ascending order of remaining service time, whose callers and work are
    /// discarded. Added servers immediately take waiting callers.
    pub fn set_servers(&mut self, s: usize, now: f64) {
        while self.in_service.len() > s {
            self.in_service.pop();
        }
        self.servers = s;
        self.fill_idle(now);
    }
}

/// Initial state at time `t`: `Poisson(y_head)` callers waiting with Exponential(ν)
/// service requirements; they enter service as soon as servers are set.
pub fn init_state<R: Rng + ?Sized>(y_head: u32, nu: f64, t: f64, rng: &mut R) -> Result<SimState> {
    let mut state = SimState::empty();
    if y_head == 0 {
        return Ok(state);
    }
    let n = Poisson::new(y_head as f64).map_err(|e| Error::Numerical(e.to_string()))?.sample(rng) as usize;
    for e in gen_unit_services(n, rng) {
        state.waiting.push_back((t, e / nu));
    }
    Ok(state)
}

/// One event-time snapshot passed to observers of [`simulate_hour_observed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventSnapshot {
    pub time: f64,
    pub busy: usize,
    pub waiting: usize,
    pub servers: usize,
}

/// Immediately served callers and arrivals in hour `[t, t+1)` with `s` servers.
///
/// `services[i]` is the service duration of the caller arriving at `arrivals[i]`.
/// Completions at the same instant as an arrival are processed first.
pub fn simulate_hour(state: &mut SimState, t: f64, arrivals: &[f64], services: &[f64], s: usize) -> u32 {
    simulate_hour_observed(state, t, arrivals, services, s, |_| {})
}

pub fn simulate_hour_observed(
    state: &mut SimState,
    t: f64,
    arrivals: &[f64],
    services: &[f64],
    s: usize,
    mut observe: impl FnMut(EventSnapshot),
) -> u32 {
    assert_eq!(arrivals.len(), services.len(), "one service duration per arrival");
    let end = t + 1.0;
    state.set_servers(s, t);
    let snap = |st: &SimState, time: f64| EventSnapshot { time, busy: st.busy(), waiting: st.waiting(), servers: st.servers };
    observe(snap(state, t));
    let mut served = 0u32;
    let mut next = 0usize;
    loop {
        let completion = state.in_service.peek().map(|r| r.0 .0).filter(|&c| c < end);
        let arrival = arrivals.get(next).copied();
        let now = match (completion, arrival) {
            (Some(c), a) if a.is_none_or(|a| c <= a) => {
                complete(state, c);
                c
            }
            (_, Some(a)) => {
                debug_assert!(a >= t && a < end, "arrival outside its hour");
                if state.in_service.len() < state.servers {
                    state.in_service.push(Reverse(Time(a + services[next])));
                    served += 1;
                } else {
                    state.waiting.push_back((a, services[next]));
                }
                next += 1;
                a
            }
            _ => break,
        };
        observe(snap(state, now));
        assert!(state.in_service.len() <= state.servers, "more callers in service than servers");
    }
    served
}

fn complete(state: &mut SimState, now: f64) {
    state.in_service.pop();
    state.fill_idle(now);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourOutcome {
    pub served: u32,
    pub arrivals: u32,
    pub servers: usize,
    pub cost: f64,
}

/// Grid of cost parameters and simulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub q: Vec<f64>,
    pub nu: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(default = "default_j")]
    pub j: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_s_min")]
    pub s_min: usize,
    pub seed: u64,
}

fn default_replications() -> usize {
    100
}

impl ExperimentConfig {
    /// All `(q, ν, θ)` combinations in grid order.
    pub fn grid(&self) -> Vec<QueueParams> {
        let mut out = Vec::new();
        for &q in &self.q {
            for &nu in &self.nu {
                for &theta in &self.theta {
                    out.push(QueueParams { q, theta, nu, j: self.j, s_min: self.s_min });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.is_empty() || self.nu.is_empty() || self.theta.is_empty() {
            return Err(Error::Config("q, nu and theta grids must be non-empty".into()));
        }
        if self.replications < 1 {
            return Err(Error::Config("at least one replication is required".into()));
        }
        self.grid().iter().try_for_each(QueueParams::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub q: f64,
    pub nu: f64,
    pub theta: f64,
    /// Mean over replications of the mean hourly cost.
    pub mean_cost: f64,
    /// Standard deviation over replications of the mean hourly cost.
    pub sd_cost: f64,
    /// Mean over replications of `100 Σ n_t / Σ y_t`.
    pub mean_pct_immediate: f64,
    pub total_server_hours: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub replication: usize,
    pub model: String,
    pub q: f64,
    pub nu: f64,
    pub theta: f64,
    pub mean_cost: f64,
    pub pct_immediate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub summary: Vec<SummaryRow>,
    pub replications: Vec<ReplicationRow>,
}

impl ExperimentReport {
    pub fn write_summary_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.summary {
            w.serialize(r)?;
        }
        if self.summary.is_empty() {
            w.write_record(["model", "q", "nu", "theta", "mean_cost", "sd_cost", "mean_pct_immediate", "total_server_hours"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_replications_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.replications {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Staffing path `ŝ_t` for one forecast stream. Hour `t` uses the stream
/// `(seed, Staffing, t)`, shared by every model and cost setting.
pub fn staffing_path(forecast: &[f64], params: &QueueParams, seed: u64) -> Result<Vec<usize>> {
    forecast
        .par_iter()
        .enumerate()
        .map(|(t, &l)| staff_level(l, params, &mut stream_rng(seed, Purpose::Staffing, t as u64, 0)))
        .collect()
}

/// One replication's simulated hours under `staffing`. Arrival times, unit service
/// requirements and queue initializations come from the replication's streams, so they
/// are common to every model and cost setting.
pub fn simulate_path(
    test: &HourlyCountSeries,
    staffing: &[usize],
    params: &QueueParams,
    seed: u64,
    replication: usize,
) -> Result<Vec<HourOutcome>> {
    let y = test.values();
    if staffing.len() != y.len() {
        return Err(Error::Config(format!("staffing path has {} hours, test series {}", staffing.len(), y.len())));
    }
    let blocks = segment_blocks(test);
    let rep = replication as u64;
    let mut out = Vec::with_capacity(y.len());
    for (b, block) in blocks.iter().enumerate() {
        let mut state = init_state(
            y[block.start] as u32,
            params.nu,
            block.start as f64,
            &mut stream_rng(seed, Purpose::Init, rep, b as u64),
        )?;
        for t in block.clone() {
            let yt = y[t] as u32;
            let arrivals = gen_arrivals(yt, t as f64, &mut stream_rng(seed, Purpose::Arrivals, rep, t as u64));
            let services: Vec<f64> = gen_unit_services(arrivals.len(), &mut stream_rng(seed, Purpose::Services, rep, t as u64))
                .into_iter()
                .map(|e| e / params.nu)
                .collect();
            let served = simulate_hour(&mut state, t as f64, &arrivals, &services, staffing[t]);
            out.push(HourOutcome { served, arrivals: yt, servers: staffing[t], cost: params.penalty(served, yt) + staffing[t] as f64 });
        }
    }
    Ok(out)
}

/// Runs every forecast stream under every cost setting and replication.
pub fn run_experiment(test: &HourlyCountSeries, forecasts: &[(String, Vec<f64>)], config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let n = test.n_hours();
    for (name, f) in forecasts {
        if f.len() != n {
            return Err(Error::Config(format!("forecast '{name}' has {} hours, test series {n}", f.len())));
        }
    }
    let grid = config.grid();
    let cells: Vec<(usize, usize)> = (0..forecasts.len()).flat_map(|m| (0..grid.len()).map(move |p| (m, p))).collect();
    let staffing: Vec<Vec<usize>> =
        cells.iter().map(|&(m, p)| staffing_path(&forecasts[m].1, &grid[p], config.seed)).collect::<Result<_>>()?;

    // (cell, replication) → (mean hourly cost, pct immediate)
    let runs: Vec<Vec<(f64, f64)>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            cells
                .iter()
                .zip(&staffing)
                .map(|(&(_, p), path)| {
                    let hours = simulate_path(test, path, &grid[p], config.seed, r)?;
                    let cost = hours.iter().map(|h| h.cost).sum::<f64>() / hours.len().max(1) as f64;
                    let (sn, sy) = hours.iter().fold((0u64, 0u64), |acc, h| (acc.0 + h.served as u64, acc.1 + h.arrivals as u64));
                    let pct = if sy == 0 { 100.0 } else { 100.0 * sn as f64 / sy as f64 };
                    Ok((cost, pct))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut summary = Vec::with_capacity(cells.len());
    let mut replications = Vec::with_capacity(cells.len() * config.replications);
    for (c, &(m, p)) in cells.iter().enumerate() {
        let params = &grid[p];
        let costs: Vec<f64> = runs.iter().map(|r| r[c].0).collect();
        let pcts: Vec<f64> = runs.iter().map(|r| r[c].1).collect();
        let mean = costs.iter().sum::<f64>() / costs.len() as f64;
        let sd = if costs.len() > 1 {
            (costs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (costs.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        summary.push(SummaryRow {
            model: forecasts[m].0.clone(),
            q: params.q,
            nu: params.nu,
            theta: params.theta,
            mean_cost: mean,
            sd_cost: sd,
            mean_pct_immediate: pcts.iter().sum::<f64>() / pcts.len() as f64,
            total_server_hours: staffing[c].iter().map(|&s| s as u64).sum(),
        });
        for (r, run) in runs.iter().enumerate() {
            replications.push(ReplicationRow {
                replication: r,
                model: forecasts[m].0.clone(),
                q: params.q,
                nu: params.nu,
                theta: params.theta,
                mean_cost: run[c].0,
                pct_immediate: run[c].1,
            });
        }
    }
    Ok(ExperimentReport { summary, replications })
}
