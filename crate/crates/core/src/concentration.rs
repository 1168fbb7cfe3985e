//! Path statistics, the Garsia–Rodemich–Rumsey bound, Nelson moment checks,
//! Monte Carlo exceedance curves and Gaussian-tail fits.

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, LabError, Result};
use crate::noise::{sample_noise, ModeSet, OuForcing, Propagators, TimeGrid};
use crate::paracalc::{besov_norm_spectral, DyadicPartition};
use crate::rng::{derive_seed, replica_seed, stream_rng, Role};
use crate::solvers::{solve_vw, GForm, SolveOptions};
use crate::symbols::{build_i_with, Renormalization};
use crate::torus::{SpectralField, TorusGrid};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

/// Default cap on the number of time points entering pairwise maxima.
pub const MAX_PAIR_POINTS: usize = 512;

/// Evenly spaced indices into `0..m`, always keeping both ends.
pub fn subsample_indices(m: usize, cap: usize) -> Vec<usize> {
    if m <= cap || cap < 2 {
        return (0..m).collect();
    }
    let mut idx: Vec<usize> = (0..cap).map(|i| (i * (m - 1) + (cap - 1) / 2) / (cap - 1)).collect();
    idx.dedup();
    idx
}

/// `max_t ‖f(t)‖_{C^α}`.
pub fn sup_path_norm(path: &[SpectralField], alpha: f64, part: &DyadicPartition) -> f64 {
    path.iter().map(|f| besov_norm_spectral(f, alpha, part)).fold(0.0, f64::max)
}

/// `max_{i<j} dist(i, j) / |t_j − t_i|^γ` over the given indices.
pub fn holder_by(times: &[f64], idx: &[usize], gamma: f64, dist: impl Fn(usize, usize) -> f64) -> f64 {
    let mut best = 0.0f64;
    for (a, &i) in idx.iter().enumerate() {
        for &j in &idx[a + 1..] {
            let h = (times[j] - times[i]).abs();
            if h > 0.0 {
                best = best.max(dist(i, j) / h.powf(gamma));
            }
        }
    }
    best
}

fn check_holder(times: &[f64], len: usize, gamma: f64) -> Result<()> {
    if times.len() != len {
        return invalid("times and path differ in length");
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return invalid("Hölder exponent must lie in (0, 1]");
    }
    Ok(())
}

/// `[f]_{β,γ} = sup_{s<t} ‖f(t) − f(s)‖_{C^β} / |t − s|^γ` over grid pairs.
pub fn holder_constant(
    times: &[f64],
    path: &[SpectralField],
    beta: f64,
    gamma: f64,
    part: &DyadicPartition,
    max_points: usize,
) -> Result<f64> {
    check_holder(times, path.len(), gamma)?;
    let idx = subsample_indices(path.len(), max_points);
    Ok(holder_by(times, &idx, gamma, |i, j| besov_norm_spectral(&path[j].sub(&path[i]), beta, part)))
}

/// Hölder constant of a scalar path.
pub fn scalar_holder(times: &[f64], values: &[f64], gamma: f64) -> Result<f64> {
    check_holder(times, values.len(), gamma)?;
    let idx: Vec<usize> = (0..values.len()).collect();
    Ok(holder_by(times, &idx, gamma, |i, j| (values[j] - values[i]).abs()))
}

/// Right side of the GRR supremum bound and the supremum it controls.
#[derive(Clone, Debug, Serialize)]
pub struct GrrBound {
    pub p: u32,
    pub gamma_prime: f64,
    /// Trapezoidal `∫∫ ‖f(x) − f(y)‖^p / |x − y|^{γ′p+1}`.
    pub integral: f64,
    /// `(8·4^{1/p}(γ′+1/p)/(γ′−1/p))^p`.
    pub prefactor: f64,
    pub bound: f64,
    /// `[f]_{γ′−1/p}^p` on the same points.
    pub holder_pow: f64,
}

impl GrrBound {
    pub fn dominates(&self) -> bool {
        self.bound >= self.holder_pow
    }
}

pub fn grr_prefactor(p: u32, gamma_prime: f64) -> f64 {
    let q = 1.0 / p as f64;
    (8.0 * 4f64.powf(q) * (gamma_prime + q) / (gamma_prime - q)).powi(p as i32)
}

fn trapezoid_weights(times: &[f64], idx: &[usize]) -> Vec<f64> {
    let m = idx.len();
    (0..m)
        .map(|a| {
            let left = if a > 0 { times[idx[a]] - times[idx[a - 1]] } else { 0.0 };
            let right = if a + 1 < m { times[idx[a + 1]] - times[idx[a]] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// GRR bound from a distance function on path indices. The diagonal contributes 0.
pub fn grr_bound_by(
    times: &[f64],
    idx: &[usize],
    p: u32,
    gamma_prime: f64,
    dist: impl Fn(usize, usize) -> f64,
) -> Result<GrrBound> {
    if p < 2 || !p.is_multiple_of(2) {
        return invalid("GRR exponent p must be an even integer ≥ 2");
    }
    let q = 1.0 / p as f64;
    if !(gamma_prime > q) {
        return invalid(format!("γ′ must exceed 1/p = {q}"));
    }
    let w = trapezoid_weights(times, idx);
    let (mut integral, mut holder) = (0.0, 0.0f64);
    let expo = gamma_prime * p as f64 + 1.0;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let (i, j) = (idx[a], idx[b]);
            let h = (times[j] - times[i]).abs();
            if h == 0.0 {
                continue;
            }
            let d = dist(i, j);
            let dp = d.powi(p as i32);
            integral += 2.0 * w[a] * w[b] * dp / h.powf(expo);
            holder = holder.max(dp / h.powf(gamma_prime * p as f64 - 1.0));
        }
    }
    let prefactor = grr_prefactor(p, gamma_prime);
    Ok(GrrBound { p, gamma_prime, integral, prefactor, bound: prefactor * integral, holder_pow: holder })
}

/// GRR bound for a field path in `C^β`.
pub fn grr_bound(
    times: &[f64],
    path: &[SpectralField],
    beta: f64,
    p: u32,
    gamma_prime: f64,
    part: &DyadicPartition,
    max_points: usize,
) -> Result<GrrBound> {
    if times.len() != path.len() {
        return invalid("times and path differ in length");
    }
    let idx = subsample_indices(path.len(), max_points);
    grr_bound_by(times, &idx, p, gamma_prime, |i, j| besov_norm_spectral(&path[j].sub(&path[i]), beta, part))
}

/// Probabilists' Hermite polynomial `H_n(x)`.
pub fn hermite(n: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let c = x * b - k as f64 * a;
        a = b;
        b = c;
    }
    b
}

fn hermite_coeffs(n: usize) -> Vec<f64> {
    let mut a = vec![1.0];
    let mut b = vec![0.0, 1.0];
    if n == 0 {
        return a;
    }
    for k in 1..n {
        let mut c = vec![0.0; k + 2];
        for (i, &v) in b.iter().enumerate() {
            c[i + 1] += v;
        }
        for (i, &v) in a.iter().enumerate() {
            c[i] -= k as f64 * v;
        }
        a = b;
        b = c;
    }
    b
}

/// `E[H_n(g)^p]` by expanding the polynomial and using `E g^{2k} = (2k−1)!!`.
pub fn hermite_moment_exact(n: usize, p: usize) -> f64 {
    let h = hermite_coeffs(n);
    let mut poly = vec![1.0];
    for _ in 0..p {
        let mut next = vec![0.0; poly.len() + h.len() - 1];
        for (i, &a) in poly.iter().enumerate() {
            for (j, &b) in h.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        poly = next;
    }
    let mut moment = 1.0;
    let mut total = 0.0;
    for (deg, &c) in poly.iter().enumerate() {
        if deg % 2 == 0 {
            if deg >= 2 {
                moment *= (deg - 1) as f64;
            }
            total += c * moment;
        }
    }
    total
}

/// Conservative constant used for orders 1 to 3.
pub const NELSON_CONSTANT: f64 = 3.0;

#[derive(Clone, Debug, Serialize)]
pub struct NelsonCheck {
    pub order: usize,
    pub p: usize,
    pub samples: usize,
    pub moment_p: f64,
    pub second: f64,
    /// `E[|X|^p]^{1/p} / ((p−1)^{n/2} E[X²]^{1/2})` from samples.
    pub ratio: f64,
    /// The same ratio from exact Gaussian moments.
    pub exact_ratio: f64,
    pub constant: f64,
}

impl NelsonCheck {
    pub fn passes(&self) -> bool {
        self.ratio <= self.constant && self.exact_ratio <= self.constant
    }
}

/// Samples `X = H_n(g)` and compares both sides of the hypercontractive moment bound.
pub fn nelson_check(order: usize, p: usize, samples: usize, seed: u64) -> Result<NelsonCheck> {
    if p < 2 || !p.is_multiple_of(2) {
        return invalid("p must be even and at least 2");
    }
    if order == 0 || samples < 2 {
        return invalid("order and sample count must be positive");
    }
    let chunk = 1 << 14;
    let nchunks = samples.div_ceil(chunk);
    let (mp, m2) = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64, Role::Hermite, order as u64);
            let count = chunk.min(samples - c * chunk);
            let (mut a, mut b) = (0.0, 0.0);
            for _ in 0..count {
                let x = hermite(order, rng.sample::<f64, _>(StandardNormal));
                a += x.abs().powi(p as i32);
                b += x * x;
            }
            (a, b)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0.0), |s, v| (s.0 + v.0, s.1 + v.1));
    let (moment_p, second) = (mp / samples as f64, m2 / samples as f64);
    let scale = ((p - 1) as f64).powf(order as f64 / 2.0);
    let ratio = moment_p.powf(1.0 / p as f64) / (scale * second.sqrt());
    let exact_ratio =
        hermite_moment_exact(order, p).powf(1.0 / p as f64) / (scale * hermite_moment_exact(order, 2).sqrt());
    Ok(NelsonCheck { order, p, samples, moment_p, second, ratio, exact_ratio, constant: NELSON_CONSTANT })
}

/// Exact two-sided binomial interval at confidence `level`.
pub fn clopper_pearson(k: usize, n: usize, level: f64) -> (f64, f64) {
    let a = 1.0 - level;
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64).map_or(0.0, |b| b.inverse_cdf(a / 2.0))
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64).map_or(1.0, |b| b.inverse_cdf(1.0 - a / 2.0))
    };
    (lo, hi)
}

/// Empirical exceedance curve `P̂(S > h)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailCurve {
    pub label: String,
    pub sigma: f64,
    pub horizon: f64,
    pub replicas: usize,
    pub h_grid: Vec<f64>,
    pub counts: Vec<usize>,
    pub p_hat: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Cells with no exceedance: the tail there is beyond Monte Carlo resolution.
    pub zero_cells: Vec<usize>,
}

impl TailCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("h,count,p_hat,ci_low,ci_high\n");
        for i in 0..self.h_grid.len() {
            s.push_str(&format!(
                "{:.17e},{},{:.17e},{:.17e},{:.17e}\n",
                self.h_grid[i], self.counts[i], self.p_hat[i], self.ci_low[i], self.ci_high[i]
            ));
        }
        s
    }
}

/// Counts exceedances of an increasing threshold grid.
pub fn tail_from_samples(samples: &[f64], h_grid: &[f64], label: &str, sigma: f64, horizon: f64) -> Result<TailCurve> {
    if samples.is_empty() {
        return Err(LabError::InsufficientData("no samples".into()));
    }
    if h_grid.is_empty() || h_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return invalid("h grid must be non-empty and strictly increasing");
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return invalid("statistic produced a non-finite value");
    }
    let n = samples.len();
    let counts: Vec<usize> = h_grid.iter().map(|&h| samples.iter().filter(|&&s| s > h).count()).collect();
    // nested events
    assert!(counts.windows(2).all(|c| c[1] <= c[0]), "exceedance counts must be non-increasing");
    let p_hat: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();
    let (ci_low, ci_high) = counts.iter().map(|&k| clopper_pearson(k, n, 0.95)).unzip();
    let zero_cells = counts.iter().enumerate().filter(|(_, &k)| k == 0).map(|(i, _)| i).collect();
    Ok(TailCurve {
        label: label.to_string(),
        sigma,
        horizon,
        replicas: n,
        h_grid: h_grid.to_vec(),
        counts,
        p_hat,
        ci_low,
        ci_high,
        zero_cells,
    })
}

/// Minimum replica count for Monte Carlo curves.
pub const MIN_TAIL_REPLICAS: usize = 200;

/// Evaluates `statistic(replica_seed)` on independent replicas, in parallel, in replica order.
pub fn sample_statistic<F>(replicas: usize, master_seed: u64, statistic: F) -> Result<Vec<f64>>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    (0..replicas as u64).into_par_iter().map(|r| statistic(replica_seed(master_seed, r))).collect()
}

/// Monte Carlo exceedance curve of a replica statistic; also returns the samples.
pub fn tail_estimate<F>(
    statistic: F,
    h_grid: &[f64],
    replicas: usize,
    master_seed: u64,
    label: &str,
    sigma: f64,
    horizon: f64,
) -> Result<(TailCurve, Vec<f64>)>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    if replicas < MIN_TAIL_REPLICAS {
        return invalid(format!("tail estimation needs at least {MIN_TAIL_REPLICAS} replicas"));
    }
    let (lo, hi) = (h_grid.first().copied().unwrap_or(0.0), h_grid.last().copied().unwrap_or(0.0));
    if !(lo > 0.0 && hi >= 3.0 * lo) {
        return invalid("h grid must be positive and span at least a factor 3");
    }
    let samples = sample_statistic(replicas, master_seed, statistic)?;
    Ok((tail_from_samples(&samples, h_grid, label, sigma, horizon)?, samples))
}

/// Empirical `(1 − p)`-quantiles for exceedance levels spaced geometrically from `p_hi` to `p_lo`.
pub fn quantile_h_grid(samples: &[f64], p_hi: f64, p_lo: f64, cells: usize) -> Result<Vec<f64>> {
    if samples.len() < 2 || cells < 2 || !(0.0 < p_lo && p_lo < p_hi && p_hi < 1.0) {
        return invalid("need samples, at least two cells and 0 < p_lo < p_hi < 1");
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let mut grid: Vec<f64> = (0..cells)
        .map(|i| {
            let p = p_hi * (p_lo / p_hi).powf(i as f64 / (cells - 1) as f64);
            let pos = ((1.0 - p) * (n - 1) as f64).round() as usize;
            s[pos.min(n - 1)]
        })
        .collect();
    grid.dedup_by(|a, b| *a <= *b);
    Ok(grid)
}

/// Weighted fit `ln P̂ = ln D − slope · h²`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianFit {
    /// Coefficient of `−h²`.
    pub slope_h2: f64,
    /// Coefficient of `−h²/σ²`, i.e. `slope_h2 · σ²`.
    pub slope_c: f64,
    pub intercept_log_d: f64,
    pub r_squared: f64,
    pub cells_used: usize,
}

/// Weighted least squares of `ln p̂` against `h²`; cells with `p̂ ∈ {0, 1}` are skipped
/// and each cell is weighted by the inverse delta-method variance `n p̂ / (1 − p̂)`.
pub fn gaussian_tail_fit(curve: &TailCurve) -> Result<GaussianFit> {
    let n = curve.replicas as f64;
    let cells: Vec<(f64, f64, f64)> = curve
        .h_grid
        .iter()
        .zip(&curve.p_hat)
        .filter(|(_, &p)| p > 0.0 && p < 1.0)
        .map(|(&h, &p)| (h * h, p.ln(), n * p / (1.0 - p)))
        .collect();
    if cells.len() < 4 {
        return Err(LabError::InsufficientData(format!("{} usable cells, need 4", cells.len())));
    }
    let sw: f64 = cells.iter().map(|c| c.2).sum();
    let mx = cells.iter().map(|c| c.2 * c.0).sum::<f64>() / sw;
    let my = cells.iter().map(|c| c.2 * c.1).sum::<f64>() / sw;
    let sxx: f64 = cells.iter().map(|c| c.2 * (c.0 - mx).powi(2)).sum();
    let sxy: f64 = cells.iter().map(|c| c.2 * (c.0 - mx) * (c.1 - my)).sum();
    let syy: f64 = cells.iter().map(|c| c.2 * (c.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(LabError::InsufficientData("all usable cells share one threshold".into()));
    }
    let b = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(GaussianFit {
        slope_h2: -b,
        slope_c: -b * curve.sigma * curve.sigma,
        intercept_log_d: my - b * mx,
        r_squared,
        cells_used: cells.len(),
    })
}

/// `‖(v,w)‖_{Ξ,t₀}` and its four components.
#[derive(Clone, Debug, Serialize)]
pub struct XiNorm {
    pub t0: f64,
    pub sup_v: f64,
    pub sup_w: f64,
    pub holder_v: f64,
    pub holder_w: f64,
    pub value: f64,
}

/// Ξ-norm on the grid times `≤ t₀`; the temporal constants are `[·]_{0,1/8}`.
pub fn xi_norm(
    times: &[f64],
    v: &[SpectralField],
    w: &[SpectralField],
    t0: f64,
    eps: f64,
    part: &DyadicPartition,
    max_points: usize,
) -> Result<XiNorm> {
    if v.len() != times.len() || w.len() != times.len() {
        return invalid("v, w and times differ in length");
    }
    let m = times.iter().take_while(|&&t| t <= t0 * (1.0 + 1e-12) + 1e-15).count();
    if m == 0 {
        return invalid("t₀ precedes the first recorded time");
    }
    let (v, w, t) = (&v[..m], &w[..m], &times[..m]);
    let sup_v = sup_path_norm(v, 1.0 - 2.0 * eps, part);
    let sup_w = sup_path_norm(w, 1.5 - 2.0 * eps, part);
    let holder_v = holder_constant(t, v, 0.0, 0.125, part, max_points)?;
    let holder_w = holder_constant(t, w, 0.0, 0.125, part, max_points)?;
    let value = sup_v.max(sup_w).max(holder_v).max(holder_w);
    Ok(XiNorm { t0, sup_v, sup_w, holder_v, holder_w, value })
}

/// Shared setup for `sup_{t≤T} ‖𝕀(t)‖_{C^α}` replicas.
pub struct ISupStatistic {
    pub grid: TorusGrid,
    pub cutoff: usize,
    pub sigma: f64,
    pub alpha: f64,
    timegrid: TimeGrid,
    props: Propagators,
}

impl ISupStatistic {
    pub fn new(grid: TorusGrid, coeffs: &CoefficientSet, cutoff: usize, horizon: f64, steps: usize, sigma: f64, alpha: f64) -> Result<Self> {
        let timegrid = TimeGrid::uniform(horizon, steps)?;
        let props = Propagators::new(grid, &timegrid, coeffs, cutoff)?;
        Ok(ISupStatistic { grid, cutoff, sigma, alpha, timegrid, props })
    }

    pub fn eval(&self, seed: u64) -> Result<f64> {
        let noise = sample_noise(self.grid, &self.timegrid, self.sigma, self.cutoff, derive_seed(seed, &[Role::Noise as u64]))?;
        let forcing = OuForcing::new(&noise, &self.props)?;
        let part = DyadicPartition::standard(self.grid);
        Ok(sup_path_norm(&build_i_with(&self.props, &forcing), self.alpha, &part))
    }
}

/// Shared setup for Ξ-norm replicas: grids, propagators and the constants `c, c̃`.
pub struct XiStatistic {
    pub grid: TorusGrid,
    pub cutoff: usize,
    pub sigma: f64,
    pub eps: f64,
    pub horizon: f64,
    pub record_every: usize,
    pub max_points: usize,
    timegrid: TimeGrid,
    props: Propagators,
    renorm: Renormalization,
    coeffs: CoefficientSet,
}

impl XiStatistic {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: TorusGrid,
        coeffs: &CoefficientSet,
        cutoff: usize,
        horizon: f64,
        steps: usize,
        sigma: f64,
        eps: f64,
        c_tilde_unit: &[f64],
        record_every: usize,
    ) -> Result<Self> {
        let timegrid = TimeGrid::uniform(horizon, steps)?;
        let props = Propagators::new(grid, &timegrid, coeffs, cutoff)?;
        let modes = ModeSet::new(grid, cutoff)?;
        let renorm = Renormalization::new(&props, &modes, sigma, c_tilde_unit)?;
        Ok(XiStatistic {
            grid,
            cutoff,
            sigma,
            eps,
            horizon,
            record_every,
            max_points: MAX_PAIR_POINTS,
            timegrid,
            props,
            renorm,
            coeffs: coeffs.clone(),
        })
    }

    pub fn timegrid(&self) -> &TimeGrid {
        &self.timegrid
    }

    pub fn xi(&self, seed: u64) -> Result<XiNorm> {
        let noise = sample_noise(self.grid, &self.timegrid, self.sigma, self.cutoff, derive_seed(seed, &[Role::Noise as u64]))?;
        let forcing = OuForcing::new(&noise, &self.props)?;
        let opts = SolveOptions { record_every: self.record_every, ..SolveOptions::default() };
        let (v, w) = solve_vw(&self.props, &forcing, &self.renorm, &self.coeffs, GForm::Consistent, &opts)?;
        let part = DyadicPartition::standard(self.grid);
        xi_norm(&v.times, &v.fields, &w.fields, self.horizon, self.eps, &part, self.max_points)
    }

    pub fn eval(&self, seed: u64) -> Result<f64> {
        Ok(self.xi(seed)?.value)
    }
}

/// One row of the horizon-dependence table.
#[derive(Clone, Debug, Serialize)]
pub struct TScalingRow {
    pub horizon: f64,
    pub fit: GaussianFit,
    /// `slope_c · max(T^λ, T^{λ/5})`.
    pub normalized: f64,
}

/// Fits a Gaussian tail at each horizon, with thresholds at exceedance levels `p_hi … p_lo`.
#[allow(clippy::too_many_arguments)]
pub fn t_scaling_probe<F>(
    horizons: &[f64],
    lambda: f64,
    sigma: f64,
    replicas: usize,
    master_seed: u64,
    levels: (f64, f64, usize),
    statistic: F,
) -> Result<Vec<TScalingRow>>
where
    F: Fn(f64, u64) -> Result<f64> + Sync,
{
    if horizons.windows(2).any(|w| !(w[1] > w[0])) || horizons.is_empty() {
        return invalid("horizons must be non-empty and increasing");
    }
    let mut rows = Vec::new();
    for &t in horizons {
        let samples = sample_statistic(replicas, master_seed, |s| statistic(t, s))?;
        let h = quantile_h_grid(&samples, levels.0, levels.1, levels.2)?;
        let curve = tail_from_samples(&samples, &h, "t-scaling", sigma, t)?;
        let fit = gaussian_tail_fit(&curve)?;
        let normalized = fit.slope_c * t.powf(lambda).max(t.powf(lambda / 5.0));
        rows.push(TScalingRow { horizon: t, fit, normalized });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::RealField;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn consts(vals: &[f64], grid: TorusGrid) -> Vec<SpectralField> {
        vals.iter().map(|&c| RealField::constant(grid, c).spectral()).collect()
    }

    #[test]
    fn holder_of_constant_and_linear_paths() {
        let times: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(scalar_holder(&times, &[2.0; 21], 0.5).unwrap(), 0.0);
        assert!((scalar_holder(&times, &times, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let grid = TorusGrid::new(1, 8).unwrap();
        let part = DyadicPartition::standard(grid);
        let path = consts(&times, grid);
        let c = holder_constant(&times, &path, 0.0, 1.0, &part, MAX_PAIR_POINTS).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        assert!(holder_constant(&times, &path, 0.0, 0.0, &part, 8).is_err());
    }

    #[test]
    fn subsampling_keeps_ends() {
        let idx = subsample_indices(1001, 512);
        assert_eq!(idx.len(), 512);
        assert_eq!((idx[0], *idx.last().unwrap()), (0, 1000));
        assert!(idx.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(subsample_indices(10, 512).len(), 10);
    }

    #[test]
    fn grr_linear_path() {
        // f(t) = t, p = 8, γ′ = 1/2: ∫∫|x−y|³ = 1/10, Hölder-3/8 constant = 1.
        let m = 401;
        let times: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
        let idx: Vec<usize> = (0..m).collect();
        let g = grr_bound_by(&times, &idx, 8, 0.5, |i, j| (times[j] - times[i]).abs()).unwrap();
        assert!((g.integral - 0.1).abs() < 1e-3, "{}", g.integral);
        assert!((g.holder_pow - 1.0).abs() < 1e-12);
        let pref = (8.0 * 4f64.powf(0.125) * (0.625 / 0.375)).powi(8);
        assert!((g.prefactor / pref - 1.0).abs() < 1e-12);
        assert!(g.dominates());
        let z = grr_bound_by(&times, &idx, 8, 0.5, |_, _| 0.0).unwrap();
        assert_eq!((z.bound, z.holder_pow), (0.0, 0.0));
        assert!(z.dominates());
        assert!(grr_bound_by(&times, &idx, 8, 0.125, |_, _| 0.0).is_err());
        assert!(grr_bound_by(&times, &idx, 7, 0.5, |_, _| 0.0).is_err());
    }

    #[test]
    fn hermite_values_and_moments() {
        assert_eq!(hermite(2, 3.0), 8.0);
        assert_eq!(hermite(3, 2.0), 2.0);
        assert_eq!(hermite_moment_exact(1, 4), 3.0);
        assert_eq!(hermite_moment_exact(2, 2), 2.0);
        assert_eq!(hermite_moment_exact(3, 2), 6.0);
        assert_eq!(hermite_moment_exact(2, 4), 60.0);
        assert_eq!(hermite_moment_exact(2, 3), 8.0);
    }

    /// E[(g²−1)⁴] by brute force over the Isserlis pairings of eight copies of g.
    fn wick_h2_fourth() -> f64 {
        // (g²−1)⁴ = Σ_k C(4,k) (−1)^{4−k} g^{2k}; E g^{2k} counts perfect matchings of 2k points.
        fn matchings(points: usize) -> u64 {
            if points == 0 {
                return 1;
            }
            (points as u64 - 1) * matchings(points - 2)
        }
        let binom = [1.0, 4.0, 6.0, 4.0, 1.0];
        (0..=4).map(|k| binom[k] * (-1f64).powi(4 - k as i32) * matchings(2 * k) as f64).sum()
    }

    #[test]
    fn nelson_orders_and_wick_oracle() {
        assert_eq!(wick_h2_fourth(), hermite_moment_exact(2, 4));
        let c = nelson_check(2, 4, 400_000, 3).unwrap();
        assert!((c.moment_p / 60.0 - 1.0).abs() < 0.1, "{}", c.moment_p);
        assert!((c.second / 2.0 - 1.0).abs() < 0.02);
        assert!(c.passes());
        let e = nelson_check(1, 2, 1000, 3).unwrap();
        assert!((e.exact_ratio - 1.0).abs() < 1e-14);
        assert!(nelson_check(1, 3, 10, 1).is_err());
    }

    #[test]
    fn clopper_pearson_known_values() {
        let (lo, hi) = clopper_pearson(0, 10, 0.95);
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - 0.025f64.powf(0.1))).abs() < 1e-10);
        let (lo, hi) = clopper_pearson(10, 10, 0.95);
        assert!((lo - 0.025f64.powf(0.1)).abs() < 1e-10);
        assert_eq!(hi, 1.0);
        let (lo, hi) = clopper_pearson(50, 100, 0.95);
        assert!(lo < 0.5 && hi > 0.5 && (0.5 - lo - (hi - 0.5)).abs() < 1e-10);
    }

    #[test]
    fn degenerate_statistics() {
        let s = vec![0.5; 50];
        let c = tail_from_samples(&s, &[0.4, 0.6], "const", 1.0, 1.0).unwrap();
        assert_eq!(c.p_hat, vec![1.0, 0.0]);
        assert_eq!(c.zero_cells, vec![1]);
        let c = tail_from_samples(&[0.1, 0.2, 0.3], &[0.0], "pos", 1.0, 1.0).unwrap();
        assert_eq!(c.p_hat, vec![1.0]);
        assert!(tail_from_samples(&s, &[0.6, 0.4], "bad", 1.0, 1.0).is_err());
        assert!(tail_estimate(|_| Ok(1.0), &[1.0, 3.0], 100, 1, "few", 1.0, 1.0).is_err());
        assert!(tail_estimate(|_| Ok(1.0), &[1.0, 2.0], 300, 1, "narrow", 1.0, 1.0).is_err());
    }

    fn synthetic_curve(c: f64, sigma: f64, n: usize, noisy: Option<u64>) -> TailCurve {
        let h: Vec<f64> = (1..=8).map(|i| 0.1 * sigma * i as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(noisy.unwrap_or(0));
        let p: Vec<f64> = h
            .iter()
            .map(|&h| {
                let p = (-c * h * h / (sigma * sigma)).exp();
                match noisy {
                    Some(_) => (0..n).filter(|_| rng.random::<f64>() < p).count() as f64 / n as f64,
                    None => p,
                }
            })
            .collect();
        TailCurve {
            label: "synthetic".into(),
            sigma,
            horizon: 1.0,
            replicas: n,
            counts: p.iter().map(|p| (p * n as f64).round() as usize).collect(),
            ci_low: p.clone(),
            ci_high: p.clone(),
            zero_cells: vec![],
            h_grid: h,
            p_hat: p,
        }
    }

    #[test]
    fn gaussian_fit_recovers_exact_model() {
        let f = gaussian_tail_fit(&synthetic_curve(5.0, 0.3, 1000, None)).unwrap();
        assert!((f.slope_c - 5.0).abs() < 1e-10);
        assert!((f.slope_h2 - 5.0 / 0.09).abs() < 1e-8);
        assert!(f.intercept_log_d.abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fit_recovers_noisy_model() {
        for seed in 1..=10 {
            let f = gaussian_tail_fit(&synthetic_curve(3.0, 1.0, 1000, Some(seed))).unwrap();
            assert!((f.slope_c / 3.0 - 1.0).abs() < 0.15, "seed {seed}: {}", f.slope_c);
        }
        let mut few = synthetic_curve(50.0, 1.0, 1000, None);
        few.p_hat.iter_mut().skip(3).for_each(|p| *p = 0.0);
        assert!(gaussian_tail_fit(&few).is_err());
    }

    #[test]
    fn quantile_grid_is_increasing() {
        let s: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let g = quantile_h_grid(&s, 0.5, 0.01, 8).unwrap();
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!((g[0] - 500.0).abs() <= 1.0 && (g[7] - 989.0).abs() <= 1.0);
    }

    #[test]
    fn xi_norm_of_zero_and_at_start() {
        let grid = TorusGrid::new(2, 8).unwrap();
        let part = DyadicPartition::standard(grid);
        let times = [0.0, 0.1, 0.2];
        let z = vec![SpectralField::zeros(grid); 3];
        assert_eq!(xi_norm(&times, &z, &z, 0.2, 0.05, &part, 512).unwrap().value, 0.0);
        let v = consts(&[0.0, 1.0, 2.0], grid);
        let x0 = xi_norm(&times, &v, &z, 0.0, 0.05, &part, 512).unwrap();
        assert_eq!(x0.value, 0.0);
        let x = xi_norm(&times, &v, &z, 0.2, 0.05, &part, 512).unwrap();
        assert!(x.value >= x.sup_v && x.value >= x.holder_v && x.sup_v > 0.0);
    }

    #[test]
    fn t_scaling_of_horizon_free_statistic_is_flat() {
        let stat = |_t: f64, seed: u64| {
            let mut r = stream_rng(seed, 0, Role::Diagnostics, 0);
            Ok(rng_abs_normal(&mut r) * 0.2)
        };
        let rows = t_scaling_probe(&[0.5, 1.0, 2.0], 0.01, 0.2, 2000, 5, (0.5, 0.01, 8), stat).unwrap();
        let s: Vec<f64> = rows.iter().map(|r| r.fit.slope_c).collect();
        assert!(s.iter().all(|&x| x > 0.0 && x.is_finite()));
        assert!(s.iter().all(|&x| (x / s[0] - 1.0).abs() < 1e-12), "{s:?}");
        let one = t_scaling_probe(&[1.0], 0.01, 0.2, 500, 5, (0.5, 0.01, 8), stat).unwrap();
        assert_eq!(one.len(), 1);
    }

    fn rng_abs_normal(r: &mut ChaCha8Rng) -> f64 {
        r.sample::<f64, _>(StandardNormal).abs()
    }

    #[test]
    fn i_sup_is_linear_in_sigma() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let coeffs = CoefficientSet::constant(0.0, -1.0, 1.0).unwrap();
        let a = ISupStatistic::new(grid, &coeffs, 4, 0.5, 20, 0.1, -0.6).unwrap();
        let b = ISupStatistic::new(grid, &coeffs, 4, 0.5, 20, 0.2, -0.6).unwrap();
        let (x, y) = (a.eval(17).unwrap(), b.eval(17).unwrap());
        assert!(x > 0.0 && (y / x - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grr_dominates_on_sampled_i_paths() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let coeffs = CoefficientSet::constant(0.0, -1.0, 1.0).unwrap();
        let tg = TimeGrid::uniform(1.0, 40).unwrap();
        let props = Propagators::new(grid, &tg, &coeffs, 4).unwrap();
        let part = DyadicPartition::standard(grid);
        for seed in 0..5 {
            let noise = sample_noise(grid, &tg, 1.0, 4, seed).unwrap();
            let path = build_i_with(&props, &OuForcing::new(&noise, &props).unwrap());
            let g = grr_bound(tg.times(), &path, -0.6, 8, 0.3, &part, 512).unwrap();
            assert!(g.dominates() && g.holder_pow > 0.0);
            let h = holder_constant(tg.times(), &path, -0.6, 0.3 - 0.125, &part, 512).unwrap();
            assert!((h.powi(8) / g.holder_pow - 1.0).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exceedance_counts_nested(samples in prop::collection::vec(0.0f64..10.0, 1..200),
                                    mut h in prop::collection::vec(0.0f64..10.0, 1..12)) {
            h.sort_by(f64::total_cmp);
            h.dedup();
            let c = tail_from_samples(&samples, &h, "p", 1.0, 1.0).unwrap();
            prop_assert!(c.counts.windows(2).all(|w| w[1] <= w[0]));
            for i in 0..h.len() {
                prop_assert!(c.ci_low[i] <= c.p_hat[i] + 1e-12 && c.p_hat[i] <= c.ci_high[i] + 1e-12);
                prop_assert!((0.0..=1.0).contains(&c.p_hat[i]));
            }
        }

        #[test]
        fn xi_norm_non_decreasing_in_t0(vals in prop::collection::vec(-2.0f64..2.0, 2..12)) {
            let grid = TorusGrid::new(1, 8).unwrap();
            let part = DyadicPartition::standard(grid);
            let m = vals.len();
            let times: Vec<f64> = (0..m).map(|i| i as f64 * 0.1).collect();
            let v = consts(&vals, grid);
            let w: Vec<SpectralField> = v.iter().map(|f| f.scaled(0.5)).collect();
            let mut last = 0.0;
            for &t0 in &times {
                let x = xi_norm(&times, &v, &w, t0, 0.05, &part, 512).unwrap().value;
                prop_assert!(x >= last);
                last = x;
            }
        }

        #[test]
        fn grr_dominates_random_scalar_paths(vals in prop::collection::vec(-1.0f64..1.0, 3..40)) {
            let m = vals.len();
            let times: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
            let idx: Vec<usize> = (0..m).collect();
            let g = grr_bound_by(&times, &idx, 8, 0.3, |i, j| (vals[j] - vals[i]).abs()).unwrap();
            prop_assert!(g.dominates());
        }
    }
}
