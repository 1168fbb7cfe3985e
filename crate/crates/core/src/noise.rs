//! Time grids, space-time white noise at a spectral cutoff, and the exact
//! per-step kernels of the linear operator `∂_t − Δ − a(t)`.

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, Result};
use crate::quadrature::ou_variance;
use crate::rng::{stream_rng, Role};
use crate::torus::{SpectralField, TorusGrid, ZERO};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::collections::HashMap;
use std::f64::consts::PI;

/// Strictly increasing times `0 = t_0 < … < t_M = T`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return invalid(format!("time grid needs T > 0 and M >= 1 (T = {horizon}, M = {steps})"));
        }
        let dt = horizon / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|j| j as f64 * dt).collect();
        times[steps] = horizon;
        Ok(TimeGrid { times })
    }

    /// Uniform grid with step closest to `dt` that divides `horizon`.
    pub fn with_dt(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return invalid("dt must be positive");
        }
        Self::uniform(horizon, ((horizon / dt).round() as usize).max(1))
    }

    /// Grid whose steps shrink geometrically toward `t = T`, ending with `min_step`.
    pub fn graded(horizon: f64, steps: usize, min_step: f64) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 || !(min_step > 0.0) {
            return invalid("graded grid needs T > 0, M >= 1, min_step > 0");
        }
        if min_step * steps as f64 >= horizon {
            return Self::uniform(horizon, steps);
        }
        // Solve min_step (r^M − 1)/(r − 1) = T for r > 1.
        let total = |r: f64| min_step * ((r.powi(steps as i32) - 1.0) / (r - 1.0));
        let (mut lo, mut hi) = (1.0 + 1e-12, 2.0);
        while total(hi) < horizon {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if total(mid) < horizon {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        let mut times = vec![0.0; steps + 1];
        times[steps] = horizon;
        let mut h = min_step;
        for j in (1..steps).rev() {
            times[j] = times[j + 1] - h;
            h *= r;
        }
        times[0] = 0.0;
        Ok(TimeGrid { times })
    }

    /// Grid from explicit times (must start at 0 and increase strictly).
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("times must start at 0 and increase strictly");
        }
        if times.iter().any(|t| !t.is_finite()) {
            return invalid("times must be finite");
        }
        Ok(TimeGrid { times })
    }

    /// Steps growing by `ratio` backward from `t = T`, starting at `min_step`;
    /// the first step absorbs the remainder.
    pub fn geometric(horizon: f64, min_step: f64, ratio: f64) -> Result<Self> {
        if !(horizon > 0.0) || !(min_step > 0.0) || !(ratio >= 1.0) {
            return invalid("geometric grid needs T > 0, min_step > 0, ratio >= 1");
        }
        let mut back = vec![horizon];
        let mut h = min_step;
        while back.last().unwrap() - h > 0.5 * h {
            let t = back.last().unwrap() - h;
            back.push(t);
            h *= ratio;
        }
        back.push(0.0);
        back.reverse();
        Ok(TimeGrid { times: back })
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dt(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.dt(0);
        (0..self.steps()).all(|j| (self.dt(j) - h).abs() <= 1e-12 * h.max(1.0))
    }

    /// Keeps every `factor`-th time.
    pub fn coarsen(&self, factor: usize) -> Result<TimeGrid> {
        if factor == 0 || !self.steps().is_multiple_of(factor) {
            return invalid(format!("cannot coarsen {} steps by {factor}", self.steps()));
        }
        Ok(TimeGrid { times: self.times.iter().step_by(factor).copied().collect() })
    }

    /// Index of the last grid time not exceeding `t`.
    pub fn index_at(&self, t: f64) -> usize {
        match self.times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }
}

/// Modes retained by the cutoff, one representative per conjugate pair.
#[derive(Clone, Debug)]
pub struct ModeSet {
    pub grid: TorusGrid,
    pub cutoff: usize,
    pub reps: Vec<usize>,
    pub partners: Vec<usize>,
}

impl ModeSet {
    pub fn new(grid: TorusGrid, cutoff: usize) -> Result<Self> {
        if cutoff > grid.n() / 2 {
            return invalid(format!("cutoff {cutoff} exceeds N/2 = {}", grid.n() / 2));
        }
        let t = grid.tables();
        let (d, n) = (grid.dim(), grid.n() as i64);
        let c = cutoff as i64;
        let flat = |w: &[i64]| w.iter().fold(0usize, |acc, &k| acc * n as usize + k.rem_euclid(n) as usize);
        // Shells |ω|_∞ = 0, 1, …, n, lexicographic within a shell: the order does not
        // depend on N and the modes of a smaller cutoff form a prefix.
        let mut signed: Vec<Vec<i64>> = vec![vec![]];
        for _ in 0..d {
            signed = signed.into_iter().flat_map(|w| (-c..=c).map(move |k| [w.clone(), vec![k]].concat())).collect();
        }
        signed.sort_by_key(|w| w.iter().map(|k| k.abs()).max().unwrap_or(0));
        let mut seen = vec![false; grid.len()];
        let mut reps = Vec::new();
        let mut partners = Vec::new();
        for w in &signed {
            let f = flat(w);
            if seen[f] {
                continue;
            }
            let g = t.negate[f];
            seen[f] = true;
            seen[g] = true;
            reps.push(f);
            partners.push(g);
        }
        Ok(ModeSet { grid, cutoff, reps, partners })
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn is_real(&self, i: usize) -> bool {
        self.reps[i] == self.partners[i]
    }

    /// Writes `scale · vals` into `out` with conjugate pairing.
    pub fn scatter_add(&self, vals: &[Complex64], scale: &dyn Fn(usize) -> f64, out: &mut [Complex64]) {
        for (i, (&f, &g)) in self.reps.iter().zip(&self.partners).enumerate() {
            let z = vals[i] * scale(f);
            out[f] += z;
            if g != f {
                out[g] += z.conj();
            }
        }
    }
}

/// Brownian increments `ΔW(ω, j)` for `|ω|_∞ ≤ n`, with `E|ΔW|² = dt_j`.
#[derive(Clone, Debug)]
pub struct NoiseRealization {
    pub modes: ModeSet,
    pub timegrid: TimeGrid,
    pub sigma: f64,
    pub seed: u64,
    /// Step-major increments of the representative modes.
    increments: Vec<Complex64>,
}

pub fn sample_noise(
    grid: TorusGrid,
    timegrid: &TimeGrid,
    sigma: f64,
    cutoff: usize,
    seed: u64,
) -> Result<NoiseRealization> {
    let modes = ModeSet::new(grid, cutoff)?;
    let mut increments = Vec::with_capacity(modes.len() * timegrid.steps());
    for j in 0..timegrid.steps() {
        draw_step(&modes, seed, j, timegrid.dt(j), &mut increments);
    }
    Ok(NoiseRealization { modes, timegrid: timegrid.clone(), sigma, seed, increments })
}

/// Appends the step-`j` increments of every representative mode.
pub(crate) fn draw_step(modes: &ModeSet, seed: u64, j: usize, dt: f64, out: &mut Vec<Complex64>) {
    let mut rng = stream_rng(seed, 0, Role::Noise, j as u64);
    for i in 0..modes.len() {
        let a: f64 = rng.sample(StandardNormal);
        if modes.is_real(i) {
            out.push(Complex64::new(a * dt.sqrt(), 0.0));
        } else {
            let b: f64 = rng.sample(StandardNormal);
            out.push(Complex64::new(a, b) * (0.5 * dt).sqrt());
        }
    }
}

impl NoiseRealization {
    pub fn grid(&self) -> TorusGrid {
        self.modes.grid
    }

    pub fn cutoff(&self) -> usize {
        self.modes.cutoff
    }

    /// Increments of the representative modes at step `j`.
    pub fn step(&self, j: usize) -> &[Complex64] {
        let m = self.modes.len();
        &self.increments[j * m..(j + 1) * m]
    }

    /// `ΔW(·, j)` as a full conjugate-symmetric spectral field (without σ).
    pub fn increment(&self, j: usize) -> SpectralField {
        let mut out = SpectralField::zeros(self.grid());
        self.modes.scatter_add(self.step(j), &|_| 1.0, &mut out.coeffs);
        out
    }

    /// Same Brownian path with a different amplitude.
    pub fn with_sigma(&self, sigma: f64) -> NoiseRealization {
        NoiseRealization { sigma, ..self.clone() }
    }

    /// Sums increments over groups of `factor` steps (same Brownian path on a coarser grid).
    pub fn coarsen(&self, factor: usize) -> Result<NoiseRealization> {
        let timegrid = self.timegrid.coarsen(factor)?;
        let m = self.modes.len();
        let mut increments = vec![ZERO; m * timegrid.steps()];
        for j in 0..self.timegrid.steps() {
            let dst = &mut increments[(j / factor) * m..(j / factor + 1) * m];
            for (d, s) in dst.iter_mut().zip(self.step(j)) {
                *d += s;
            }
        }
        Ok(NoiseRealization { timegrid, increments, ..self.clone() })
    }
}

/// Per-step multipliers `e^{α(t_{j+1},t_j)} e^{−4π²|ω|² dt_j}` and OU variances, by `|ω|²` shell.
#[derive(Clone, Debug)]
pub struct Propagators {
    pub grid: TorusGrid,
    pub timegrid: TimeGrid,
    shell_of: Vec<u32>,
    shells: Vec<i64>,
    mult: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
    var_shells: usize,
}

impl Propagators {
    /// Kernels for every grid shell; variances for shells up to `d·n²`.
    pub fn new(grid: TorusGrid, timegrid: &TimeGrid, coeffs: &CoefficientSet, cutoff: usize) -> Result<Self> {
        if timegrid.horizon() > coeffs.horizon * (1.0 + 1e-12) {
            return invalid(format!(
                "time grid horizon {} exceeds coefficient horizon {}",
                timegrid.horizon(),
                coeffs.horizon
            ));
        }
        let t = grid.tables();
        let mut shells: Vec<i64> = t.norm_sq.clone();
        shells.sort_unstable();
        shells.dedup();
        let index: HashMap<i64, u32> = shells.iter().enumerate().map(|(i, &k)| (k, i as u32)).collect();
        let shell_of = t.norm_sq.iter().map(|k| index[k]).collect();
        let kmax = (grid.dim() * cutoff * cutoff) as i64;
        let var_shells = shells.partition_point(|&k| k <= kmax);
        let mut mult = Vec::with_capacity(timegrid.steps());
        let mut var = Vec::with_capacity(timegrid.steps());
        let constant_a = coeffs.a.is_constant();
        let mut cache: HashMap<u64, (Vec<f64>, Vec<f64>)> = HashMap::new();
        for j in 0..timegrid.steps() {
            let (t0, t1) = (timegrid.time(j), timegrid.time(j + 1).min(coeffs.horizon));
            let dt = t1 - t0;
            let compute = || {
                let growth = coeffs.alpha_unchecked(t1, t0).exp();
                let m: Vec<f64> =
                    shells.iter().map(|&k| growth * (-4.0 * PI * PI * k as f64 * dt).exp()).collect();
                let v: Vec<f64> = shells[..var_shells]
                    .iter()
                    .map(|&k| ou_variance(coeffs, 4.0 * PI * PI * k as f64, t0, t1))
                    .collect();
                (m, v)
            };
            let (m, v) = if constant_a {
                cache.entry(dt.to_bits()).or_insert_with(compute).clone()
            } else {
                compute()
            };
            mult.push(m);
            var.push(v);
        }
        Ok(Propagators { grid, timegrid: timegrid.clone(), shell_of, shells, mult, var, var_shells })
    }

    pub fn steps(&self) -> usize {
        self.mult.len()
    }

    pub fn shell(&self, flat: usize) -> usize {
        self.shell_of[flat] as usize
    }

    pub fn shell_norms(&self) -> &[i64] {
        &self.shells
    }

    pub fn multiplier(&self, j: usize, flat: usize) -> f64 {
        self.mult[j][self.shell(flat)]
    }

    /// Exact OU variance of one step for a mode inside the cutoff.
    pub fn variance(&self, j: usize, flat: usize) -> f64 {
        let s = self.shell(flat);
        assert!(s < self.var_shells, "mode outside the noise cutoff");
        self.var[j][s]
    }

    pub fn shell_variances(&self, j: usize) -> &[f64] {
        &self.var[j]
    }

    pub(crate) fn shell_indices(&self) -> &[u32] {
        &self.shell_of
    }

    pub fn shell_multipliers(&self, j: usize) -> &[f64] {
        &self.mult[j]
    }

    /// In-place application of the step-`j` propagator.
    pub fn apply(&self, j: usize, f: &mut SpectralField) {
        let m = &self.mult[j];
        for (c, &s) in f.coeffs.iter_mut().zip(&self.shell_of) {
            *c *= m[s as usize];
        }
    }

    /// `P_j (f + h·g)`, the left-point exponential-Euler update.
    pub fn euler(&self, j: usize, f: &mut SpectralField, h: f64, g: &SpectralField) {
        let m = &self.mult[j];
        for ((c, d), &s) in f.coeffs.iter_mut().zip(&g.coeffs).zip(&self.shell_of) {
            *c = (*c + d * h) * m[s as usize];
        }
    }
}

/// σ-scaled stochastic-convolution increments: `𝕀_{j+1} = P_j 𝕀_j + g_j`.
#[derive(Clone, Debug)]
pub struct OuForcing {
    pub modes: ModeSet,
    pub timegrid: TimeGrid,
    values: Vec<Complex64>,
}

impl OuForcing {
    /// `g_j(ω) = σ ΔW_j(ω) √(v_j(ω)/dt_j)`, Gaussian with the exact OU step variance.
    pub fn new(noise: &NoiseRealization, props: &Propagators) -> Result<Self> {
        if props.timegrid != noise.timegrid || props.grid != noise.grid() {
            return invalid("propagators and noise use different grids");
        }
        let m = noise.modes.len();
        let mut values = Vec::with_capacity(m * noise.timegrid.steps());
        for j in 0..noise.timegrid.steps() {
            let dt = noise.timegrid.dt(j);
            for (i, &f) in noise.modes.reps.iter().enumerate() {
                let w = noise.sigma * (props.variance(j, f) / dt).sqrt();
                values.push(noise.step(j)[i] * w);
            }
        }
        Ok(OuForcing { modes: noise.modes.clone(), timegrid: noise.timegrid.clone(), values })
    }

    pub fn step(&self, j: usize) -> &[Complex64] {
        let m = self.modes.len();
        &self.values[j * m..(j + 1) * m]
    }

    pub fn add_to(&self, j: usize, f: &mut SpectralField) {
        self.modes.scatter_add(self.step(j), &|_| 1.0, &mut f.coeffs);
    }

    pub fn scaled(&self, s: f64) -> OuForcing {
        OuForcing { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    /// Exact composition over groups of `factor` fine steps: the coarse
    /// stochastic convolution equals the fine one at every coarse time.
    pub fn coarsen(&self, factor: usize, fine: &Propagators) -> Result<OuForcing> {
        let timegrid = self.timegrid.coarsen(factor)?;
        let m = self.modes.len();
        let mut values = vec![ZERO; m * timegrid.steps()];
        for (jc, chunk) in values.chunks_mut(m).enumerate() {
            for k in 0..factor {
                let j = jc * factor + k;
                for (i, &f) in self.modes.reps.iter().enumerate() {
                    chunk[i] = chunk[i] * fine.multiplier(j, f) + self.step(j)[i];
                }
            }
        }
        Ok(OuForcing { modes: self.modes.clone(), timegrid, values })
    }
}
