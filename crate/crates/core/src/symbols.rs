//! Stochastic symbols built from one noise realization: the linear solution
//! 𝕀, its Wick powers, the iterated integrals and resonant products, with the
//! renormalization constants `c_n(t)` and `c̃_n(t)`.

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, LabError, Result};
use crate::linalg;
use crate::noise::{draw_step, sample_noise, ModeSet, NoiseRealization, OuForcing, Propagators, TimeGrid};
use crate::paracalc::{acc_resonant, resonant_diagonal, resonant_mean, DyadicPartition, PaddedBlocks};
use crate::quadrature::ou_variance;
use crate::rng::{replica_seed, stream_rng, Role};
use crate::torus::{from_padded, from_padded_pair, SpectralField, TorusGrid, ZERO};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Symbol {
    I,
    V,
    Y,
    IW,
    VW,
    WV,
    WW,
}

impl Symbol {
    pub const ALL: [Symbol; 7] =
        [Symbol::I, Symbol::V, Symbol::Y, Symbol::IW, Symbol::VW, Symbol::WV, Symbol::WW];

    pub fn name(self) -> &'static str {
        match self {
            Symbol::I => "I",
            Symbol::V => "V",
            Symbol::Y => "Y",
            Symbol::IW => "IW",
            Symbol::VW => "VW",
            Symbol::WV => "WV",
            Symbol::WW => "WW",
        }
    }

    pub fn parse(s: &str) -> Result<Symbol> {
        Symbol::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LabError::InvalidInput(format!("unknown symbol {s:?}")))
    }

    /// Regularity `|τ|`.
    pub fn regularity(self) -> f64 {
        match self {
            Symbol::I => -0.5,
            Symbol::V => -1.0,
            Symbol::Y => 1.0,
            Symbol::IW => 0.5,
            Symbol::VW | Symbol::WV => 0.0,
            Symbol::WW => -0.5,
        }
    }

    /// Wiener chaos orders in which the symbol has components.
    pub fn chaos_orders(self) -> &'static [usize] {
        match self {
            Symbol::I => &[1],
            Symbol::V | Symbol::Y => &[2],
            Symbol::IW => &[3],
            Symbol::VW | Symbol::WV => &[2, 4],
            Symbol::WW => &[1, 3, 5],
        }
    }

    /// Number of leaves `n_τ` (the top chaos order).
    pub fn leaves(self) -> usize {
        *self.chaos_orders().last().unwrap()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CatalogEntry {
    pub symbol: &'static str,
    pub regularity: f64,
    pub chaos_orders: Vec<usize>,
    pub leaves: usize,
}

pub fn catalog() -> Vec<CatalogEntry> {
    Symbol::ALL
        .iter()
        .map(|&s| CatalogEntry {
            symbol: s.name(),
            regularity: s.regularity(),
            chaos_orders: s.chaos_orders().to_vec(),
            leaves: s.leaves(),
        })
        .collect()
}

/// Number of lattice points of each `|ω|²` shell inside `|ω|_∞ ≤ n` in `Z^d`.
fn lattice_shells(dim: usize, n: usize) -> BTreeMap<i64, usize> {
    let n = n as i64;
    let mut out = BTreeMap::new();
    let r = -n..=n;
    match dim {
        1 => r.for_each(|a| *out.entry(a * a).or_insert(0) += 1),
        2 => {
            for a in r.clone() {
                for b in r.clone() {
                    *out.entry(a * a + b * b).or_insert(0) += 1;
                }
            }
        }
        _ => {
            for a in r.clone() {
                for b in r.clone() {
                    for c in r.clone() {
                        *out.entry(a * a + b * b + c * c).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    out
}

/// `c_n(t) = σ² Σ_{|ω|_∞≤n} ∫_0^t e^{2α(t,s)} e^{−8π²|ω|²(t−s)} ds` on `Z^d`.
pub fn renorm_c(coeffs: &CoefficientSet, dim: usize, n: usize, t: f64, sigma: f64) -> Result<f64> {
    if !(1..=3).contains(&dim) {
        return invalid("dimension must be 1, 2 or 3");
    }
    if t < 0.0 || t > coeffs.horizon * (1.0 + 1e-12) {
        return Err(LabError::OutOfHorizon { t, horizon: coeffs.horizon });
    }
    let total: f64 = lattice_shells(dim, n)
        .iter()
        .map(|(&k2, &m)| m as f64 * ou_variance(coeffs, 4.0 * PI * PI * k2 as f64, 0.0, t))
        .sum();
    Ok(sigma * sigma * total)
}

/// `c_n(t_j)` for the discrete symbols on a grid: `Σ_ω w(ω) E|𝕀̂(t_j,ω)|²`,
/// with `w` the Nyquist pairing weight of the padded product.
pub fn renorm_c_path(props: &Propagators, modes: &ModeSet, sigma: f64) -> Vec<f64> {
    let t = modes.grid.tables();
    let nshell = props.shell_variances(0).len();
    let mut weight = vec![0.0; nshell];
    for f in 0..modes.grid.len() {
        if t.linf[f] <= modes.cutoff as i64 {
            weight[props.shell(f)] += t.pair_weight(f);
        }
    }
    let mut var = vec![0.0; nshell];
    let mut out = vec![0.0];
    for j in 0..props.steps() {
        let m = props.shell_multipliers(j);
        let v = props.shell_variances(j);
        for s in 0..nshell {
            var[s] = m[s] * m[s] * var[s] + v[s];
        }
        out.push(sigma * sigma * var.iter().zip(&weight).map(|(a, b)| a * b).sum::<f64>());
    }
    out
}

/// Renormalization constants at every grid time.
#[derive(Clone, Debug, Serialize)]
pub struct Renormalization {
    pub times: Vec<f64>,
    pub c: Vec<f64>,
    pub c_tilde: Vec<f64>,
}

impl Renormalization {
    pub fn zero(timegrid: &TimeGrid) -> Self {
        let m = timegrid.steps() + 1;
        Renormalization { times: timegrid.times().to_vec(), c: vec![0.0; m], c_tilde: vec![0.0; m] }
    }

    /// Exact `c` path at amplitude `σ` and `c̃ = σ⁴ c̃_unit`.
    pub fn new(props: &Propagators, modes: &ModeSet, sigma: f64, c_tilde_unit: &[f64]) -> Result<Self> {
        if c_tilde_unit.len() != props.steps() + 1 {
            return invalid("c̃ path length does not match the time grid");
        }
        Ok(Renormalization {
            times: props.timegrid.times().to_vec(),
            c: renorm_c_path(props, modes, sigma),
            c_tilde: c_tilde_unit.iter().map(|x| x * sigma.powi(4)).collect(),
        })
    }

    /// Constants for the same noise at amplitude `s·σ`.
    pub fn rescaled(&self, s: f64) -> Self {
        Renormalization {
            times: self.times.clone(),
            c: self.c.iter().map(|x| x * s * s).collect(),
            c_tilde: self.c_tilde.iter().map(|x| x * s.powi(4)).collect(),
        }
    }
}

/// Monte Carlo estimate of `c̃_n(t_j) = ½ E[mean(𝕐⚬𝕍)(t_j)]` at unit amplitude.
#[derive(Clone, Debug, Serialize)]
pub struct CTildeEstimate {
    pub times: Vec<f64>,
    pub value: Vec<f64>,
    pub se: Vec<f64>,
    pub replicas: usize,
    pub cutoff: usize,
    /// Set when the final-time 95% half-width exceeds the requested relative width.
    pub flagged: bool,
}

impl CTildeEstimate {
    pub fn last(&self) -> (f64, f64) {
        (*self.value.last().unwrap(), *self.se.last().unwrap())
    }

    pub fn scaled(&self, sigma: f64) -> CTildeEstimate {
        let s = sigma.powi(4);
        CTildeEstimate {
            value: self.value.iter().map(|x| x * s).collect(),
            se: self.se.iter().map(|x| x * s).collect(),
            ..self.clone()
        }
    }
}

/// [`ctilde_pair`] when `𝕀²` is exact on the base grid: both replicas share one
/// complex buffer and the resonant mean and `𝕐` update are fused into one pass.
fn ctilde_pair_base(
    props: &Propagators,
    modes: &ModeSet,
    c_unit: &[f64],
    diag: &[f64],
    seeds: [u64; 2],
    single: bool,
) -> [Vec<f64>; 2] {
    let grid = modes.grid;
    let fft = grid.fft();
    let tables = grid.tables();
    let shell = props.shell_indices();
    let m = modes.len();
    let steps = props.steps();
    let i = Complex64::i();
    let mut inst = [vec![ZERO; m], vec![ZERO; m]];
    let mut ya = vec![ZERO; grid.len()];
    let mut yb = vec![ZERO; grid.len()];
    let mut h = vec![ZERO; grid.len()];
    let mut out = [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)];
    let mut buf = Vec::with_capacity(m);
    for j in 0..=steps {
        h.fill(ZERO);
        for (k, (&f, &g)) in modes.reps.iter().zip(&modes.partners).enumerate() {
            let (a, b) = (inst[0][k], inst[1][k]);
            h[f] += a + i * b;
            if g != f {
                h[g] += a.conj() + i * b.conj();
            }
        }
        fft.inverse_band(&mut h, modes.cutoff);
        for z in h.iter_mut() {
            *z = Complex64::new(z.re * z.re, z.im * z.im);
        }
        fft.forward(&mut h);
        let last = j == steps;
        let (dt, mult) = if last { (0.0, &[][..]) } else { (props.timegrid.dt(j), props.shell_multipliers(j)) };
        let (mut sa, mut sb) = (0.0, 0.0);
        fft.for_each_negated(|idx, neg| {
            let (p, q) = (h[idx], h[neg].conj());
            let mut va = (p + q) * 0.5;
            let mut vb = (p - q) * Complex64::new(0.0, -0.5);
            if idx == 0 {
                va.re -= c_unit[j];
                vb.re -= c_unit[j];
            }
            let w = diag[idx] * tables.pair_weight(idx);
            sa += w * (ya[idx] * va.conj()).re;
            sb += w * (yb[idx] * vb.conj()).re;
            if !last {
                let mu = mult[shell[idx] as usize];
                ya[idx] = (ya[idx] + va * dt) * mu;
                yb[idx] = (yb[idx] + vb * dt) * mu;
            }
        });
        out[0].push(sa);
        out[1].push(sb);
        if last {
            break;
        }
        let dt = props.timegrid.dt(j);
        for r in 0..2 {
            if single && r == 1 {
                continue;
            }
            buf.clear();
            draw_step(modes, seeds[r], j, dt, &mut buf);
            for (k, &f) in modes.reps.iter().enumerate() {
                let w = (props.variance(j, f) / dt).sqrt();
                inst[r][k] = inst[r][k] * props.multiplier(j, f) + buf[k] * w;
            }
        }
    }
    out
}

/// Per-replica samples of `mean(𝕐⚬𝕍)(t_j)` for two replicas sharing transforms.
fn ctilde_pair(
    props: &Propagators,
    modes: &ModeSet,
    c_unit: &[f64],
    diag: &[f64],
    seeds: [u64; 2],
    single: bool,
) -> [Vec<f64>; 2] {
    if 4 * modes.cutoff <= modes.grid.n() {
        ctilde_pair_base(props, modes, c_unit, diag, seeds, single)
    } else {
        ctilde_pair_generic(props, modes, c_unit, diag, seeds, single)
    }
}

/// Unfused reference kernel; squares on the padded grid when the base grid aliases.
fn ctilde_pair_generic(
    props: &Propagators,
    modes: &ModeSet,
    c_unit: &[f64],
    diag: &[f64],
    seeds: [u64; 2],
    single: bool,
) -> [Vec<f64>; 2] {
    let grid = modes.grid;
    let base = 4 * modes.cutoff <= grid.n();
    let fft = if base { grid.fft() } else { grid.padded().fft() };
    let tables = grid.tables();
    let pg_len = grid.padded().len();
    let m = modes.len();
    let steps = props.steps();
    let mut inst = [vec![ZERO; m], vec![ZERO; m]];
    let mut yy = [SpectralField::zeros(grid), SpectralField::zeros(grid)];
    let mut out = [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)];
    let mut buf = Vec::with_capacity(m);
    for j in 0..=steps {
        let mut spec = [vec![ZERO; grid.len()], vec![ZERO; grid.len()]];
        for r in 0..2 {
            modes.scatter_add(&inst[r], &|_| 1.0, &mut spec[r]);
        }
        let (va, vb) = if base {
            let (a, b) = fft.inverse_real_pair(&spec[0], &spec[1]);
            let (sa, sb): (Vec<f64>, Vec<f64>) = (a.iter().map(|x| x * x).collect(), b.iter().map(|x| x * x).collect());
            let (fa, fb) = fft.forward_real_pair(&sa, &sb);
            (SpectralField { grid, coeffs: fa }, SpectralField { grid, coeffs: fb })
        } else {
            let pa = tables.pad(&spec[0], pg_len);
            let pb = tables.pad(&spec[1], pg_len);
            let (a, b) = fft.inverse_real_pair(&pa, &pb);
            let sa: Vec<f64> = a.iter().map(|x| x * x).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * x).collect();
            from_padded_pair(grid, &sa, &sb)
        };
        let mut vv = [va, vb];
        for r in 0..2 {
            vv[r].add_constant(-c_unit[j]);
            out[r].push(resonant_mean(&yy[r], &vv[r], diag));
        }
        if j == steps {
            break;
        }
        let dt = props.timegrid.dt(j);
        for r in 0..2 {
            if single && r == 1 {
                continue;
            }
            props.euler(j, &mut yy[r], dt, &vv[r]);
            buf.clear();
            draw_step(modes, seeds[r], j, dt, &mut buf);
            for (i, &f) in modes.reps.iter().enumerate() {
                let w = (props.variance(j, f) / dt).sqrt();
                inst[r][i] = inst[r][i] * props.multiplier(j, f) + buf[i] * w;
            }
        }
    }
    out
}

/// `c̃_n(t_j)` at unit amplitude on a given grid and time grid, by Monte Carlo.
///
/// Replica `r` uses the noise stream `replica_seed(seed, r)`. Squares are
/// taken on the base grid when `4n ≤ N` (exact there) and on the padded grid otherwise.
pub fn renorm_c_tilde_path(
    grid: TorusGrid,
    timegrid: &TimeGrid,
    coeffs: &CoefficientSet,
    n: usize,
    replicas: usize,
    seed: u64,
    max_rel_width: f64,
) -> Result<CTildeEstimate> {
    let samples = renorm_c_tilde_samples(grid, timegrid, coeffs, n, replicas, seed)?;
    let steps = timegrid.steps();
    let mut value = vec![0.0; steps + 1];
    let mut se = vec![0.0; steps + 1];
    for j in 0..=steps {
        let xs: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        (value[j], se[j]) = mean_se(&xs);
    }
    let (v, s) = (value[steps], se[steps]);
    let flagged = 1.96 * s > max_rel_width * v.abs();
    Ok(CTildeEstimate { times: timegrid.times().to_vec(), value, se, replicas, cutoff: n, flagged })
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Per-replica unit-amplitude samples of `c̃_n(t_j)`, indexed `[replica][j]`.
pub fn renorm_c_tilde_samples(
    grid: TorusGrid,
    timegrid: &TimeGrid,
    coeffs: &CoefficientSet,
    n: usize,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if replicas < 2 {
        return invalid("c̃ estimation needs at least two replicas");
    }
    let modes = ModeSet::new(grid, n)?;
    let props = Propagators::new(grid, timegrid, coeffs, n)?;
    let c_unit = renorm_c_path(&props, &modes, 1.0);
    let diag = resonant_diagonal(grid);
    let pairs = replicas.div_ceil(2);
    let samples: Vec<[Vec<f64>; 2]> = (0..pairs)
        .into_par_iter()
        .map(|p| {
            let r0 = 2 * p as u64;
            let single = 2 * p + 1 >= replicas;
            ctilde_pair(&props, &modes, &c_unit, &diag, [replica_seed(seed, r0), replica_seed(seed, r0 + 1)], single)
        })
        .collect();
    // c̃ = ½ E[𝕐⚬𝕍], the normalization under which W𝕍 = 𝕐⚬𝕍 − 2c̃ is centred
    Ok(samples
        .into_iter()
        .flatten()
        .take(replicas)
        .map(|s| s.into_iter().map(|x| 0.5 * x).collect())
        .collect())
}

/// Expectation of the Monte Carlo statistic behind [`renorm_c_tilde_path`] at the
/// last grid time, in closed form: the Wick pairing of `𝕍 = 𝕀² − c` gives
/// `E[𝕍̂_k(ω) conj 𝕍̂_J(ω)] = 2 (C_kJ ⊛ C_kJ)(ω)` with `C_kJ` the discrete OU
/// cross-covariance, and `𝕐_J = Σ_k dt_k P_{k→J} 𝕍_k`. Requires `4n ≤ N`.
pub fn renorm_c_tilde_expected(grid: TorusGrid, timegrid: &TimeGrid, coeffs: &CoefficientSet, n: usize) -> Result<f64> {
    if 4 * n > grid.n() {
        return invalid("closed-form c̃ needs 4n ≤ N");
    }
    let modes = ModeSet::new(grid, n)?;
    let props = Propagators::new(grid, timegrid, coeffs, n)?;
    let c_unit = renorm_c_path(&props, &modes, 1.0);
    let tables = grid.tables();
    let fft = grid.fft();
    let shell = props.shell_indices();
    let steps = props.steps();
    let nshell = props.shell_multipliers(0).len();
    // var[k][s] = E|𝕀̂_k|² per shell; prod[k][s] = Π_{l=k}^{J−1} m_l
    let mut var = vec![vec![0.0; nshell]];
    for j in 0..steps {
        let (m, v) = (props.shell_multipliers(j), props.shell_variances(j));
        let next: Vec<f64> = (0..nshell).map(|s| m[s] * m[s] * var[j][s] + v.get(s).copied().unwrap_or(0.0)).collect();
        var.push(next);
    }
    let mut prod = vec![vec![1.0; nshell]; steps + 1];
    for k in (0..steps).rev() {
        let m = props.shell_multipliers(k);
        prod[k] = (0..nshell).map(|s| m[s] * prod[k + 1][s]).collect();
    }
    let diag = resonant_diagonal(grid);
    let weight: Vec<f64> = (0..grid.len()).map(|i| diag[i] * tables.pair_weight(i)).collect();
    let mean_at = |k: usize| -> f64 {
        (0..grid.len()).filter(|&f| tables.linf[f] <= n as i64).map(|f| tables.pair_weight(f) * var[k][shell[f] as usize]).sum::<f64>()
            - c_unit[k]
    };
    let mu_j = mean_at(steps);
    let mut total = 0.0;
    let mut buf = vec![ZERO; grid.len()];
    for k in 1..steps {
        for (f, b) in buf.iter_mut().enumerate() {
            let s = shell[f] as usize;
            *b = if tables.linf[f] <= n as i64 { Complex64::new(var[k][s] * prod[k][s], 0.0) } else { ZERO };
        }
        fft.inverse_band(&mut buf, n);
        for z in buf.iter_mut() {
            *z = Complex64::new(z.re * z.re, 0.0);
        }
        fft.forward(&mut buf);
        let mut term: f64 = (0..grid.len()).map(|f| weight[f] * prod[k][shell[f] as usize] * 2.0 * buf[f].re).sum();
        term += weight[0] * prod[k][shell[0] as usize] * mean_at(k) * mu_j;
        total += props.timegrid.dt(k) * term;
    }
    Ok(0.5 * total)
}

/// `c̃_n(t)` over several cutoffs from common random numbers: every cutoff sees
/// the same replica seeds on the time grid of the largest cutoff, so the low
/// modes of the noise coincide and consecutive differences are estimated paired.
#[derive(Clone, Debug, Serialize)]
pub struct CTildeSweep {
    pub time: f64,
    pub sigma: f64,
    pub replicas: usize,
    pub cutoffs: Vec<usize>,
    pub value: Vec<f64>,
    pub se: Vec<f64>,
    /// `c̃_{n_{i+1}} − c̃_{n_i}` and its paired standard error.
    pub increment: Vec<f64>,
    pub increment_se: Vec<f64>,
    pub flagged: Vec<bool>,
}

/// Smallest grid on which `𝕀_n²` is exact.
pub fn c_tilde_grid(dim: usize, n: usize) -> Result<TorusGrid> {
    TorusGrid::new(dim, (4 * n).next_power_of_two().max(4))
}

/// Geometric grid on `[0, t]` whose last step resolves the fastest mode `|ω| = 2n`.
pub fn c_tilde_timegrid(dim: usize, n: usize, t: f64, opts: &CTildeOptions) -> Result<TimeGrid> {
    let lambda = 4.0 * PI * PI * (dim * 4 * n * n) as f64;
    TimeGrid::geometric(t, opts.min_step_factor / lambda, opts.ratio)
}

pub fn renorm_c_tilde_sweep(
    coeffs: &CoefficientSet,
    dim: usize,
    cutoffs: &[usize],
    t: f64,
    sigma: f64,
    replicas: usize,
    seed: u64,
    opts: &CTildeOptions,
) -> Result<CTildeSweep> {
    if replicas < 100 {
        return invalid("c̃ estimation requires at least 100 replicas");
    }
    let n_max = match cutoffs.iter().max() {
        Some(&n) if n > 0 && cutoffs.iter().all(|&n| n > 0) => n,
        _ => return invalid("cutoffs must be positive"),
    };
    let tg = c_tilde_timegrid(dim, n_max, t, opts)?;
    let s4 = sigma.powi(4);
    let mut finals: Vec<Vec<f64>> = Vec::new();
    for &n in cutoffs {
        let samples = renorm_c_tilde_samples(c_tilde_grid(dim, n)?, &tg, coeffs, n, replicas, seed)?;
        finals.push(samples.iter().map(|s| s4 * s[s.len() - 1]).collect());
    }
    let (value, se): (Vec<f64>, Vec<f64>) = finals.iter().map(|x| mean_se(x)).unzip();
    let (increment, increment_se) = finals
        .windows(2)
        .map(|w| mean_se(&w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect::<Vec<_>>()))
        .unzip();
    let flagged = value.iter().zip(&se).map(|(v, s)| 1.96 * s > opts.max_rel_width * v.abs()).collect();
    Ok(CTildeSweep { time: t, sigma, replicas, cutoffs: cutoffs.to_vec(), value, se, increment, increment_se, flagged })
}

/// Options for the standalone `c̃_n(t)` estimate.
#[derive(Clone, Debug, Serialize)]
pub struct CTildeOptions {
    /// Ratio of consecutive steps of the geometric time grid.
    pub ratio: f64,
    /// Last step as a multiple of the fastest relaxation time `1/(4π² d (2n)²)`.
    pub min_step_factor: f64,
    pub max_rel_width: f64,
}

impl Default for CTildeOptions {
    fn default() -> Self {
        CTildeOptions { ratio: 1.4, min_step_factor: 1.0, max_rel_width: 0.1 }
    }
}

/// `c̃_n(t)` with standard error, scaled to amplitude `σ`. Uses the smallest
/// grid on which `𝕀²` is exact and a time grid refined geometrically toward `t`.
pub fn renorm_c_tilde(
    coeffs: &CoefficientSet,
    dim: usize,
    n: usize,
    t: f64,
    sigma: f64,
    replicas: usize,
    seed: u64,
    opts: &CTildeOptions,
) -> Result<(f64, f64, bool)> {
    if replicas < 100 {
        return invalid("c̃ estimation requires at least 100 replicas");
    }
    if n == 0 {
        return invalid("cutoff must be positive");
    }
    let grid = c_tilde_grid(dim, n)?;
    let tg = c_tilde_timegrid(dim, n, t, opts)?;
    let est = renorm_c_tilde_path(grid, &tg, coeffs, n, replicas, seed, opts.max_rel_width)?;
    let (v, s) = est.last();
    let s4 = sigma.powi(4);
    Ok((v * s4, s * s4, est.flagged))
}

/// Padded block syntheses of the symbols that enter paraproducts.
#[derive(Clone, Debug)]
pub struct PaddedSymbols {
    pub i: PaddedBlocks,
    pub v: PaddedBlocks,
    pub y: PaddedBlocks,
    pub iw: PaddedBlocks,
    pub i_vals: Vec<f64>,
    pub iw_vals: Vec<f64>,
    pub v_vals: Vec<f64>,
}

impl PaddedSymbols {
    /// Rebuilds the padded syntheses of a stored slice.
    pub fn of_slice(s: &SymbolSlice, part: &DyadicPartition) -> PaddedSymbols {
        let i = PaddedBlocks::new(&s.i, part);
        let v = PaddedBlocks::new(&s.v, part);
        let iw = PaddedBlocks::new(&s.iw, part);
        PaddedSymbols {
            i_vals: i.total(),
            iw_vals: iw.total(),
            v_vals: v.total(),
            y: PaddedBlocks::new(&s.y, part),
            i,
            v,
            iw,
        }
    }
}

/// All symbols at one grid time.
#[derive(Clone, Debug)]
pub struct SymbolSlice {
    pub j: usize,
    pub t: f64,
    pub c: f64,
    pub c_tilde: f64,
    pub i: SpectralField,
    pub v: SpectralField,
    pub y: SpectralField,
    pub iw: SpectralField,
    pub vw: SpectralField,
    pub wv: SpectralField,
    pub ww: SpectralField,
    /// Instantaneous integrand `W = 𝕀³ − 3c𝕀`.
    pub w: SpectralField,
    /// `I(WW)`.
    pub y2: SpectralField,
    pub padded: Option<PaddedSymbols>,
}

impl SymbolSlice {
    pub fn get(&self, s: Symbol) -> &SpectralField {
        match s {
            Symbol::I => &self.i,
            Symbol::V => &self.v,
            Symbol::Y => &self.y,
            Symbol::IW => &self.iw,
            Symbol::VW => &self.vw,
            Symbol::WV => &self.wv,
            Symbol::WW => &self.ww,
        }
    }
}

/// Advances the symbol recursions one grid step at a time.
pub struct SymbolStepper<'a> {
    props: &'a Propagators,
    forcing: &'a OuForcing,
    renorm: &'a Renormalization,
    part: Arc<DyadicPartition>,
    j: usize,
    i: SpectralField,
    iw: SpectralField,
    y: SpectralField,
    y2: SpectralField,
}

impl<'a> SymbolStepper<'a> {
    pub fn new(props: &'a Propagators, forcing: &'a OuForcing, renorm: &'a Renormalization) -> Result<Self> {
        if forcing.timegrid != props.timegrid || renorm.c.len() != props.steps() + 1 {
            return invalid("forcing, propagators and constants disagree on the time grid");
        }
        let grid = props.grid;
        Ok(SymbolStepper {
            props,
            forcing,
            renorm,
            part: DyadicPartition::standard(grid),
            j: 0,
            i: SpectralField::zeros(grid),
            iw: SpectralField::zeros(grid),
            y: SpectralField::zeros(grid),
            y2: SpectralField::zeros(grid),
        })
    }

    pub fn index(&self) -> usize {
        self.j
    }

    pub fn partition(&self) -> &Arc<DyadicPartition> {
        &self.part
    }

    /// Symbols at the current grid time.
    pub fn slice(&self) -> SymbolSlice {
        let grid = self.props.grid;
        let part = &*self.part;
        let (c, ct) = (self.renorm.c[self.j], self.renorm.c_tilde[self.j]);
        let ib = PaddedBlocks::new(&self.i, part);
        let ip = ib.total();
        let sq: Vec<f64> = ip.iter().map(|x| x * x).collect();
        let cube: Vec<f64> = ip.iter().zip(&sq).map(|(x, s)| x * s).collect();
        let (mut v, cube_s) = from_padded_pair(grid, &sq, &cube);
        v.add_constant(-c);
        let w = cube_s.axpy(-3.0 * c, &self.i);
        let vb = PaddedBlocks::new(&v, part);
        let yb = PaddedBlocks::new(&self.y, part);
        let zb = PaddedBlocks::new(&self.iw, part);
        let len = ip.len();
        let (mut a, mut b, mut d) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        acc_resonant(&mut a, 1.0, &zb, &ib);
        acc_resonant(&mut b, 1.0, &yb, &vb);
        acc_resonant(&mut d, 1.0, &zb, &vb);
        let (vw, mut wv) = from_padded_pair(grid, &a, &b);
        wv.add_constant(-2.0 * ct);
        let ww = from_padded(grid, &d).axpy(-6.0 * ct, &self.i);
        let iw_vals = zb.total();
        let v_vals = vb.total();
        SymbolSlice {
            j: self.j,
            t: self.props.timegrid.time(self.j),
            c,
            c_tilde: ct,
            i: self.i.clone(),
            v,
            y: self.y.clone(),
            iw: self.iw.clone(),
            vw,
            wv,
            ww,
            w,
            y2: self.y2.clone(),
            padded: Some(PaddedSymbols { i: ib, v: vb, y: yb, iw: zb, i_vals: ip, iw_vals, v_vals }),
        }
    }

    /// Left-point exponential-Euler update to the next grid time.
    pub fn advance(&mut self, s: &SymbolSlice) -> Result<()> {
        let j = self.j;
        if j >= self.props.steps() {
            return invalid("symbol stepper is already at the final time");
        }
        if s.j != j {
            return invalid("slice does not belong to the current step");
        }
        let dt = self.props.timegrid.dt(j);
        self.props.apply(j, &mut self.i);
        self.forcing.add_to(j, &mut self.i);
        self.props.euler(j, &mut self.iw, dt, &s.w);
        self.props.euler(j, &mut self.y, dt, &s.v);
        self.props.euler(j, &mut self.y2, dt, &s.ww);
        self.j += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleMeta {
    pub sigma: f64,
    pub cutoff: usize,
    pub seed: u64,
    pub dim: usize,
    pub points_per_axis: usize,
}

/// Stored symbol paths on every grid time.
#[derive(Clone, Debug)]
pub struct SymbolEnsemble {
    pub timegrid: TimeGrid,
    pub slices: Vec<SymbolSlice>,
    pub renorm: Renormalization,
    pub meta: EnsembleMeta,
}

impl SymbolEnsemble {
    pub fn path(&self, s: Symbol) -> Vec<&SpectralField> {
        self.slices.iter().map(|x| x.get(s)).collect()
    }

    pub fn w_path(&self) -> Vec<&SpectralField> {
        self.slices.iter().map(|x| &x.w).collect()
    }

    pub fn catalog(&self) -> Vec<CatalogEntry> {
        catalog()
    }
}

/// Builds and stores every symbol slice driven by one noise realization.
pub fn build_symbols(
    noise: &NoiseRealization,
    coeffs: &CoefficientSet,
    renorm: &Renormalization,
) -> Result<SymbolEnsemble> {
    let props = Propagators::new(noise.grid(), &noise.timegrid, coeffs, noise.cutoff())?;
    let forcing = OuForcing::new(noise, &props)?;
    build_symbols_with(&props, &forcing, renorm, noise)
}

pub fn build_symbols_with(
    props: &Propagators,
    forcing: &OuForcing,
    renorm: &Renormalization,
    noise: &NoiseRealization,
) -> Result<SymbolEnsemble> {
    let mut stepper = SymbolStepper::new(props, forcing, renorm)?;
    let mut slices = Vec::with_capacity(props.steps() + 1);
    loop {
        let mut s = stepper.slice();
        if stepper.index() < props.steps() {
            stepper.advance(&s)?;
            s.padded = None;
            slices.push(s);
        } else {
            s.padded = None;
            slices.push(s);
            break;
        }
    }
    Ok(SymbolEnsemble {
        timegrid: props.timegrid.clone(),
        slices,
        renorm: renorm.clone(),
        meta: EnsembleMeta {
            sigma: noise.sigma,
            cutoff: noise.cutoff(),
            seed: noise.seed,
            dim: noise.grid().dim(),
            points_per_axis: noise.grid().n(),
        },
    })
}

/// 𝕀 path by the exact OU recursion `𝕀_{j+1} = P_j 𝕀_j + σ g_j`.
pub fn build_i(noise: &NoiseRealization, coeffs: &CoefficientSet) -> Result<Vec<SpectralField>> {
    let props = Propagators::new(noise.grid(), &noise.timegrid, coeffs, noise.cutoff())?;
    let forcing = OuForcing::new(noise, &props)?;
    Ok(build_i_with(&props, &forcing))
}

pub fn build_i_with(props: &Propagators, forcing: &OuForcing) -> Vec<SpectralField> {
    let mut cur = SpectralField::zeros(props.grid);
    let mut out = vec![cur.clone()];
    for j in 0..props.steps() {
        props.apply(j, &mut cur);
        forcing.add_to(j, &mut cur);
        out.push(cur.clone());
    }
    out
}

/// `I(f)(t_{j+1}) = P_j (I(f)(t_j) + dt_j f(t_j))`, `I(f)(0) = 0`.
pub fn integrator_i(path: &[SpectralField], props: &Propagators) -> Result<Vec<SpectralField>> {
    if path.len() != props.steps() + 1 {
        return invalid("integrand path length does not match the time grid");
    }
    let mut cur = SpectralField::zeros(props.grid);
    let mut out = vec![cur.clone()];
    for j in 0..props.steps() {
        if path[j].grid != props.grid {
            return Err(LabError::GridMismatch("integrand".into()));
        }
        props.euler(j, &mut cur, props.timegrid.dt(j), &path[j]);
        out.push(cur.clone());
    }
    Ok(out)
}

/// Default amplitudes for the Vandermonde solve.
pub const DEFAULT_SIGMAS: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 2.0];

/// Largest accepted ∞-norm condition number of the Vandermonde matrix.
pub const VANDERMONDE_MAX_CONDITION: f64 = 1e6;

/// Components `T̃_ℓ` of `τ(σ) = Σ_ℓ σ^ℓ T̃_ℓ` at every time.
#[derive(Clone, Debug)]
pub struct ChaosDecomposition {
    pub symbol: Symbol,
    pub sigmas: Vec<f64>,
    pub condition: f64,
    /// `unit[ℓ][j]` = T̃_ℓ at time index j.
    pub unit: Vec<Vec<SpectralField>>,
}

impl ChaosDecomposition {
    /// `Π_k τ` at amplitude `σ`: `σ^k T̃_k`.
    pub fn component(&self, k: usize, sigma: f64) -> Vec<SpectralField> {
        self.unit[k].iter().map(|f| f.scaled(sigma.powi(k as i32))).collect()
    }

    /// Largest coefficient of `Π_k τ` over the path at amplitude `σ`.
    pub fn component_size(&self, k: usize, sigma: f64) -> f64 {
        self.unit[k].iter().map(|f| f.max_abs_coeff()).fold(0.0, f64::max) * sigma.powi(k as i32)
    }
}

/// Solves the Vandermonde system `τ(σ_i) = Σ_{ℓ≤n_τ} σ_i^ℓ T̃_ℓ` pointwise,
/// with `sample(σ)` rebuilding the symbol path from the same noise.
pub fn chaos_decompose(
    symbol: Symbol,
    sigmas: &[f64],
    mut sample: impl FnMut(f64) -> Result<Vec<SpectralField>>,
) -> Result<ChaosDecomposition> {
    let deg = symbol.leaves();
    if sigmas.len() != deg + 1 {
        return invalid(format!("{} needs {} amplitudes, got {}", symbol.name(), deg + 1, sigmas.len()));
    }
    if sigmas.iter().any(|&s| !(s > 0.0)) {
        return invalid("amplitudes must be positive");
    }
    let vm: Vec<Vec<f64>> = sigmas.iter().map(|&s| (0..=deg).map(|l| s.powi(l as i32)).collect()).collect();
    let condition = linalg::condition_inf(&vm)?;
    if !(condition <= VANDERMONDE_MAX_CONDITION) {
        return Err(LabError::IllConditioned(condition));
    }
    let inv = linalg::inverse(&vm)?;
    let paths: Vec<Vec<SpectralField>> = sigmas.iter().map(|&s| sample(s)).collect::<Result<_>>()?;
    let steps = paths[0].len();
    if paths.iter().any(|p| p.len() != steps) {
        return invalid("sampled paths have different lengths");
    }
    let grid = paths[0][0].grid;
    let unit = (0..=deg)
        .map(|l| {
            (0..steps)
                .map(|j| {
                    let mut acc = SpectralField::zeros(grid);
                    for (i, p) in paths.iter().enumerate() {
                        acc.add_assign_scaled(inv[l][i], &p[j]);
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Ok(ChaosDecomposition { symbol, sigmas: sigmas.to_vec(), condition, unit })
}

/// Symbol path builder at amplitude `σ` from a fixed Brownian path.
pub fn symbol_path_at(
    noise: &NoiseRealization,
    coeffs: &CoefficientSet,
    c_tilde_unit: &[f64],
    symbol: Symbol,
    sigma: f64,
) -> Result<Vec<SpectralField>> {
    let nz = noise.with_sigma(sigma);
    let props = Propagators::new(nz.grid(), &nz.timegrid, coeffs, nz.cutoff())?;
    let forcing = OuForcing::new(&nz, &props)?;
    let renorm = Renormalization::new(&props, &nz.modes, sigma, c_tilde_unit)?;
    let ens = build_symbols_with(&props, &forcing, &renorm, &nz)?;
    Ok(ens.path(symbol).into_iter().cloned().collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct IncrementCheck {
    pub estimate: f64,
    pub se: f64,
    pub exact: f64,
    /// `estimate / ((t−s)^λ ⟨ω⟩^{−2+2λ})`.
    pub ratio: f64,
}

/// Monte Carlo `E|𝕀̂(t,ω) − 𝕀̂(s,ω)|²` from exact OU transitions of one mode.
#[allow(clippy::too_many_arguments)]
pub fn covariance_increment_check(
    coeffs: &CoefficientSet,
    omega: &[i64],
    s: f64,
    t: f64,
    lambda: f64,
    sigma: f64,
    replicas: usize,
    seed: u64,
) -> Result<IncrementCheck> {
    if !(0.0 <= s && s <= t && t <= coeffs.horizon) {
        return invalid("need 0 <= s <= t <= T");
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return invalid("λ must lie in (0, 1)");
    }
    if replicas < 2 {
        return invalid("need at least two replicas");
    }
    let k2: i64 = omega.iter().map(|x| x * x).sum();
    let lam = 4.0 * PI * PI * k2 as f64;
    let v0 = ou_variance(coeffs, lam, 0.0, s);
    let v1 = ou_variance(coeffs, lam, s, t);
    let m = (coeffs.alpha_unchecked(t, s) - lam * (t - s)).exp();
    let real = k2 == 0;
    let sample = |g: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let mut draw = |var: f64| -> Complex64 {
            let a: f64 = g.sample(StandardNormal);
            if real {
                Complex64::new(a * var.sqrt(), 0.0)
            } else {
                let b: f64 = g.sample(StandardNormal);
                Complex64::new(a, b) * (0.5 * var).sqrt()
            }
        };
        let is = draw(v0) * sigma;
        let it = is * m + draw(v1) * sigma;
        (it - is).norm_sqr()
    };
    let xs: Vec<f64> = (0..replicas)
        .map(|r| sample(&mut stream_rng(seed, r as u64, Role::Diagnostics, 0)))
        .collect();
    let mean = xs.iter().sum::<f64>() / replicas as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (replicas - 1) as f64;
    let exact = sigma * sigma * ((1.0 - m).powi(2) * v0 + v1);
    let bracket = (1.0 + k2 as f64).sqrt();
    let scale = if t > s { (t - s).powf(lambda) * bracket.powf(-2.0 + 2.0 * lambda) } else { 1.0 };
    Ok(IncrementCheck { estimate: mean, se: (var / replicas as f64).sqrt(), exact, ratio: mean / scale })
}

/// Per-mode second moments `E|𝕀̂(t_j,ω)|²` over replicas of the full recursion.
#[derive(Clone, Debug)]
pub struct ModeMoments {
    pub times: Vec<f64>,
    pub modes: Vec<usize>,
    /// `mean[j][i]` and `se[j][i]` for representative mode `i` at time index `j`.
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
}

/// Runs `replicas` independent 𝕀 recursions and accumulates per-mode moments.
pub fn mode_moments(
    grid: TorusGrid,
    timegrid: &TimeGrid,
    coeffs: &CoefficientSet,
    n: usize,
    sigma: f64,
    replicas: usize,
    seed: u64,
) -> Result<ModeMoments> {
    let modes = ModeSet::new(grid, n)?;
    let props = Propagators::new(grid, timegrid, coeffs, n)?;
    let steps = timegrid.steps();
    let m = modes.len();
    let chunk = 16usize;
    let nchunks = replicas.div_ceil(chunk);
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut s1 = vec![0.0; (steps + 1) * m];
            let mut s2 = vec![0.0; (steps + 1) * m];
            for r in (c * chunk)..((c + 1) * chunk).min(replicas) {
                let nz = sample_noise(grid, timegrid, sigma, n, replica_seed(seed, r as u64))
                    .expect("validated above");
                let forcing = OuForcing::new(&nz, &props).expect("grids agree");
                let mut cur = vec![ZERO; m];
                for j in 1..=steps {
                    for (i, &f) in modes.reps.iter().enumerate() {
                        cur[i] = cur[i] * props.multiplier(j - 1, f) + forcing.step(j - 1)[i];
                        let x = cur[i].norm_sqr();
                        s1[j * m + i] += x;
                        s2[j * m + i] += x * x;
                    }
                }
            }
            (s1, s2)
        })
        .collect();
    let mut s1 = vec![0.0; (steps + 1) * m];
    let mut s2 = vec![0.0; (steps + 1) * m];
    for (a, b) in &partial {
        for k in 0..s1.len() {
            s1[k] += a[k];
            s2[k] += b[k];
        }
    }
    let rn = replicas as f64;
    let mut mean = Vec::new();
    let mut se = Vec::new();
    for j in 0..=steps {
        let mu: Vec<f64> = (0..m).map(|i| s1[j * m + i] / rn).collect();
        let sd: Vec<f64> = (0..m)
            .map(|i| {
                let var = ((s2[j * m + i] - rn * mu[i] * mu[i]) / (rn - 1.0)).max(0.0);
                (var / rn).sqrt()
            })
            .collect();
        mean.push(mu);
        se.push(sd);
    }
    Ok(ModeMoments { times: timegrid.times().to_vec(), modes: modes.reps.clone(), mean, se })
}
