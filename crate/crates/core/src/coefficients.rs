//! Time-polynomial coefficients, the integrated drift α(t,u), stability
//! extrema, cubic normalisation, recentring and the equilibrium ODE.

use crate::error::{invalid, LabError, Result};
use crate::torus::RealField;
use serde::{Deserialize, Serialize};

pub const MAX_DEGREE: usize = 8;
pub const DEFAULT_CEILING: f64 = 1e6;

/// Polynomial in t, lowest degree first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimePoly {
    coeffs: Vec<f64>,
}

impl TimePoly {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return invalid("polynomial coefficients must be finite");
        }
        let p = TimePoly { coeffs }.trimmed();
        if p.degree() > MAX_DEGREE {
            return invalid(format!("polynomial degree {} exceeds {MAX_DEGREE}", p.degree()));
        }
        Ok(p)
    }

    /// Unchecked constructor for internal products that may exceed the config bound.
    pub(crate) fn raw(coeffs: Vec<f64>) -> Self {
        TimePoly { coeffs }.trimmed()
    }

    pub fn zero() -> Self {
        TimePoly { coeffs: vec![] }
    }

    pub fn constant(c: f64) -> Self {
        TimePoly::raw(vec![c])
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    fn trimmed(mut self) -> Self {
        while self.coeffs.last() == Some(&0.0) {
            self.coeffs.pop();
        }
        self
    }

    /// Degree, with the zero polynomial reported as 0.
    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.len() <= 1
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn derivative(&self) -> TimePoly {
        TimePoly::raw(
            self.coeffs.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect(),
        )
    }

    /// Antiderivative vanishing at 0.
    pub fn antiderivative(&self) -> TimePoly {
        let mut c = vec![0.0];
        c.extend(self.coeffs.iter().enumerate().map(|(k, a)| a / (k + 1) as f64));
        TimePoly::raw(c)
    }

    pub fn add(&self, other: &TimePoly) -> TimePoly {
        let n = self.coeffs.len().max(other.coeffs.len());
        TimePoly::raw(
            (0..n)
                .map(|k| self.coeffs.get(k).unwrap_or(&0.0) + other.coeffs.get(k).unwrap_or(&0.0))
                .collect(),
        )
    }

    pub fn scale(&self, s: f64) -> TimePoly {
        TimePoly::raw(self.coeffs.iter().map(|c| c * s).collect())
    }

    pub fn mul(&self, other: &TimePoly) -> TimePoly {
        if self.coeffs.is_empty() || other.coeffs.is_empty() {
            return TimePoly::zero();
        }
        let mut c = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        TimePoly::raw(c)
    }

    /// Real roots in `[lo, hi]`, found by bracketing between critical points.
    pub fn roots_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        if self.coeffs.len() <= 1 {
            return vec![];
        }
        if self.coeffs.len() == 2 {
            let r = -self.coeffs[0] / self.coeffs[1];
            return if (lo..=hi).contains(&r) { vec![r] } else { vec![] };
        }
        let mut knots = vec![lo];
        knots.extend(self.derivative().roots_in(lo, hi));
        knots.push(hi);
        let mut roots: Vec<f64> = Vec::new();
        for w in knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (fa, fb) = (self.eval(a), self.eval(b));
            let r = if fa == 0.0 {
                Some(a)
            } else if fb == 0.0 {
                Some(b)
            } else if fa.signum() != fb.signum() {
                Some(bisect(|x| self.eval(x), a, b, fa))
            } else {
                None
            };
            if let Some(r) = r {
                if roots.last().is_none_or(|&l| (r - l).abs() > 1e-14 * (1.0 + r.abs())) {
                    roots.push(r);
                }
            }
        }
        roots
    }

    /// Exact (min, max) over `[lo, hi]` via critical points.
    pub fn extrema(&self, lo: f64, hi: f64) -> (f64, f64) {
        let mut pts = vec![lo, hi];
        pts.extend(self.derivative().roots_in(lo, hi));
        pts.iter().map(|&t| self.eval(t)).fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), v| {
            (mn.min(v), mx.max(v))
        })
    }

    pub fn sup_abs(&self, lo: f64, hi: f64) -> f64 {
        let (mn, mx) = self.extrema(lo, hi);
        mn.abs().max(mx.abs())
    }

    /// Least-squares fit of `degree` on Chebyshev nodes of `[0, horizon]`.
    pub fn fit(f: impl Fn(f64) -> f64, degree: usize, horizon: f64) -> Result<TimePoly> {
        let m = 4 * (degree + 1);
        let nodes: Vec<f64> = (0..m)
            .map(|i| {
                let x = (std::f64::consts::PI * (i as f64 + 0.5) / m as f64).cos();
                0.5 * horizon * (1.0 + x)
            })
            .collect();
        // normal equations in the scaled variable s = t / horizon
        let k = degree + 1;
        let mut ata = vec![vec![0.0; k]; k];
        let mut atb = vec![0.0; k];
        for &t in &nodes {
            let s = t / horizon;
            let y = f(t);
            let pows: Vec<f64> = (0..k).map(|p| s.powi(p as i32)).collect();
            for i in 0..k {
                atb[i] += pows[i] * y;
                for j in 0..k {
                    ata[i][j] += pows[i] * pows[j];
                }
            }
        }
        let c = crate::linalg::solve(ata, atb)?;
        TimePoly::new(c.iter().enumerate().map(|(p, v)| v / horizon.powi(p as i32)).collect())
    }
}

fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// The coefficients (f₂, a) of the recentred equation on `[0, T]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientSet {
    pub f2: TimePoly,
    pub a: TimePoly,
    pub horizon: f64,
    pub stable: bool,
    #[serde(skip)]
    a_integral: TimePoly,
}

impl CoefficientSet {
    /// With `stable` set, `a < 0` on `[0, T]` is enforced.
    pub fn new(f2: TimePoly, a: TimePoly, horizon: f64, stable: bool) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!("horizon must be positive (got {horizon})"));
        }
        let a_integral = a.antiderivative();
        let c = CoefficientSet { f2, a, horizon, stable, a_integral };
        if stable {
            let (_, sup) = c.a.extrema(0.0, horizon);
            if sup >= 0.0 {
                return invalid(format!("stability requires a(t) < 0 on [0, T]; sup a = {sup}"));
            }
        }
        Ok(c)
    }

    /// Constant coefficients, flagged stable when `a < 0`.
    pub fn constant(f2: f64, a: f64, horizon: f64) -> Result<Self> {
        CoefficientSet::new(TimePoly::constant(f2), TimePoly::constant(a), horizon, a < 0.0)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(LabError::OutOfHorizon { t, horizon: self.horizon });
        }
        Ok(())
    }

    /// α(t,u) = ∫_u^t a.
    pub fn alpha(&self, t: f64, u: f64) -> Result<f64> {
        self.check_time(t)?;
        self.check_time(u)?;
        if u > t {
            return Err(LabError::TimeOrder { s: u, t });
        }
        Ok(self.alpha_unchecked(t, u))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64, u: f64) -> f64 {
        if self.a.is_constant() {
            return self.a.eval(0.0) * (t - u);
        }
        self.a_integral.eval(t) - self.a_integral.eval(u)
    }

    pub fn a_at(&self, t: f64) -> f64 {
        self.a.eval(t)
    }

    pub fn f2_at(&self, t: f64) -> f64 {
        self.f2.eval(t)
    }

    /// (a₊, a₋) = (−sup a, −inf a) over `[0, T]`.
    pub fn stability_extrema(&self) -> (f64, f64) {
        let (mn, mx) = self.a.extrema(0.0, self.horizon);
        (-mx, -mn)
    }

    pub fn a_plus(&self) -> f64 {
        self.stability_extrema().0
    }

    pub fn a_minus(&self) -> f64 {
        self.stability_extrema().1
    }

    /// m = ‖f₂‖_∞ + ‖f₂′‖_∞ on `[0, T]`.
    pub fn m(&self) -> f64 {
        self.f2.sup_abs(0.0, self.horizon) + self.f2.derivative().sup_abs(0.0, self.horizon)
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        CoefficientSet::new(self.f2.clone(), self.a.clone(), horizon, self.stable)
    }
}

pub fn alpha(t: f64, u: f64, c: &CoefficientSet) -> Result<f64> {
    c.alpha(t, u)
}

pub fn stability_extrema(c: &CoefficientSet) -> (f64, f64) {
    c.stability_extrema()
}

/// Cubic `a₃φ³ + a₂φ² + a₁φ + a₀` rescaled by `φ = bψ` with `b = 1/√(−a₃)`.
#[derive(Clone, Debug)]
pub struct NormalizedCubic {
    pub a3: TimePoly,
    pub a2: TimePoly,
    pub a1: TimePoly,
    pub a0: TimePoly,
    pub horizon: f64,
}

impl NormalizedCubic {
    pub fn b(&self, t: f64) -> f64 {
        1.0 / (-self.a3.eval(t)).sqrt()
    }

    pub fn b_prime(&self, t: f64) -> f64 {
        0.5 * (-self.a3.eval(t)).powf(-1.5) * self.a3.derivative().eval(t)
    }

    pub fn b2(&self, t: f64) -> f64 {
        self.a2.eval(t) * self.b(t)
    }

    pub fn b1(&self, t: f64) -> f64 {
        let b = self.b(t);
        (self.a1.eval(t) * b - self.b_prime(t)) / b
    }

    pub fn b0(&self, t: f64) -> f64 {
        self.a0.eval(t) / self.b(t)
    }

    pub fn noise_scale(&self, t: f64) -> f64 {
        1.0 / self.b(t)
    }

    /// Polynomial (b₂, b₁, b₀) when a₃ is constant; `None` otherwise.
    pub fn polynomials(&self) -> Option<(TimePoly, TimePoly, TimePoly)> {
        if !self.a3.is_constant() {
            return None;
        }
        let b = self.b(0.0);
        Some((self.a2.scale(b), self.a1.clone(), self.a0.scale(1.0 / b)))
    }
}

pub fn normalize_cubic(
    a3: &TimePoly,
    a2: &TimePoly,
    a1: &TimePoly,
    a0: &TimePoly,
    horizon: f64,
) -> Result<NormalizedCubic> {
    let (_, sup) = a3.extrema(0.0, horizon);
    if sup >= 0.0 {
        return invalid(format!("a3 must stay strictly negative on [0, T]; sup a3 = {sup}"));
    }
    Ok(NormalizedCubic {
        a3: a3.clone(),
        a2: a2.clone(),
        a1: a1.clone(),
        a0: a0.clone(),
        horizon,
    })
}

/// Recentres `F = −φ³ + b₂φ² + b₁φ + b₀` around a space-constant path φ̄.
pub fn recentre(
    b2: &TimePoly,
    b1: &TimePoly,
    _b0: &TimePoly,
    phibar: &TimePoly,
    horizon: f64,
    stable: bool,
) -> Result<CoefficientSet> {
    let f2 = b2.add(&phibar.scale(-3.0));
    let a = b1.add(&b2.mul(phibar).scale(2.0)).add(&phibar.mul(phibar).scale(-3.0));
    CoefficientSet::new(f2, a, horizon, stable)
}

/// Recentring around a field; only space-constant fields are accepted.
pub fn recentre_field(
    b2: &TimePoly,
    b1: &TimePoly,
    b0: &TimePoly,
    phibar: &RealField,
    horizon: f64,
    stable: bool,
) -> Result<CoefficientSet> {
    let m = phibar.mean();
    if phibar.values.iter().any(|v| (v - m).abs() > 1e-12 * (1.0 + m.abs())) {
        return invalid("recentring requires a space-constant equilibrium");
    }
    recentre(b2, b1, b0, &TimePoly::constant(m), horizon, stable)
}

/// Value of the full cubic `−φ³ + b₂φ² + b₁φ + b₀`.
pub fn full_cubic(b2: &TimePoly, b1: &TimePoly, b0: &TimePoly, t: f64, phi: f64) -> f64 {
    -phi * phi * phi + b2.eval(t) * phi * phi + b1.eval(t) * phi + b0.eval(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl EquilibriumPath {
    /// Linear interpolation between grid times.
    pub fn at(&self, t: f64) -> f64 {
        if t <= self.times[0] {
            return self.values[0];
        }
        let last = self.times.len() - 1;
        if t >= self.times[last] {
            return self.values[last];
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[i]) / (self.times[i + 1] - self.times[i]);
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    /// Polynomial of degree ≤ 4 approximating the path (so that φ̄² stays within degree 8).
    /// Polynomial fit of the path and its max residual on the stored points.
    pub fn to_poly(&self) -> Result<(TimePoly, f64)> {
        let horizon = *self.times.last().unwrap_or(&0.0);
        if horizon <= 0.0 {
            return Ok((TimePoly::constant(self.values[0]), 0.0));
        }
        // lowest degree whose residual on the stored path is below 1e-6, else the best seen
        let scale = 1.0 + self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut best: Option<(f64, TimePoly)> = None;
        for degree in 4..=MAX_DEGREE {
            let poly = TimePoly::fit(|t| self.at(t), degree, horizon)?;
            let resid = self.times.iter().zip(&self.values).fold(0.0f64, |m, (&t, &v)| m.max((poly.eval(t) - v).abs()));
            if resid <= 1e-6 * scale {
                return Ok((poly, resid));
            }
            if best.as_ref().is_none_or(|(r, _)| resid < *r) {
                best = Some((resid, poly));
            }
        }
        let (resid, poly) = best.expect("at least one degree tried");
        Ok((poly, resid))
    }

    /// a(t) = γ(t) − 3φ̄(t)² along the path.
    pub fn linearization(&self, gamma: &TimePoly) -> Vec<f64> {
        self.times.iter().zip(&self.values).map(|(&t, &p)| gamma.eval(t) - 3.0 * p * p).collect()
    }
}

/// RK4 for `φ̄′ = F(t, φ̄)` with the full cubic.
pub fn equilibrium_ode_full(
    b2: &TimePoly,
    b1: &TimePoly,
    b0: &TimePoly,
    phi0: f64,
    horizon: f64,
    dt: f64,
    ceiling: f64,
) -> Result<EquilibriumPath> {
    if !(dt > 0.0) {
        return invalid("dt must be positive");
    }
    if !(horizon > 0.0) {
        return invalid("horizon must be positive");
    }
    let steps = (horizon / dt).round().max(1.0) as usize;
    let h = horizon / steps as f64;
    let f = |t: f64, p: f64| full_cubic(b2, b1, b0, t, p);
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    let mut p = phi0;
    times.push(0.0);
    values.push(p);
    for j in 0..steps {
        let t = j as f64 * h;
        let k1 = f(t, p);
        let k2 = f(t + 0.5 * h, p + 0.5 * h * k1);
        let k3 = f(t + 0.5 * h, p + 0.5 * h * k2);
        let k4 = f(t + h, p + h * k3);
        p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let tn = (j + 1) as f64 * h;
        if !p.is_finite() || p.abs() > ceiling {
            return Err(LabError::BlowUp { t: tn, value: p.abs() });
        }
        times.push(tn);
        values.push(p);
    }
    Ok(EquilibriumPath { times, values })
}

/// RK4 for `φ̄′ = −φ̄³ + γ(t)φ̄`.
pub fn equilibrium_ode(gamma: &TimePoly, phi0: f64, horizon: f64, dt: f64) -> Result<EquilibriumPath> {
    equilibrium_ode_full(&TimePoly::zero(), gamma, &TimePoly::zero(), phi0, horizon, dt, DEFAULT_CEILING)
}
