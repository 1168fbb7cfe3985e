//! Python bindings for the phi4lab core.
//!
//! Real fields cross the boundary as flat lists in row-major order (last axis
//! fastest); spectral coefficients as lists of `(re, im)` pairs in FFT order.

use phi4lab::coefficients::{CoefficientSet, TimePoly};
use phi4lab::commands::equivalence_outcome;
use phi4lab::concentration::{gaussian_tail_fit, nelson_check, tail_from_samples, TailCurve};
use phi4lab::config::ExperimentConfig;
use phi4lab::noise::TimeGrid;
use phi4lab::paracalc::{self, DyadicPartition};
use phi4lab::solvers::{solve_deterministic, CubicDrift, SolveOptions};
use phi4lab::symbols::{self, CTildeOptions};
use phi4lab::torus::{self, RealField, SpectralField, TorusGrid};
use phi4lab::verify::{run_verify, Fault};
use phi4lab::LabError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use num_complex::Complex64;

fn err(e: LabError) -> PyErr {
    match e {
        LabError::BlowUp { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Periodic grid of `n^dim` points on the unit torus.
#[pyclass(name = "Grid", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyGrid {
    inner: TorusGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(dim: usize, n: usize) -> PyResult<Self> {
        Ok(PyGrid { inner: TorusGrid::new(dim, n).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Coordinates of every grid point (unused axes are 0).
    fn points(&self) -> Vec<[f64; 3]> {
        (0..self.inner.len()).map(|i| self.inner.point(i)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Grid(dim={}, n={})", self.inner.dim(), self.inner.n())
    }
}

/// Coefficients `(f₂, a)` of the recentred equation as polynomials in `t`.
#[pyclass(name = "Coefficients", frozen, from_py_object)]
#[derive(Clone)]
struct PyCoefficients {
    inner: CoefficientSet,
}

#[pymethods]
impl PyCoefficients {
    /// `f2` and `a` are monomial coefficient lists, lowest degree first.
    #[new]
    #[pyo3(signature = (f2, a, horizon, stable = None))]
    fn new(f2: Vec<f64>, a: Vec<f64>, horizon: f64, stable: Option<bool>) -> PyResult<Self> {
        let f2 = TimePoly::new(f2).map_err(err)?;
        let a = TimePoly::new(a).map_err(err)?;
        let stable = match stable {
            Some(s) => s,
            None => a.extrema(0.0, horizon).1 < 0.0,
        };
        Ok(PyCoefficients { inner: CoefficientSet::new(f2, a, horizon, stable).map_err(err)? })
    }

    #[staticmethod]
    fn constant(f2: f64, a: f64, horizon: f64) -> PyResult<Self> {
        Ok(PyCoefficients { inner: CoefficientSet::constant(f2, a, horizon).map_err(err)? })
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    #[getter]
    fn stable(&self) -> bool {
        self.inner.stable
    }

    /// `α(t, u) = ∫_u^t a`.
    fn alpha(&self, t: f64, u: f64) -> PyResult<f64> {
        self.inner.alpha(t, u).map_err(err)
    }

    fn a_at(&self, t: f64) -> f64 {
        self.inner.a_at(t)
    }

    fn f2_at(&self, t: f64) -> f64 {
        self.inner.f2_at(t)
    }

    /// `(inf a, sup a)` on `[0, T]`.
    fn stability_extrema(&self) -> (f64, f64) {
        self.inner.stability_extrema()
    }
}

fn real(grid: &PyGrid, values: Vec<f64>) -> PyResult<RealField> {
    RealField::new(grid.inner, values).map_err(err)
}

fn spectral(grid: &PyGrid, coeffs: Vec<(f64, f64)>) -> PyResult<SpectralField> {
    if coeffs.len() != grid.inner.len() {
        return Err(PyValueError::new_err(format!("expected {} coefficients, got {}", grid.inner.len(), coeffs.len())));
    }
    Ok(SpectralField { grid: grid.inner, coeffs: coeffs.into_iter().map(|(r, i)| Complex64::new(r, i)).collect() })
}

fn pairs(f: &SpectralField) -> Vec<(f64, f64)> {
    f.coeffs.iter().map(|c| (c.re, c.im)).collect()
}

#[pyfunction]
fn dft_forward(grid: &PyGrid, values: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    Ok(pairs(&torus::dft_forward(&real(grid, values)?)))
}

#[pyfunction]
fn dft_inverse(grid: &PyGrid, coeffs: Vec<(f64, f64)>) -> PyResult<Vec<f64>> {
    Ok(torus::dft_inverse(&spectral(grid, coeffs)?).values)
}

/// Propagates a real field from time `s` to `t` with the drift factor of `coeffs`.
#[pyfunction]
fn heat_propagate(grid: &PyGrid, values: Vec<f64>, s: f64, t: f64, coeffs: &PyCoefficients) -> PyResult<Vec<f64>> {
    let f = real(grid, values)?.spectral();
    Ok(torus::heat_propagate(&f, s, t, &coeffs.inner).map_err(err)?.real().values)
}

#[pyfunction]
fn besov_norm(grid: &PyGrid, values: Vec<f64>, alpha: f64) -> PyResult<f64> {
    let part = DyadicPartition::standard(grid.inner);
    paracalc::besov_norm(&real(grid, values)?, alpha, &part).map_err(err)
}

/// Bony decomposition `(f≺g, f⚬g, f≻g)` of the product of two real fields.
#[pyfunction]
fn bony(grid: &PyGrid, f: Vec<f64>, g: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let part = DyadicPartition::standard(grid.inner);
    let (f, g) = (real(grid, f)?, real(grid, g)?);
    let lt = paracalc::para_lt(&f, &g, &part).map_err(err)?;
    let res = paracalc::resonant(&f, &g, &part).map_err(err)?;
    let gt = paracalc::para_gt(&f, &g, &part).map_err(err)?;
    Ok((lt.values, res.values, gt.values))
}

/// `c_n(t)` at noise amplitude `sigma`.
#[pyfunction]
fn renorm_c(coeffs: &PyCoefficients, dim: usize, n: usize, t: f64, sigma: f64) -> PyResult<f64> {
    symbols::renorm_c(&coeffs.inner, dim, n, t, sigma).map_err(err)
}

/// Monte Carlo `c̃_n(t)`: returns `(value, standard_error, flagged)`.
#[pyfunction]
#[pyo3(signature = (coeffs, dim, n, t, sigma, replicas = 500, seed = 0))]
fn renorm_c_tilde(
    py: Python<'_>,
    coeffs: &PyCoefficients,
    dim: usize,
    n: usize,
    t: f64,
    sigma: f64,
    replicas: usize,
    seed: u64,
) -> PyResult<(f64, f64, bool)> {
    let c = coeffs.inner.clone();
    py.detach(move || symbols::renorm_c_tilde(&c, dim, n, t, sigma, replicas, seed, &CTildeOptions::default()))
        .map_err(err)
}

/// Exact expectation of the Monte Carlo `c̃_n(t)` statistic at unit amplitude.
#[pyfunction]
fn renorm_c_tilde_expected(coeffs: &PyCoefficients, dim: usize, n: usize, t: f64) -> PyResult<f64> {
    let grid = symbols::c_tilde_grid(dim, n).map_err(err)?;
    let tg = symbols::c_tilde_timegrid(dim, n, t, &CTildeOptions::default()).map_err(err)?;
    symbols::renorm_c_tilde_expected(grid, &tg, &coeffs.inner, n).map_err(err)
}

/// `∂_t φ = Δφ − φ³ + γ(t)φ` from `phi0`; returns `(times, sup norms, final field)`.
#[pyfunction]
#[pyo3(signature = (grid, phi0, gamma, horizon, steps, ceiling = 1e6))]
fn solve_deterministic_gamma(
    grid: &PyGrid,
    phi0: Vec<f64>,
    gamma: Vec<f64>,
    horizon: f64,
    steps: usize,
    ceiling: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let drift = CubicDrift::gamma(TimePoly::new(gamma).map_err(err)?);
    let tg = TimeGrid::uniform(horizon, steps).map_err(err)?;
    let opts = SolveOptions { ceiling, ..SolveOptions::default() };
    let path = solve_deterministic(&drift, &real(grid, phi0)?, &tg, &opts).map_err(err)?;
    let sups = path.sup_norms();
    Ok((path.times.clone(), sups, path.last().real().values))
}

/// Exceedance curve and Gaussian-tail fit of `samples` on `h_grid`, as a dict.
#[pyfunction]
#[pyo3(signature = (samples, h_grid, sigma = 1.0, horizon = 1.0, label = "statistic"))]
fn tail_fit<'py>(
    py: Python<'py>,
    samples: Vec<f64>,
    h_grid: Vec<f64>,
    sigma: f64,
    horizon: f64,
    label: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let curve: TailCurve = tail_from_samples(&samples, &h_grid, label, sigma, horizon).map_err(err)?;
    let fit = gaussian_tail_fit(&curve).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("h", curve.h_grid)?;
    d.set_item("p_hat", curve.p_hat)?;
    d.set_item("ci_low", curve.ci_low)?;
    d.set_item("ci_high", curve.ci_high)?;
    d.set_item("slope_h2", fit.slope_h2)?;
    d.set_item("slope_c", fit.slope_c)?;
    d.set_item("intercept_log_d", fit.intercept_log_d)?;
    d.set_item("r_squared", fit.r_squared)?;
    Ok(d)
}

/// Hypercontractivity ratio for `H_order(g)`: returns `(sampled, exact, constant)`.
#[pyfunction]
#[pyo3(signature = (order, p, samples = 100_000, seed = 0))]
fn nelson(order: usize, p: usize, samples: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    let c = nelson_check(order, p, samples, seed).map_err(err)?;
    Ok((c.ratio, c.exact_ratio, c.constant))
}

/// Direct-vs-reconstruction gap at `dt` and `dt/2` for a JSON experiment config.
#[pyfunction]
fn equivalence<'py>(py: Python<'py>, config_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    cfg.validate().map_err(err)?;
    let out = py.detach(|| equivalence_outcome(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("gap_coarse", out.report.coarse.gap)?;
    d.set_item("gap_fine", out.report.fine.gap)?;
    d.set_item("ratio", out.report.ratio)?;
    d.set_item("c_final", out.report.c_final)?;
    d.set_item("c_tilde_final", out.report.c_tilde_final)?;
    Ok(d)
}

/// Runs the identity suite; returns `(passed, [(name, passed, value, tolerance)])`.
#[pyfunction]
#[pyo3(signature = (fault = None))]
fn verify(py: Python<'_>, fault: Option<&str>) -> PyResult<(bool, Vec<(String, bool, f64, f64)>)> {
    let fault = match fault {
        None => None,
        Some(s) => Some(Fault::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown fault {s:?}")))?),
    };
    let report = py.detach(move || run_verify(fault));
    let checks = report.checks.into_iter().map(|c| (c.name, c.passed, c.value, c.tolerance)).collect();
    Ok((report.passed, checks))
}

#[pymodule]
fn phi4lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyCoefficients>()?;
    m.add_function(wrap_pyfunction!(dft_forward, m)?)?;
    m.add_function(wrap_pyfunction!(dft_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(heat_propagate, m)?)?;
    m.add_function(wrap_pyfunction!(besov_norm, m)?)?;
    m.add_function(wrap_pyfunction!(bony, m)?)?;
    m.add_function(wrap_pyfunction!(renorm_c, m)?)?;
    m.add_function(wrap_pyfunction!(renorm_c_tilde, m)?)?;
    m.add_function(wrap_pyfunction!(renorm_c_tilde_expected, m)?)?;
    m.add_function(wrap_pyfunction!(solve_deterministic_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(tail_fit, m)?)?;
    m.add_function(wrap_pyfunction!(nelson, m)?)?;
    m.add_function(wrap_pyfunction!(equivalence, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
