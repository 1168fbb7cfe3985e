//! Experiment commands: each reads an [`ExperimentConfig`], writes CSV/JSON
//! (and optional field dumps) into an output directory, and closes it with a
//! manifest. Numerical outputs depend only on the config and seed.

use crate::concentration::{
    gaussian_tail_fit, quantile_h_grid, sample_statistic, sup_path_norm, t_scaling_probe, tail_from_samples,
    GaussianFit, ISupStatistic, TScalingRow, TailCurve, XiStatistic,
};
use crate::config::{ExperimentConfig, ResolvedCoefficients, TailStatistic};
use crate::error::{LabError, Result};
use crate::linalg::{line_fit, LineFit};
use crate::noise::{sample_noise, OuForcing, Propagators, TimeGrid};
use crate::output::{OutputDir, RunManifest};
use crate::paracalc::{besov_norm_spectral, DyadicPartition};
use crate::rng::{derive_seed, replica_seed, Role};
use crate::solvers::{
    run_equivalence, simulate_coupled, EquivalenceConfig, EquivalenceReport, SolveOptions,
};
use crate::symbols::{
    c_tilde_grid, c_tilde_timegrid, catalog, chaos_decompose, renorm_c, renorm_c_tilde_expected,
    renorm_c_tilde_path, renorm_c_tilde_sweep, symbol_path_at, CTildeEstimate, CTildeOptions, CTildeSweep,
    CatalogEntry, Renormalization, Symbol, SymbolStepper, DEFAULT_SIGMAS,
};
use crate::torus::{RealField, TorusGrid};
use crate::verify::{run_verify, Fault, VerifyReport};
use serde::Serialize;
use std::path::Path;

/// Seed of the noise driving single-path commands.
pub fn noise_seed(master: u64) -> u64 {
    derive_seed(master, &[Role::Noise as u64])
}

/// Master seed of the `c̃` Monte Carlo.
pub fn c_tilde_seed(master: u64) -> u64 {
    derive_seed(master, &[Role::CTilde as u64])
}

/// Master seed of tail replicas (shared across σ so curves are matched replica by replica).
pub fn tail_seed(master: u64) -> u64 {
    derive_seed(master, &[Role::Diagnostics as u64])
}

fn replica_seeds(master: u64, replicas: usize) -> Vec<u64> {
    (0..replicas as u64).map(|r| replica_seed(master, r)).collect()
}

/// One-line diagnostic for a failed command, with the run parameters for blow-ups.
pub fn describe_error(cfg: &ExperimentConfig, err: &LabError) -> String {
    match err {
        LabError::BlowUp { t, value } => format!(
            "blow-up at t = {t} (sup norm {value:e}, ceiling {:e}); dimension = {}, N = {}, n = {}, sigma = {}, dt = {}, horizon = {}, master_seed = {}",
            cfg.ceiling, cfg.dimension, cfg.points_per_axis, cfg.cutoff, cfg.sigma, cfg.dt, cfg.horizon, cfg.master_seed
        ),
        LabError::Config(fields) => {
            let mut s = String::from("invalid configuration:");
            for f in fields {
                s.push_str("\n  ");
                s.push_str(f);
            }
            s
        }
        other => other.to_string(),
    }
}

struct Setup {
    grid: TorusGrid,
    timegrid: TimeGrid,
    resolved: ResolvedCoefficients,
    /// σ after the cubic normalization.
    sigma: f64,
}

impl Setup {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let resolved = cfg.resolve_coefficients()?;
        Ok(Setup {
            grid: TorusGrid::new(cfg.dimension, cfg.points_per_axis)?,
            timegrid: TimeGrid::uniform(cfg.horizon, cfg.steps())?,
            sigma: cfg.sigma * resolved.noise_scale,
            resolved,
        })
    }

    fn phibar(&self, t: f64) -> f64 {
        self.resolved.equilibrium.as_ref().map_or(0.0, |p| p.at(t))
    }

    fn c_tilde(&self, cfg: &ExperimentConfig, timegrid: &TimeGrid, replicas: usize) -> Result<CTildeEstimate> {
        renorm_c_tilde_path(
            self.grid,
            timegrid,
            &self.resolved.coeffs,
            cfg.cutoff,
            replicas,
            c_tilde_seed(cfg.master_seed),
            CTildeOptions::default().max_rel_width,
        )
    }
}

fn c_tilde_rows(est: &CTildeEstimate) -> Vec<Vec<f64>> {
    (0..est.times.len()).map(|j| vec![est.times[j], est.value[j], est.se[j]]).collect()
}

fn finish(out: OutputDir, command: &str, cfg: &ExperimentConfig, seeds: Vec<u64>) -> Result<RunManifest> {
    out.finish(command, cfg, cfg.master_seed, seeds)
}

/// Runs the self-check suite and writes `verify.json`.
pub fn cmd_verify(out: &Path, fault: Option<Fault>) -> Result<VerifyReport> {
    let report = run_verify(fault);
    let mut dir = OutputDir::create(out)?;
    dir.write_json("verify.json", &report)?;
    dir.finish("verify", &serde_json::json!({ "fault": fault }), 0, vec![])?;
    Ok(report)
}

#[derive(Serialize)]
struct SymbolsCatalog {
    catalog: Vec<CatalogEntry>,
    /// Besov exponent used for each tabulated symbol.
    alpha: Vec<(String, f64)>,
    sigma: f64,
    cutoff: usize,
    noise_seed: u64,
    c_tilde_replicas: usize,
    c_tilde_flagged: bool,
}

/// Symbol paths from one noise realization: Besov norms over time, `c` and `c̃`.
pub fn cmd_symbols(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let setup = Setup::new(cfg)?;
    let coeffs = &setup.resolved.coeffs;
    let sec = &cfg.symbols;
    let symbols: Vec<Symbol> = sec.symbols.iter().map(|s| Symbol::parse(s)).collect::<Result<_>>()?;
    let alphas: Vec<f64> = symbols.iter().map(|s| sec.alpha.unwrap_or(s.regularity() - cfg.eps)).collect();
    let ct = setup.c_tilde(cfg, &setup.timegrid, sec.c_tilde_replicas)?;
    let seed = noise_seed(cfg.master_seed);
    let noise = sample_noise(setup.grid, &setup.timegrid, setup.sigma, cfg.cutoff, seed)?;
    let props = Propagators::new(setup.grid, &setup.timegrid, coeffs, cfg.cutoff)?;
    let forcing = OuForcing::new(&noise, &props)?;
    let renorm = Renormalization::new(&props, &noise.modes, setup.sigma, &ct.value)?;
    let part = DyadicPartition::standard(setup.grid);

    // streamed: only recorded times are kept
    let mut stepper = SymbolStepper::new(&props, &forcing, &renorm)?;
    let steps = props.steps();
    let mut rows = Vec::new();
    let mut times = Vec::new();
    let mut dumps: Vec<Vec<RealField>> = vec![Vec::new(); symbols.len()];
    loop {
        let s = stepper.slice();
        let j = stepper.index();
        if j % sec.record_every == 0 || j == steps {
            let mut row = vec![s.t, s.c, s.c_tilde];
            for (k, (&sym, &a)) in symbols.iter().zip(&alphas).enumerate() {
                let f = s.get(sym);
                row.push(besov_norm_spectral(f, a, &part));
                if sec.dump_fields {
                    dumps[k].push(f.real());
                }
            }
            times.push(s.t);
            rows.push(row);
        }
        if j == steps {
            break;
        }
        stepper.advance(&s)?;
    }

    let mut dir = OutputDir::create(out)?;
    let mut header = vec!["t".to_string(), "c".into(), "c_tilde".into()];
    header.extend(symbols.iter().map(|s| format!("{}_besov", s.name())));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    dir.write_csv("symbols.csv", &header, &rows)?;
    dir.write_csv("c_tilde.csv", &["t", "c_tilde_unit", "se_unit"], &c_tilde_rows(&ct))?;
    dir.write_json(
        "catalog.json",
        &SymbolsCatalog {
            catalog: catalog(),
            alpha: symbols.iter().zip(&alphas).map(|(s, &a)| (s.name().to_string(), a)).collect(),
            sigma: setup.sigma,
            cutoff: cfg.cutoff,
            noise_seed: seed,
            c_tilde_replicas: sec.c_tilde_replicas,
            c_tilde_flagged: ct.flagged,
        },
    )?;
    if sec.dump_fields {
        for (sym, fields) in symbols.iter().zip(&dumps) {
            dir.write_fields(&format!("fields/{}", sym.name()), sym.name(), &times, fields)?;
        }
    }
    finish(dir, "symbols", cfg, replica_seeds(c_tilde_seed(cfg.master_seed), sec.c_tilde_replicas))
}

/// Fit summary of a renormalization-constant sweep.
#[derive(Clone, Debug, Serialize)]
pub struct RenormSummary {
    pub time: f64,
    pub dimension: usize,
    pub sigma: f64,
    pub cutoffs: Vec<usize>,
    pub c: Vec<f64>,
    /// `c_n` against `n`.
    pub c_fit: LineFit,
    /// `c̃_n` against `ln n`.
    pub c_tilde_fit: LineFit,
    pub c_tilde_monotone: bool,
    /// Exact expectation of each `c̃_n` estimator.
    pub c_tilde_expected: Vec<f64>,
    pub sweep: CTildeSweep,
}

/// `c_n(t)` exactly and `c̃_n(t)` by paired Monte Carlo over the configured cutoffs.
pub fn renorm_summary(cfg: &ExperimentConfig) -> Result<RenormSummary> {
    let setup = Setup::new(cfg)?;
    let coeffs = &setup.resolved.coeffs;
    let r = &cfg.renorm;
    let sigma = setup.sigma;
    let c: Vec<f64> = r.cutoffs.iter().map(|&n| renorm_c(coeffs, r.dimension, n, r.time, sigma)).collect::<Result<_>>()?;
    let opts = CTildeOptions::default();
    let sweep = renorm_c_tilde_sweep(coeffs, r.dimension, &r.cutoffs, r.time, sigma, r.replicas, c_tilde_seed(cfg.master_seed), &opts)?;
    let n_max = *r.cutoffs.last().unwrap();
    let tg = c_tilde_timegrid(r.dimension, n_max, r.time, &opts)?;
    let c_tilde_expected = r
        .cutoffs
        .iter()
        .map(|&n| Ok(sigma.powi(4) * renorm_c_tilde_expected(c_tilde_grid(r.dimension, n)?, &tg, coeffs, n)?))
        .collect::<Result<_>>()?;
    let ns: Vec<f64> = r.cutoffs.iter().map(|&n| n as f64).collect();
    let ln_ns: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    Ok(RenormSummary {
        time: r.time,
        dimension: r.dimension,
        sigma,
        cutoffs: r.cutoffs.clone(),
        c_fit: line_fit(&ns, &c)?,
        c_tilde_fit: line_fit(&ln_ns, &sweep.value)?,
        c_tilde_monotone: sweep.value.windows(2).all(|w| w[1] > w[0]),
        c,
        c_tilde_expected,
        sweep,
    })
}

pub fn cmd_renorm(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let s = renorm_summary(cfg)?;
    let sw = &s.sweep;
    let rows: Vec<Vec<f64>> = (0..s.cutoffs.len())
        .map(|i| {
            let (inc, inc_se) = if i == 0 { (f64::NAN, f64::NAN) } else { (sw.increment[i - 1], sw.increment_se[i - 1]) };
            vec![s.cutoffs[i] as f64, s.c[i], sw.value[i], sw.se[i], s.c_tilde_expected[i], inc, inc_se]
        })
        .collect();
    let mut dir = OutputDir::create(out)?;
    dir.write_csv(
        "renorm.csv",
        &["n", "c", "c_tilde", "c_tilde_se", "c_tilde_expected", "increment", "increment_se"],
        &rows,
    )?;
    dir.write_json("renorm_fit.json", &s)?;
    finish(dir, "renorm", cfg, replica_seeds(c_tilde_seed(cfg.master_seed), cfg.renorm.replicas))
}

#[derive(Serialize)]
struct SimulateSummary {
    sigma: f64,
    noise_seed: u64,
    steps: usize,
    dt: f64,
    /// `max_t ‖ψ_direct − ψ_rec‖_∞ / max_t ‖ψ_direct‖_∞`.
    relative_gap: f64,
    final_gap: f64,
    direct_sup: f64,
    c_final: f64,
    c_tilde_final: f64,
    c_tilde_flagged: bool,
    equilibrium_fit_residual: f64,
}

/// One path of the direct solve and the `(v, w)` reconstruction, in lockstep.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let setup = Setup::new(cfg)?;
    let coeffs = &setup.resolved.coeffs;
    let sec = &cfg.simulate;
    let ct = setup.c_tilde(cfg, &setup.timegrid, sec.c_tilde_replicas)?;
    let seed = noise_seed(cfg.master_seed);
    let noise = sample_noise(setup.grid, &setup.timegrid, setup.sigma, cfg.cutoff, seed)?;
    let props = Propagators::new(setup.grid, &setup.timegrid, coeffs, cfg.cutoff)?;
    let forcing = OuForcing::new(&noise, &props)?;
    let renorm = Renormalization::new(&props, &noise.modes, setup.sigma, &ct.value)?;
    let opts = SolveOptions { ceiling: cfg.ceiling, record_every: sec.record_every, drop_nonlinearity: false };
    let run = simulate_coupled(&props, &forcing, &renorm, coeffs, sec.form, &opts)?;

    let sups = [run.direct.sup_norms(), run.reconstructed.sup_norms(), run.v.sup_norms(), run.w.sup_norms()];
    let rows: Vec<Vec<f64>> = run
        .direct
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let gap = run.direct.fields[k].sub(&run.reconstructed.fields[k]).real().sup_norm();
            vec![t, setup.phibar(t), sups[0][k], sups[1][k], sups[2][k], sups[3][k], gap]
        })
        .collect();
    let mut dir = OutputDir::create(out)?;
    dir.write_csv("simulate.csv", &["t", "phibar", "psi_direct_sup", "psi_reconstructed_sup", "v_sup", "w_sup", "gap"], &rows)?;
    dir.write_csv("c_tilde.csv", &["t", "c_tilde_unit", "se_unit"], &c_tilde_rows(&ct))?;
    dir.write_json(
        "summary.json",
        &SimulateSummary {
            sigma: setup.sigma,
            noise_seed: seed,
            steps: run.summary.steps,
            dt: run.summary.dt,
            relative_gap: run.summary.gap,
            final_gap: run.summary.final_gap,
            direct_sup: run.summary.direct_sup,
            c_final: *renorm.c.last().unwrap(),
            c_tilde_final: *renorm.c_tilde.last().unwrap(),
            c_tilde_flagged: ct.flagged,
            equilibrium_fit_residual: setup.resolved.fit_residual,
        },
    )?;
    if sec.dump_fields {
        for (name, path) in [("psi_direct", &run.direct), ("psi_reconstructed", &run.reconstructed), ("v", &run.v), ("w", &run.w)] {
            dir.write_spectral_path(&format!("fields/{name}"), name, &path.times, &path.fields)?;
        }
    }
    finish(dir, "simulate", cfg, replica_seeds(c_tilde_seed(cfg.master_seed), sec.c_tilde_replicas))
}

/// Tail curve and fit at one amplitude.
#[derive(Clone, Debug, Serialize)]
pub struct TailAtSigma {
    pub sigma: f64,
    pub curve: TailCurve,
    pub fit: GaussianFit,
}

#[derive(Clone, Debug, Serialize)]
pub struct TailReport {
    pub statistic: TailStatistic,
    pub label: String,
    pub replicas: usize,
    pub seed: u64,
    pub curves: Vec<TailAtSigma>,
    /// `slope_h2(σ₀) / slope_h2(σ_i)`; the `h²/σ²` form predicts `(σ_i/σ₀)²`.
    pub slope_ratios: Vec<f64>,
    pub t_scaling: Vec<TScalingRow>,
}

/// Per-replica samples of the configured tail statistic at amplitude `σ`.
pub fn tail_samples(cfg: &ExperimentConfig, sigma: f64) -> Result<(String, Vec<f64>)> {
    let setup = Setup::new(cfg)?;
    let coeffs = &setup.resolved.coeffs;
    let t = &cfg.tail;
    let sigma = sigma * setup.resolved.noise_scale;
    let seed = tail_seed(cfg.master_seed);
    let tg = TimeGrid::uniform(cfg.horizon, t.steps)?;
    match t.statistic {
        TailStatistic::ISup => {
            let stat = ISupStatistic::new(setup.grid, coeffs, cfg.cutoff, cfg.horizon, t.steps, sigma, t.alpha)?;
            Ok((format!("sup_t |I(t)|_C^{}", t.alpha), sample_statistic(cfg.replicas, seed, |s| stat.eval(s))?))
        }
        TailStatistic::Xi => {
            let ct = setup.c_tilde(cfg, &tg, t.c_tilde_replicas)?;
            let mut stat = XiStatistic::new(setup.grid, coeffs, cfg.cutoff, cfg.horizon, t.steps, sigma, cfg.eps, &ct.value, t.record_every)?;
            stat.max_points = cfg.max_pair_points;
            Ok((format!("xi_norm(T={})", cfg.horizon), sample_statistic(cfg.replicas, seed, |s| stat.eval(s))?))
        }
        TailStatistic::Chaos => {
            let sym = Symbol::parse(&t.symbol)?;
            let k = t.chaos_order;
            if !sym.chaos_orders().contains(&k) {
                return Err(LabError::Config(vec![format!(
                    "tail.chaos_order: {} has no component of order {k}",
                    sym.name()
                )]));
            }
            let ct = setup.c_tilde(cfg, &tg, t.c_tilde_replicas)?;
            let part = DyadicPartition::standard(setup.grid);
            let sigmas = &DEFAULT_SIGMAS[..=sym.leaves()];
            let eval = |s: u64| -> Result<f64> {
                let noise = sample_noise(setup.grid, &tg, 1.0, cfg.cutoff, derive_seed(s, &[Role::Noise as u64]))?;
                let dec = chaos_decompose(sym, sigmas, |a| symbol_path_at(&noise, coeffs, &ct.value, sym, a))?;
                // the event {‖Π_k τ‖ > h^k} is {‖Π_k τ‖^{1/k} > h}
                Ok(sup_path_norm(&dec.component(k, sigma), t.alpha, &part).powf(1.0 / k as f64))
            };
            Ok((format!("sup_t |Pi_{k} {}|_C^{}^(1/{k})", sym.name(), t.alpha), sample_statistic(cfg.replicas, seed, eval)?))
        }
    }
}

/// Thresholds for amplitude `σ`: the configured grid scaled by `σ/σ₀`, or empirical quantiles.
fn thresholds(cfg: &ExperimentConfig, samples: &[f64], sigma: f64) -> Result<Vec<f64>> {
    match &cfg.h_grid {
        Some(h) => {
            let s0 = cfg.sigma_list()[0];
            Ok(h.iter().map(|x| x * sigma / s0).collect())
        }
        None => quantile_h_grid(samples, cfg.tail.levels[0], cfg.tail.levels[1], cfg.tail.cells),
    }
}

pub fn tail_report(cfg: &ExperimentConfig) -> Result<(TailReport, Vec<Vec<f64>>)> {
    let mut curves = Vec::new();
    let mut all = Vec::new();
    let mut label = String::new();
    for sigma in cfg.sigma_list() {
        let (l, samples) = tail_samples(cfg, sigma)?;
        label = l;
        let h = thresholds(cfg, &samples, sigma)?;
        let curve = tail_from_samples(&samples, &h, &label, sigma, cfg.horizon)?;
        let fit = gaussian_tail_fit(&curve)?;
        curves.push(TailAtSigma { sigma, curve, fit });
        all.push(samples);
    }
    let base = curves[0].fit.slope_h2;
    let slope_ratios = curves.iter().map(|c| base / c.fit.slope_h2).collect();
    let t_scaling = if cfg.tail.horizons.is_empty() {
        Vec::new()
    } else {
        let setup = Setup::new(cfg)?;
        let coeffs = &setup.resolved.coeffs;
        let sigma = setup.sigma;
        let tl = &cfg.tail;
        let dt = cfg.horizon / tl.steps as f64;
        t_scaling_probe(
            &tl.horizons,
            cfg.lambda,
            sigma,
            cfg.replicas,
            tail_seed(cfg.master_seed),
            (tl.levels[0], tl.levels[1], tl.cells),
            |h, s| {
                let c = coeffs.with_horizon(h)?;
                let steps = ((h / dt).round() as usize).max(1);
                ISupStatistic::new(setup.grid, &c, cfg.cutoff, h, steps, sigma, tl.alpha)?.eval(s)
            },
        )?
    };
    let report = TailReport {
        statistic: cfg.tail.statistic,
        label,
        replicas: cfg.replicas,
        seed: tail_seed(cfg.master_seed),
        curves,
        slope_ratios,
        t_scaling,
    };
    Ok((report, all))
}

pub fn cmd_tail(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let (report, samples) = tail_report(cfg)?;
    let mut dir = OutputDir::create(out)?;
    for (i, (c, s)) in report.curves.iter().zip(&samples).enumerate() {
        dir.write_text(&format!("tail_{i}.csv"), &c.curve.to_csv())?;
        dir.write_json(
            &format!("fit_{i}.json"),
            &serde_json::json!({
                "sigma": c.sigma,
                "fit": c.fit,
                "seed": report.seed,
                "statistic": report.label,
                "replicas": cfg.replicas,
                "horizon": cfg.horizon,
                "alpha": cfg.tail.alpha,
                "steps": cfg.tail.steps,
                "dimension": cfg.dimension,
                "points_per_axis": cfg.points_per_axis,
                "cutoff": cfg.cutoff,
            }),
        )?;
        let rows: Vec<Vec<f64>> = s.iter().enumerate().map(|(r, &x)| vec![r as f64, x]).collect();
        dir.write_csv(&format!("samples_{i}.csv"), &["replica", "statistic"], &rows)?;
    }
    if !report.t_scaling.is_empty() {
        let rows: Vec<Vec<f64>> = report
            .t_scaling
            .iter()
            .map(|r| vec![r.horizon, r.fit.slope_c, r.fit.r_squared, r.normalized])
            .collect();
        dir.write_csv("t_scaling.csv", &["horizon", "slope_c", "r_squared", "normalized"], &rows)?;
    }
    dir.write_json("report.json", &report)?;
    finish(dir, "tail", cfg, replica_seeds(report.seed, cfg.replicas))
}

/// Equivalence report plus an optional sweep over further seeds.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceOutcome {
    pub report: EquivalenceReport,
    /// `(seed, gap, ratio)` for each extra seed.
    pub sweep: Vec<(u64, f64, f64)>,
}

pub fn equivalence_config(cfg: &ExperimentConfig, seed: u64, sigma: f64) -> EquivalenceConfig {
    EquivalenceConfig {
        dim: cfg.dimension,
        points_per_axis: cfg.points_per_axis,
        cutoff: cfg.cutoff,
        horizon: cfg.horizon,
        sigma,
        dt: cfg.dt,
        seed,
        c_tilde_replicas: cfg.equivalence.c_tilde_replicas,
        form: cfg.equivalence.form,
        ceiling: cfg.ceiling,
    }
}

pub fn equivalence_outcome(cfg: &ExperimentConfig) -> Result<EquivalenceOutcome> {
    let setup = Setup::new(cfg)?;
    let coeffs = &setup.resolved.coeffs;
    let report = run_equivalence(&equivalence_config(cfg, cfg.master_seed, setup.sigma), coeffs)?;
    let sweep = (1..=cfg.equivalence.seeds as u64)
        .map(|k| {
            let seed = derive_seed(cfg.master_seed, &[0xE9, k]);
            let r = run_equivalence(&equivalence_config(cfg, seed, setup.sigma), coeffs)?;
            Ok((seed, r.fine.gap, r.ratio))
        })
        .collect::<Result<_>>()?;
    Ok(EquivalenceOutcome { report, sweep })
}

pub fn cmd_equivalence(cfg: &ExperimentConfig, out: &Path) -> Result<(EquivalenceOutcome, RunManifest)> {
    let o = equivalence_outcome(cfg)?;
    let mut dir = OutputDir::create(out)?;
    let r = &o.report;
    let rows: Vec<Vec<f64>> = r
        .fine
        .gap_path
        .iter()
        .enumerate()
        .map(|(k, &(t, g))| {
            let coarse = if k % 2 == 0 { r.coarse.gap_path[k / 2].1 } else { f64::NAN };
            vec![t, g, coarse]
        })
        .collect();
    dir.write_csv("gap_path.csv", &["t", "gap_fine", "gap_coarse"], &rows)?;
    if !o.sweep.is_empty() {
        let rows: Vec<Vec<f64>> = o.sweep.iter().map(|&(s, g, q)| vec![s as f64, g, q]).collect();
        dir.write_csv("seed_sweep.csv", &["seed", "gap", "ratio"], &rows)?;
    }
    dir.write_json(
        "equivalence.json",
        &serde_json::json!({
            "coarse": { "dt": r.coarse.dt, "steps": r.coarse.steps, "gap": r.coarse.gap, "final_gap": r.coarse.final_gap, "direct_sup": r.coarse.direct_sup },
            "fine": { "dt": r.fine.dt, "steps": r.fine.steps, "gap": r.fine.gap, "final_gap": r.fine.final_gap, "direct_sup": r.fine.direct_sup },
            "ratio": r.ratio,
            "c_final": r.c_final,
            "c_tilde_final": r.c_tilde_final,
            "form": cfg.equivalence.form,
        }),
    )?;
    let seeds = replica_seeds(c_tilde_seed(cfg.master_seed), cfg.equivalence.c_tilde_replicas);
    let m = finish(dir, "equivalence", cfg, seeds)?;
    Ok((o, m))
}
