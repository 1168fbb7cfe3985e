//! Experiment configuration: a single JSON document, validated field by field.

use crate::coefficients::{
    equilibrium_ode_full, normalize_cubic, recentre, CoefficientSet, EquilibriumPath, TimePoly, DEFAULT_CEILING,
};
use crate::error::{LabError, Result};
use crate::solvers::GForm;
use crate::symbols::Symbol;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Published JSON schema of [`ExperimentConfig`].
pub const CONFIG_SCHEMA: &str = include_str!("../../../schema/experiment-config.schema.json");

/// How the drift is specified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// The recentred equation directly: `f₂(t)` and `a(t)` as monomial coefficient lists.
    Recentred { f2: Vec<f64>, a: Vec<f64> },
    /// A general cubic `a₃φ³ + b₂φ² + b₁φ + b₀` (constant `a₃ < 0`) recentred around
    /// the equilibrium started at `phibar0`.
    Cubic {
        #[serde(default = "minus_one")]
        a3: f64,
        #[serde(default)]
        b2: Vec<f64>,
        b1: Vec<f64>,
        #[serde(default)]
        b0: Vec<f64>,
        phibar0: f64,
    },
}

fn minus_one() -> f64 {
    -1.0
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec::Recentred { f2: vec![0.0], a: vec![-1.0] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailStatistic {
    /// `sup_t ‖𝕀(t)‖_{C^α}`.
    ISup,
    /// `‖(v,w)‖_{Ξ,T}`.
    Xi,
    /// `sup_t ‖Π_k τ(t)‖_{C^α}` against thresholds `h^k`.
    Chaos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymbolsSection {
    pub symbols: Vec<String>,
    /// Write binary field dumps in addition to the norm tables.
    pub dump_fields: bool,
    pub record_every: usize,
    /// Besov exponent of the norm tables; `None` uses `|τ| − eps` per symbol.
    pub alpha: Option<f64>,
    pub c_tilde_replicas: usize,
}

impl Default for SymbolsSection {
    fn default() -> Self {
        SymbolsSection {
            symbols: Symbol::ALL.iter().map(|s| s.name().to_string()).collect(),
            dump_fields: false,
            record_every: 1,
            alpha: None,
            c_tilde_replicas: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenormSection {
    pub cutoffs: Vec<usize>,
    pub time: f64,
    pub replicas: usize,
    /// Dimension used for the cutoff sweep (independent of the simulation grid).
    pub dimension: usize,
}

impl Default for RenormSection {
    fn default() -> Self {
        RenormSection { cutoffs: vec![4, 8, 16, 32], time: 0.5, replicas: 500, dimension: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailSection {
    pub statistic: TailStatistic,
    pub alpha: f64,
    /// Time steps of each replica path.
    pub steps: usize,
    /// Exceedance levels `[p_hi, p_lo]` used to place thresholds when `h_grid` is absent.
    pub levels: [f64; 2],
    pub cells: usize,
    /// Horizons of the descriptive T-scaling table; empty skips it.
    pub horizons: Vec<f64>,
    pub symbol: String,
    pub chaos_order: usize,
    /// Replicas of the `c̃` estimate used by the Ξ statistic.
    pub c_tilde_replicas: usize,
    pub record_every: usize,
}

impl Default for TailSection {
    fn default() -> Self {
        TailSection {
            statistic: TailStatistic::ISup,
            alpha: -0.6,
            steps: 100,
            levels: [0.5, 0.01],
            cells: 10,
            horizons: vec![],
            symbol: "WW".into(),
            chaos_order: 5,
            c_tilde_replicas: 200,
            record_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub record_every: usize,
    pub form: GForm,
    pub c_tilde_replicas: usize,
    pub dump_fields: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { record_every: 10, form: GForm::Consistent, c_tilde_replicas: 200, dump_fields: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceSection {
    pub c_tilde_replicas: usize,
    pub form: GForm,
    /// Extra seeds for the seed-sweep report (0 skips it).
    pub seeds: usize,
}

impl Default for EquivalenceSection {
    fn default() -> Self {
        EquivalenceSection { c_tilde_replicas: 200, form: GForm::Consistent, seeds: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dimension: usize,
    pub points_per_axis: usize,
    pub cutoff: usize,
    pub horizon: f64,
    pub dt: f64,
    pub sigma: f64,
    /// Amplitudes for σ sweeps (tail slope ratios); empty means `[sigma]`.
    pub sigmas: Vec<f64>,
    pub coefficients: CoefficientSpec,
    pub eps: f64,
    pub lambda: f64,
    pub replicas: usize,
    pub h_grid: Option<Vec<f64>>,
    pub master_seed: u64,
    pub output_dir: String,
    pub ceiling: f64,
    pub max_pair_points: usize,
    pub symbols: SymbolsSection,
    pub renorm: RenormSection,
    pub tail: TailSection,
    pub simulate: SimulateSection,
    pub equivalence: EquivalenceSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dimension: 3,
            points_per_axis: 32,
            cutoff: 8,
            horizon: 0.5,
            dt: 1e-3,
            sigma: 0.1,
            sigmas: vec![],
            coefficients: CoefficientSpec::default(),
            eps: 0.05,
            lambda: 0.01,
            replicas: 1000,
            h_grid: None,
            master_seed: 1,
            output_dir: "out".into(),
            ceiling: DEFAULT_CEILING,
            max_pair_points: 512,
            symbols: SymbolsSection::default(),
            renorm: RenormSection::default(),
            tail: TailSection::default(),
            simulate: SimulateSection::default(),
            equivalence: EquivalenceSection::default(),
        }
    }
}

/// Coefficients of the recentred equation together with the equilibrium they came from.
#[derive(Clone, Debug)]
pub struct ResolvedCoefficients {
    pub coeffs: CoefficientSet,
    /// Factor applied to σ by the cubic normalization (1 for recentred input).
    pub noise_scale: f64,
    /// Space-constant equilibrium φ̄(t), if one was integrated.
    pub equilibrium: Option<EquilibriumPath>,
    pub phibar0: f64,
    /// Max deviation of the polynomial φ̄ used for recentring from the integrated path.
    pub fit_residual: f64,
}

fn poly(field: &str, c: &[f64], errs: &mut Vec<String>) -> TimePoly {
    match TimePoly::new(if c.is_empty() { vec![0.0] } else { c.to_vec() }) {
        Ok(p) => p,
        Err(e) => {
            errs.push(format!("{field}: {e}"));
            TimePoly::zero()
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| LabError::Config(vec![format!("parse: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(vec![format!("config: cannot read {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sigma_list(&self) -> Vec<f64> {
        if self.sigmas.is_empty() {
            vec![self.sigma]
        } else {
            self.sigmas.clone()
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Every violated constraint, each prefixed by the offending field.
    pub fn violations(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(1..=3).contains(&self.dimension) {
            e.push(format!("dimension: must be 1, 2 or 3 (got {})", self.dimension));
        }
        let n = self.points_per_axis;
        if n < 4 || !n.is_power_of_two() {
            e.push(format!("points_per_axis: must be a power of two ≥ 4 (got {n})"));
        }
        if self.cutoff == 0 || 2 * self.cutoff > n {
            e.push(format!("cutoff: must satisfy 1 ≤ n ≤ N/2 (got n = {}, N = {n})", self.cutoff));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            e.push(format!("horizon: must be positive (got {})", self.horizon));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            e.push(format!("dt: must lie in (0, horizon] (got {})", self.dt));
        } else {
            let m = self.horizon / self.dt;
            if (m - m.round()).abs() > 1e-9 * m {
                e.push(format!("dt: horizon / dt must be an integer (got {m})"));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            e.push(format!("sigma: must be finite and ≥ 0 (got {})", self.sigma));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            e.push("sigmas: entries must be positive".into());
        }
        if !(self.eps > 0.0 && self.eps < 1.0 / 16.0) {
            e.push(format!("eps: must lie in (0, 1/16) (got {})", self.eps));
        }
        let lmax = (self.eps / 3.0).min(1.0);
        if !(self.lambda > 0.0 && self.lambda < lmax) {
            e.push(format!("lambda: must lie in (0, min(eps/3, 1)) = (0, {lmax}) (got {})", self.lambda));
        }
        if self.replicas == 0 {
            e.push("replicas: must be positive".into());
        }
        if let Some(h) = &self.h_grid {
            if h.is_empty() || h.windows(2).any(|w| !(w[1] > w[0])) || h.iter().any(|x| !x.is_finite()) {
                e.push("h_grid: must be non-empty, finite and strictly increasing".into());
            }
        }
        if self.output_dir.is_empty() {
            e.push("output_dir: must not be empty".into());
        }
        if !(self.ceiling > 0.0) {
            e.push("ceiling: must be positive".into());
        }
        if self.max_pair_points < 2 {
            e.push("max_pair_points: must be at least 2".into());
        }
        for s in &self.symbols.symbols {
            if Symbol::parse(s).is_err() {
                e.push(format!("symbols.symbols: unknown symbol {s:?}"));
            }
        }
        if self.symbols.record_every == 0 {
            e.push("symbols.record_every: must be positive".into());
        }
        let r = &self.renorm;
        if r.cutoffs.is_empty() || r.cutoffs.windows(2).any(|w| !(w[1] > w[0])) || r.cutoffs[0] == 0 {
            e.push("renorm.cutoffs: must be positive and strictly increasing".into());
        }
        if !(r.time > 0.0 && r.time <= self.horizon) {
            e.push(format!("renorm.time: must lie in (0, horizon] (got {})", r.time));
        }
        if r.replicas < 100 {
            e.push(format!("renorm.replicas: must be at least 100 (got {})", r.replicas));
        }
        if !(1..=3).contains(&r.dimension) {
            e.push("renorm.dimension: must be 1, 2 or 3".into());
        }
        let t = &self.tail;
        if t.steps == 0 {
            e.push("tail.steps: must be positive".into());
        }
        if !(0.0 < t.levels[1] && t.levels[1] < t.levels[0] && t.levels[0] < 1.0) {
            e.push("tail.levels: need 0 < p_lo < p_hi < 1 as [p_hi, p_lo]".into());
        }
        if t.cells < 4 {
            e.push("tail.cells: at least 4 cells are needed for a fit".into());
        }
        if t.horizons.iter().any(|x| !(*x > 0.0)) || t.horizons.windows(2).any(|w| !(w[1] > w[0])) {
            e.push("tail.horizons: must be positive and increasing".into());
        }
        match Symbol::parse(&t.symbol) {
            Ok(s) if !(1..=s.leaves()).contains(&t.chaos_order) => {
                e.push(format!("tail.chaos_order: must lie in 1..={} for {}", s.leaves(), s.name()))
            }
            Err(_) => e.push(format!("tail.symbol: unknown symbol {:?}", t.symbol)),
            _ => {}
        }
        if t.record_every == 0 {
            e.push("tail.record_every: must be positive".into());
        }
        if self.simulate.record_every == 0 {
            e.push("simulate.record_every: must be positive".into());
        }
        for (field, r) in [
            ("symbols.c_tilde_replicas", self.symbols.c_tilde_replicas),
            ("tail.c_tilde_replicas", t.c_tilde_replicas),
            ("simulate.c_tilde_replicas", self.simulate.c_tilde_replicas),
            ("equivalence.c_tilde_replicas", self.equivalence.c_tilde_replicas),
        ] {
            if r < 100 {
                e.push(format!("{field}: must be at least 100 (got {r})"));
            }
        }
        if let Err(err) = self.coefficient_check() {
            e.push(err);
        }
        e
    }

    fn coefficient_check(&self) -> std::result::Result<(), String> {
        if !(self.horizon > 0.0 && self.dt > 0.0) {
            return Ok(());
        }
        self.resolve_coefficients().map(|_| ()).map_err(|e| match e {
            LabError::Config(v) => v.join("; "),
            other => format!("coefficients: {other}"),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(v))
        }
    }

    /// Builds the recentred coefficients; for cubic input this integrates φ̄ first.
    pub fn resolve_coefficients(&self) -> Result<ResolvedCoefficients> {
        let mut errs = Vec::new();
        let out = match &self.coefficients {
            CoefficientSpec::Recentred { f2, a } => {
                let (f2, a) = (poly("coefficients.f2", f2, &mut errs), poly("coefficients.a", a, &mut errs));
                if !errs.is_empty() {
                    return Err(LabError::Config(errs));
                }
                let coeffs = CoefficientSet::new(f2, a, self.horizon, true)
                    .map_err(|e| LabError::Config(vec![format!("coefficients.a: {e}")]))?;
                ResolvedCoefficients { coeffs, noise_scale: 1.0, equilibrium: None, phibar0: 0.0, fit_residual: 0.0 }
            }
            CoefficientSpec::Cubic { a3, b2, b1, b0, phibar0 } => {
                let p2 = poly("coefficients.b2", b2, &mut errs);
                let p1 = poly("coefficients.b1", b1, &mut errs);
                let p0 = poly("coefficients.b0", b0, &mut errs);
                if !(*a3 < 0.0) {
                    errs.push(format!("coefficients.a3: must be negative (got {a3})"));
                }
                if !errs.is_empty() {
                    return Err(LabError::Config(errs));
                }
                let norm = normalize_cubic(&TimePoly::constant(*a3), &p2, &p1, &p0, self.horizon)?;
                let (q2, q1, q0) = norm.polynomials().expect("constant a3");
                let psi0 = phibar0 / norm.b(0.0);
                let dt = (self.horizon / 1000.0).min(1e-3);
                let path = equilibrium_ode_full(&q2, &q1, &q0, psi0, self.horizon, dt, self.ceiling)
                    .map_err(|e| LabError::Config(vec![format!("coefficients.phibar0: {e}")]))?;
                let (phibar, fit_residual) = path.to_poly()?;
                let coeffs = recentre(&q2, &q1, &q0, &phibar, self.horizon, true)
                    .map_err(|e| LabError::Config(vec![format!("coefficients: equilibrium is not stable: {e}")]))?;
                ResolvedCoefficients { coeffs, noise_scale: norm.noise_scale(0.0), equilibrium: Some(path), phibar0: psi0, fit_residual }
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let partial = ExperimentConfig::from_json(r#"{"cutoff": 4, "points_per_axis": 16}"#).unwrap();
        assert_eq!((partial.cutoff, partial.dimension), (4, 3));
    }

    #[test]
    fn each_violation_names_its_field() {
        let cases: &[(&str, &str)] = &[
            (r#"{"cutoff": 17}"#, "cutoff"),
            (r#"{"points_per_axis": 24}"#, "points_per_axis"),
            (r#"{"dimension": 4}"#, "dimension"),
            (r#"{"eps": 0.07}"#, "eps"),
            (r#"{"lambda": 0.02}"#, "lambda"),
            (r#"{"dt": 0.3}"#, "dt"),
            (r#"{"horizon": -1}"#, "horizon"),
            (r#"{"sigma": -0.1}"#, "sigma"),
            (r#"{"h_grid": [0.3, 0.2]}"#, "h_grid"),
            (r#"{"renorm": {"replicas": 10}}"#, "renorm.replicas"),
            (r#"{"simulate": {"c_tilde_replicas": 10}}"#, "simulate.c_tilde_replicas"),
            (r#"{"tail": {"levels": [0.01, 0.5]}}"#, "tail.levels"),
            (r#"{"symbols": {"symbols": ["Q"]}}"#, "symbols.symbols"),
            (r#"{"coefficients": {"kind": "recentred", "f2": [0], "a": [1]}}"#, "coefficients.a"),
            (r#"{"coefficients": {"kind": "cubic", "a3": 1, "b1": [3], "phibar0": 2}}"#, "coefficients.a3"),
        ];
        for (json, field) in cases {
            match ExperimentConfig::from_json(json) {
                Err(LabError::Config(v)) => {
                    assert!(v.iter().any(|m| m.starts_with(field)), "{json}: {v:?}");
                }
                other => panic!("{json} accepted: {other:?}"),
            }
        }
        assert!(matches!(ExperimentConfig::from_json(r#"{"bogus": 1}"#), Err(LabError::Config(_))));
    }

    #[test]
    fn cubic_input_recentres_around_equilibrium() {
        let cfg = ExperimentConfig::from_json(
            r#"{"horizon": 1.0, "coefficients": {"kind": "cubic", "b1": [3], "phibar0": 2}}"#,
        )
        .unwrap();
        let r = cfg.resolve_coefficients().unwrap();
        let eq = r.equilibrium.unwrap();
        // a = 3 − 3φ̄² and f₂ = −3φ̄ along the path
        for &t in &[0.0, 0.5, 1.0] {
            let p = eq.at(t);
            let tol = 3.0 * r.fit_residual;
            assert!((r.coeffs.f2_at(t) + 3.0 * p).abs() <= tol + 1e-12);
            assert!((r.coeffs.a_at(t) - (3.0 - 3.0 * p * p)).abs() <= 6.0 * p.abs() * tol + 1e-9);
        }
        assert_eq!(r.noise_scale, 1.0);
        // the e^{-6t} transient is steep; degree 8 resolves it to ~1e-4
        assert!(r.fit_residual < 1e-3, "{}", r.fit_residual);
    }

    #[test]
    fn schema_lists_every_top_level_field() {
        let schema: serde_json::Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        let props = schema["properties"].as_object().unwrap();
        let cfg = serde_json::to_value(ExperimentConfig::default()).unwrap();
        for key in cfg.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema misses {key}");
        }
        for key in props.keys() {
            assert!(cfg.get(key).is_some(), "schema has stale {key}");
        }
        assert_eq!(schema["additionalProperties"], serde_json::Value::Bool(false));
    }
}
