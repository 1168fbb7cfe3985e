//! Fast self-check suite: every module's exact identities and degenerations,
//! with optional fault injection to show that the checks can fail.

use crate::coefficients::{equilibrium_ode, CoefficientSet, TimePoly};
use crate::concentration::{
    gaussian_tail_fit, grr_bound_by, hermite_moment_exact, nelson_check, tail_from_samples,
};
use crate::error::Result;
use crate::noise::{sample_noise, OuForcing, Propagators, TimeGrid};
use crate::paracalc::{
    bernstein_check, chi_tilde, lp_blocks, para_gt, para_lt, resonant, schauder_ratio, DyadicPartition,
};
use crate::solvers::{equivalence_run, solve_renormalized, solve_vw, GForm, SolveOptions};
use crate::symbols::{build_symbols_with, renorm_c, Renormalization};
use crate::torus::{dealiased_product, dft_forward, dft_inverse, heat_propagate, RealField, TorusGrid};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Low cutoff supported on `B(0, 2)` instead of `B(0, 4/3)`.
    WidenedPartition,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "widened-partition" | "widened_partition" => Some(Fault::WidenedPartition),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub fault: Option<Fault>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

struct Suite {
    checks: Vec<CheckResult>,
}

impl Suite {
    /// Records `value ≤ tolerance`.
    fn below(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(CheckResult { name: name.into(), passed: value <= tolerance, value, tolerance });
    }

    fn holds(&mut self, name: &str, ok: bool) {
        self.checks.push(CheckResult { name: name.into(), passed: ok, value: ok as u8 as f64, tolerance: 1.0 });
    }

    fn run(&mut self, name: &str, body: impl FnOnce(&mut Suite) -> Result<()>) {
        if let Err(e) = body(self) {
            self.checks.push(CheckResult { name: format!("{name}: {e}"), passed: false, value: f64::NAN, tolerance: 0.0 });
        }
    }
}

fn widened(r: f64) -> f64 {
    chi_tilde(r * 2.0 / 3.0)
}

fn rel(a: &RealField, b: &RealField) -> f64 {
    let d = a.sub(b).sup_norm();
    d / b.sup_norm().max(1e-300)
}

pub fn run_verify(fault: Option<Fault>) -> VerifyReport {
    let mut s = Suite { checks: Vec::new() };
    let grid2 = TorusGrid::new(2, 64).expect("valid grid");
    let part = match fault {
        Some(Fault::WidenedPartition) => DyadicPartition::with_low_cutoff(grid2, &widened),
        None => DyadicPartition::new(grid2),
    };

    s.below("partition_of_unity", part.partition_error(), 1e-12);
    s.below("partition_supports", part.support_violation(), 0.0);
    s.run("littlewood_paley", |s| {
        let (mut recon, mut three) = (0.0f64, 0.0f64);
        for k in 0..10u64 {
            let (f, g) = (RealField::random(grid2, 2 * k), RealField::random(grid2, 2 * k + 1));
            recon = recon.max(rel(&lp_blocks(&f, &part)?.reconstruct(), &f));
            let sum = para_lt(&f, &g, &part)?.add(&resonant(&f, &g, &part)?).add(&para_gt(&f, &g, &part)?);
            three = three.max(rel(&sum, &dealiased_product(&f, &g)?));
        }
        s.below("block_reconstruction", recon, 1e-10);
        s.below("three_way_product", three, 1e-10);
        Ok(())
    });
    s.run("fourier", |s| {
        let g3 = TorusGrid::new(3, 16)?;
        let f = RealField::random(g3, 9);
        s.below("dft_round_trip", dft_inverse(&dft_forward(&f)).sub(&f).sup_norm(), 1e-12);
        let fh = dft_forward(&f);
        let lhs = f.values.iter().map(|x| x * x).sum::<f64>() / g3.len() as f64;
        s.below("parseval", (lhs - fh.energy()).abs() / lhs, 1e-10);
        let c = CoefficientSet::constant(0.0, -1.0, 1.0)?;
        let a = heat_propagate(&heat_propagate(&fh, 0.1, 0.4, &c)?, 0.4, 0.9, &c)?;
        let b = heat_propagate(&fh, 0.1, 0.9, &c)?;
        s.below("heat_semigroup", a.sub(&b).max_abs_coeff(), 1e-12);
        Ok(())
    });
    s.run("bernstein_schauder", |s| {
        let g = TorusGrid::new(2, 32)?;
        let p = DyadicPartition::standard(g);
        let (mut bern, mut sch) = (0.0f64, 0.0f64);
        for k in 0..5u64 {
            let f = RealField::random(g, 100 + k);
            for b in 0..=p.max_block() {
                bern = bern.max(bernstein_check(&f, b, 2.0, &p)?.ratio);
            }
            for t in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
                sch = sch.max(schauder_ratio(&dft_forward(&f), 0.9, -1.05, t, &p)?);
            }
        }
        s.below("bernstein_ratio_bounded", bern, 10.0);
        s.below("schauder_ratio_bounded", sch, 10.0);
        Ok(())
    });
    s.run("renormalization", |s| {
        let c = CoefficientSet::constant(0.0, -1.0, 1.0)?;
        let v = renorm_c(&c, 3, 0, 0.5, 1.0)?;
        s.below("c_single_mode", (v - (1.0 - (-1f64).exp()) / 2.0).abs(), 1e-14);
        Ok(())
    });
    s.run("noiseless", |s| {
        let g = TorusGrid::new(2, 16)?;
        let c = CoefficientSet::constant(0.6, -1.0, 0.1)?;
        let tg = TimeGrid::uniform(0.1, 10)?;
        let nz = sample_noise(g, &tg, 0.0, 4, 3)?;
        let props = Propagators::new(g, &tg, &c, 4)?;
        let forcing = OuForcing::new(&nz, &props)?;
        let renorm = Renormalization::zero(&tg);
        let ens = build_symbols_with(&props, &forcing, &renorm, &nz)?;
        let sym = ens.slices.iter().map(|sl| sl.ww.max_abs_coeff() + sl.i.max_abs_coeff()).fold(0.0, f64::max);
        s.below("sigma_zero_symbols", sym, 0.0);
        let d = solve_renormalized(&props, &forcing, &renorm, &c, &SolveOptions::default())?;
        s.below("sigma_zero_direct", d.last().max_abs_coeff(), 0.0);
        let (v, w) = solve_vw(&props, &forcing, &renorm, &c, GForm::Consistent, &SolveOptions::default())?;
        s.below("sigma_zero_vw", v.last().max_abs_coeff() + w.last().max_abs_coeff(), 0.0);
        Ok(())
    });
    s.run("equivalence", |s| {
        let g = TorusGrid::new(3, 16)?;
        let c = CoefficientSet::constant(0.5, -1.0, 0.05)?;
        let tg = TimeGrid::uniform(0.05, 20)?;
        let nz = sample_noise(g, &tg, 0.5, 3, 5)?;
        let props = Propagators::new(g, &tg, &c, 3)?;
        let forcing = OuForcing::new(&nz, &props)?;
        let renorm = Renormalization::new(&props, &nz.modes, 0.5, &[0.01; 21])?;
        let run = equivalence_run(&props, &forcing, &renorm, &c, GForm::Consistent, 1e6)?;
        s.below("reconstruction_matches_direct", run.gap, 1e-10);
        Ok(())
    });
    s.run("concentration", |s| {
        s.below("wick_h2_fourth", (hermite_moment_exact(2, 4) - 60.0).abs(), 0.0);
        let n = nelson_check(2, 4, 100_000, 11)?;
        s.holds("nelson_order2_p4", n.passes());
        let times: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let idx: Vec<usize> = (0..101).collect();
        let g = grr_bound_by(&times, &idx, 8, 0.5, |i, j| (times[j] - times[i]).abs())?;
        s.holds("grr_linear_path", g.dominates());
        let h: Vec<f64> = (1..=6).map(|i| 0.05 * i as f64).collect();
        let samples: Vec<f64> = (1..1000).map(|i| (-(i as f64 / 1000.0).ln() / 5.0).sqrt() * 0.2).collect();
        let fit = gaussian_tail_fit(&tail_from_samples(&samples, &h, "synthetic", 0.2, 1.0)?)?;
        s.below("gaussian_fit_recovery", (fit.slope_c / 5.0 - 1.0).abs(), 0.05);
        Ok(())
    });
    s.run("equilibrium", |s| {
        let path = equilibrium_ode(&TimePoly::constant(3.0), 2.0, 1.0, 1e-3)?;
        let a = path.linearization(&TimePoly::constant(3.0));
        s.holds("equilibrium_stays_above_one", path.values.iter().all(|&p| p > 1.0));
        s.holds("equilibrium_stable", a.iter().all(|&x| x < 0.0));
        Ok(())
    });
    let passed = s.checks.iter().all(|c| c.passed);
    VerifyReport { fault, checks: s.checks, passed }
}
