//! Solvers: the deterministic equation, the directly renormalized equation,
//! and the paracontrolled `(v, w)` system with reconstruction of φ.

use crate::coefficients::{full_cubic, CoefficientSet, TimePoly};
use crate::error::{invalid, LabError, Result};
use crate::noise::{sample_noise, ModeSet, OuForcing, Propagators, TimeGrid};
use crate::paracalc::{
    acc_para_gt, acc_para_lt, acc_resonant, besov_norm_spectral, DyadicPartition, PaddedBlocks,
};
use crate::rng::{derive_seed, Role};
use crate::symbols::{
    renorm_c_tilde_path, PaddedSymbols, Renormalization, SymbolEnsemble, SymbolSlice, SymbolStepper,
};
use crate::torus::{
    from_padded, from_padded_pair, heat_propagate, spectral_product, to_padded, to_padded_pair, RealField,
    SpectralField, TorusGrid,
};
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::f64::consts::PI;
use std::sync::Arc;

/// Default blow-up ceiling on the sup norm.
pub const DEFAULT_CEILING: f64 = 1e6;

/// `F(t, φ) = −φ³ + b₂(t)φ² + b₁(t)φ + b₀(t)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CubicDrift {
    pub b2: TimePoly,
    pub b1: TimePoly,
    pub b0: TimePoly,
}

impl CubicDrift {
    pub fn new(b2: TimePoly, b1: TimePoly, b0: TimePoly) -> Self {
        CubicDrift { b2, b1, b0 }
    }

    /// `F = −φ³ + γ(t)φ`.
    pub fn gamma(gamma: TimePoly) -> Self {
        CubicDrift { b2: TimePoly::zero(), b1: gamma, b0: TimePoly::zero() }
    }

    pub fn eval(&self, t: f64, phi: f64) -> f64 {
        full_cubic(&self.b2, &self.b1, &self.b0, t, phi)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveOptions {
    pub ceiling: f64,
    /// Keep every `record_every`-th grid time (the final time is always kept).
    pub record_every: usize,
    /// Direct solver only: integrate the linear part and the forcing alone.
    pub drop_nonlinearity: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { ceiling: DEFAULT_CEILING, record_every: 1, drop_nonlinearity: false }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PathMeta {
    pub scheme: String,
    pub dt: f64,
    pub steps: usize,
    pub cutoff: Option<usize>,
    pub seed: Option<u64>,
    pub sigma: f64,
}

/// Time-indexed field path.
#[derive(Clone, Debug)]
pub struct SolutionPath {
    pub times: Vec<f64>,
    pub fields: Vec<SpectralField>,
    pub meta: PathMeta,
}

impl SolutionPath {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn last(&self) -> &SpectralField {
        self.fields.last().expect("paths hold at least the initial field")
    }

    pub fn real(&self, k: usize) -> RealField {
        self.fields[k].real()
    }

    pub fn sup_norms(&self) -> Vec<f64> {
        self.fields.iter().map(|f| f.real().sup_norm()).collect()
    }
}

struct Recorder {
    every: usize,
    steps: usize,
    times: Vec<f64>,
    fields: Vec<SpectralField>,
}

impl Recorder {
    fn new(every: usize, steps: usize) -> Self {
        Recorder { every: every.max(1), steps, times: Vec::new(), fields: Vec::new() }
    }

    fn push(&mut self, j: usize, t: f64, f: &SpectralField) {
        if j.is_multiple_of(self.every) || j == self.steps {
            self.times.push(t);
            self.fields.push(f.clone());
        }
    }

    fn finish(self, meta: PathMeta) -> SolutionPath {
        SolutionPath { times: self.times, fields: self.fields, meta }
    }
}

fn sup_checked(t: f64, values: &[f64], ceiling: f64) -> Result<f64> {
    let mut m = 0.0f64;
    for v in values {
        if !v.is_finite() {
            return Err(LabError::BlowUp { t, value: f64::INFINITY });
        }
        m = m.max(v.abs());
    }
    if m > ceiling {
        return Err(LabError::BlowUp { t, value: m });
    }
    Ok(m)
}

fn max_step(tg: &TimeGrid) -> f64 {
    (0..tg.steps()).map(|j| tg.dt(j)).fold(0.0, f64::max)
}

/// `∂_t φ = Δφ + F(t, φ)` by exponential Euler: heat flow exact, `F` at the left point.
pub fn solve_deterministic(
    drift: &CubicDrift,
    phi0: &RealField,
    timegrid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<SolutionPath> {
    let grid = phi0.grid;
    let norms = grid.tables().norm_sq.clone();
    let steps = timegrid.steps();
    let mut phi = phi0.spectral();
    let mut rec = Recorder::new(opts.record_every, steps);
    rec.push(0, timegrid.time(0), &phi);
    let mut heat: Option<(f64, Vec<f64>)> = None;
    for j in 0..steps {
        let (t, dt) = (timegrid.time(j), timegrid.dt(j));
        let p = to_padded(&phi);
        sup_checked(t, &p, opts.ceiling)?;
        let (b2, b1, b0) = (drift.b2.eval(t), drift.b1.eval(t), drift.b0.eval(t));
        let f: Vec<f64> = p.iter().map(|&x| -x * x * x + b2 * x * x + b1 * x + b0).collect();
        let fh = from_padded(grid, &f);
        if heat.as_ref().is_none_or(|(h, _)| *h != dt) {
            let m = norms.iter().map(|&k| (-4.0 * PI * PI * k as f64 * dt).exp()).collect();
            heat = Some((dt, m));
        }
        let m = &heat.as_ref().unwrap().1;
        for ((c, d), &k) in phi.coeffs.iter_mut().zip(&fh.coeffs).zip(m) {
            *c = (*c + d * dt) * k;
        }
        rec.push(j + 1, timegrid.time(j + 1), &phi);
    }
    sup_checked(timegrid.horizon(), &to_padded(&phi), opts.ceiling)?;
    Ok(rec.finish(PathMeta {
        scheme: "exponential-euler".into(),
        dt: max_step(timegrid),
        steps,
        cutoff: None,
        seed: None,
        sigma: 0.0,
    }))
}

/// One-step driver of the renormalized equation for the recentred field.
pub struct DirectStepper<'a> {
    props: &'a Propagators,
    forcing: &'a OuForcing,
    renorm: &'a Renormalization,
    coeffs: &'a CoefficientSet,
    psi: SpectralField,
    j: usize,
    nonlinear: bool,
    ceiling: f64,
}

impl<'a> DirectStepper<'a> {
    pub fn new(
        props: &'a Propagators,
        forcing: &'a OuForcing,
        renorm: &'a Renormalization,
        coeffs: &'a CoefficientSet,
        opts: &SolveOptions,
    ) -> Result<Self> {
        if forcing.timegrid != props.timegrid || renorm.c.len() != props.steps() + 1 {
            return invalid("forcing, propagators and constants disagree on the time grid");
        }
        Ok(DirectStepper {
            props,
            forcing,
            renorm,
            coeffs,
            psi: SpectralField::zeros(props.grid),
            j: 0,
            nonlinear: !opts.drop_nonlinearity,
            ceiling: opts.ceiling,
        })
    }

    pub fn state(&self) -> &SpectralField {
        &self.psi
    }

    pub fn index(&self) -> usize {
        self.j
    }

    /// `−ψ³ + f₂ψ² + (3c − 18c̃)ψ − f₂c` at the current time.
    pub fn drift(&self) -> Result<SpectralField> {
        let t = self.props.timegrid.time(self.j);
        let p = to_padded(&self.psi);
        sup_checked(t, &p, self.ceiling)?;
        if !self.nonlinear {
            return Ok(SpectralField::zeros(self.props.grid));
        }
        let f2 = self.coeffs.f2_at(t);
        let (c, ct) = (self.renorm.c[self.j], self.renorm.c_tilde[self.j]);
        let poly: Vec<f64> = p.iter().map(|&x| x * x * (f2 - x)).collect();
        let mut out = from_padded(self.props.grid, &poly).axpy(3.0 * c - 18.0 * ct, &self.psi);
        out.add_constant(-f2 * c);
        Ok(out)
    }

    pub fn step(&mut self) -> Result<()> {
        let n = self.drift()?;
        let j = self.j;
        self.props.euler(j, &mut self.psi, self.props.timegrid.dt(j), &n);
        self.forcing.add_to(j, &mut self.psi);
        self.j += 1;
        Ok(())
    }
}

/// Directly renormalized equation for the recentred field `φ_n − φ̄`, started at 0.
pub fn solve_renormalized(
    props: &Propagators,
    forcing: &OuForcing,
    renorm: &Renormalization,
    coeffs: &CoefficientSet,
    opts: &SolveOptions,
) -> Result<SolutionPath> {
    let mut st = DirectStepper::new(props, forcing, renorm, coeffs, opts)?;
    let steps = props.steps();
    let mut rec = Recorder::new(opts.record_every, steps);
    rec.push(0, 0.0, st.state());
    for j in 0..steps {
        st.step()?;
        rec.push(j + 1, props.timegrid.time(j + 1), st.state());
    }
    sup_checked(props.timegrid.horizon(), &to_padded(st.state()), opts.ceiling)?;
    Ok(rec.finish(PathMeta {
        scheme: "exponential-euler/exact-ou".into(),
        dt: max_step(&props.timegrid),
        steps,
        cutoff: Some(forcing.modes.cutoff),
        seed: None,
        sigma: f64::NAN,
    }))
}

/// Which expression of `G` the `(v, w)` system uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GForm {
    /// Exact rewrite of `N(φ) + W − 3WW − F` with `u = v + w + 3I(WW)` in the polynomial,
    /// the `3I(WW)` cross terms and the `f₂(1≺𝕐)⚬𝕍` term kept.
    Consistent,
    /// The printed expression: `P(v + w)` with the listed `d₀, d₁, d₂`.
    Literal,
}

/// Shared partition data for the `(v, w)` right-hand sides.
pub struct VwWorkspace {
    pub part: Arc<DyadicPartition>,
    /// Fourier multiplier of `g ↦ 1≺g`, i.e. `Σ_{k≥1} χ_k`.
    high_mask: Vec<f64>,
}

impl VwWorkspace {
    pub fn new(grid: TorusGrid) -> Self {
        let part = DyadicPartition::standard(grid);
        let high_mask = (0..grid.len()).map(|f| 1.0 - part.weight(-1, f) - part.weight(0, f)).collect();
        VwWorkspace { part, high_mask }
    }

    /// `1≺g`.
    pub fn one_lt(&self, g: &SpectralField) -> SpectralField {
        mask(g, &self.high_mask)
    }

    /// `1⩾g = g − 1≺g`.
    pub fn one_geq(&self, g: &SpectralField) -> SpectralField {
        let coeffs = g.coeffs.iter().zip(&self.high_mask).map(|(c, m)| c * (1.0 - m)).collect();
        SpectralField { grid: g.grid, coeffs }
    }
}

fn mask(g: &SpectralField, m: &[f64]) -> SpectralField {
    SpectralField { grid: g.grid, coeffs: g.coeffs.iter().zip(m).map(|(c, w)| c * w).collect() }
}

fn padded_of<'s>(s: &'s SymbolSlice, part: &DyadicPartition) -> Cow<'s, PaddedSymbols> {
    match &s.padded {
        Some(p) => Cow::Borrowed(p),
        None => Cow::Owned(PaddedSymbols::of_slice(s, part)),
    }
}

fn check_state(v: &SpectralField, w: &SpectralField, s: &SymbolSlice) -> Result<()> {
    if v.grid != s.i.grid || w.grid != s.i.grid {
        return Err(LabError::GridMismatch("(v, w) and symbols".into()));
    }
    Ok(())
}

/// `F(v+w) = −3(v+w−𝕀W)≺𝕍 + f₂𝕍`.
pub fn f_rhs(v: &SpectralField, w: &SpectralField, s: &SymbolSlice, f2: f64, ws: &VwWorkspace) -> Result<SpectralField> {
    check_state(v, w, s)?;
    let ps = padded_of(s, &ws.part);
    let pb = PaddedBlocks::new(&v.add(w).sub(&s.iw), &ws.part);
    let mut acc = vec![0.0; pb.padded_len()];
    acc_para_lt(&mut acc, -3.0, &pb, &ps.v);
    Ok(from_padded(v.grid, &acc).axpy(f2, &s.v))
}

/// `com₁(v,w) = v + [3(v+w−𝕀W) − f₂]≺𝕐`, value form.
pub fn com1(v: &SpectralField, w: &SpectralField, s: &SymbolSlice, f2: f64, ws: &VwWorkspace) -> Result<SpectralField> {
    check_state(v, w, s)?;
    let ps = padded_of(s, &ws.part);
    let pb = PaddedBlocks::new(&v.add(w).sub(&s.iw), &ws.part);
    let mut acc = vec![0.0; pb.padded_len()];
    acc_para_lt(&mut acc, 3.0, &pb, &ps.y);
    Ok(v.add(&from_padded(v.grid, &acc)).axpy(-f2, &ws.one_lt(&s.y)))
}

/// `com₂(v+w) = [≺,⚬](−3(v+w−𝕀W), 𝕐, 𝕍)`.
pub fn com2(v: &SpectralField, w: &SpectralField, s: &SymbolSlice, ws: &VwWorkspace) -> Result<SpectralField> {
    check_state(v, w, s)?;
    let ps = padded_of(s, &ws.part);
    let x = v.add(w).sub(&s.iw).scaled(-3.0);
    let xb = PaddedBlocks::new(&x, &ws.part);
    let mut acc = vec![0.0; xb.padded_len()];
    acc_para_lt(&mut acc, 1.0, &xb, &ps.y);
    let lt = PaddedBlocks::new(&from_padded(v.grid, &acc), &ws.part);
    let mut yv = s.wv.clone();
    yv.add_constant(2.0 * s.c_tilde);
    let mut out = vec![0.0; xb.padded_len()];
    acc_resonant(&mut out, 1.0, &lt, &ps.v);
    let (xp, yvp) = to_padded_pair(&x, &yv);
    for ((o, a), b) in out.iter_mut().zip(&xp).zip(&yvp) {
        *o -= a * b;
    }
    Ok(from_padded(v.grid, &out))
}

/// `d₀, d₁, d₂` of the printed polynomial, assembled term by term.
pub fn literal_coefficients(s: &SymbolSlice, f2: f64, part: &DyadicPartition) -> (SpectralField, SpectralField, SpectralField) {
    let (i, z) = (&s.i, &s.iw);
    let zb = PaddedBlocks::new(z, part);
    let ib = PaddedBlocks::new(i, part);
    let len = zb.padded_len();
    let grid = i.grid;
    let neq = |fb: &PaddedBlocks, gb: &PaddedBlocks| {
        let mut a = vec![0.0; len];
        acc_para_lt(&mut a, 1.0, fb, gb);
        acc_para_gt(&mut a, 1.0, fb, gb);
        from_padded(grid, &a)
    };
    let res = |fb: &PaddedBlocks, gb: &PaddedBlocks| {
        let mut a = vec![0.0; len];
        acc_resonant(&mut a, 1.0, fb, gb);
        from_padded(grid, &a)
    };
    let z2 = spectral_product(z, z);
    let z_neq_i = neq(&zb, &ib);
    let mut d2 = i.scaled(-3.0).axpy(3.0, z);
    d2.add_constant(f2);
    let d1 = z_neq_i
        .add(&s.vw)
        .scaled(6.0)
        .axpy(-3.0, &z2)
        .axpy(9.0, &s.wv)
        .axpy(-2.0 * f2, z)
        .axpy(2.0 * f2, i);
    // [≺,⚬](Z, Z, 𝕀) = (Z≺Z)⚬𝕀 − Z(Z⚬𝕀)
    let mut zz = vec![0.0; len];
    acc_para_lt(&mut zz, 1.0, &zb, &zb);
    let zltz = PaddedBlocks::new(&from_padded(grid, &zz), part);
    let commut = res(&zltz, &ib).sub(&spectral_product(z, &res(&zb, &ib)));
    let zoz = PaddedBlocks::new(&res(&zb, &zb), part);
    let bracket = neq(&ib, &PaddedBlocks::new(&z2, part))
        .add(&res(&ib, &zoz))
        .add(&spectral_product(z, &s.vw).scaled(2.0))
        .axpy(2.0, &commut);
    let d0 = spectral_product(z, &z2)
        .axpy(-9.0, &spectral_product(z, &s.wv))
        .axpy(f2, &z2)
        .axpy(-2.0 * f2, &s.vw.add(&neq(&ib, &zb)))
        .axpy(-3.0, &bracket);
    (d0, d1, d2)
}

/// Right-hand sides of the `(v, w)` system at one grid time.
#[derive(Clone, Debug)]
pub struct VwRhs {
    pub f: SpectralField,
    pub g: SpectralField,
    pub com1: SpectralField,
    /// Sup of `u = v + w + 3I(WW)` on the padded grid.
    pub sup_u: f64,
}

/// `F` and `G` at the slice time, sharing block syntheses between terms.
pub fn vw_rhs(
    v: &SpectralField,
    w: &SpectralField,
    s: &SymbolSlice,
    f2: f64,
    form: GForm,
    ws: &VwWorkspace,
) -> Result<VwRhs> {
    check_state(v, w, s)?;
    let grid = v.grid;
    let part = &*ws.part;
    let ps = padded_of(s, part);
    let sum = v.add(w);
    let psi = sum.sub(&s.iw);
    let pb = PaddedBlocks::new(&psi, part);
    let len = pb.padded_len();
    let (mut af, mut ap) = (vec![0.0; len], vec![0.0; len]);
    acc_para_lt(&mut af, -3.0, &pb, &ps.v);
    acc_para_lt(&mut ap, 1.0, &pb, &ps.y);
    let (fpart, p1) = from_padded_pair(grid, &af, &ap);
    let f = fpart.axpy(f2, &s.v);
    let one_y = ws.one_lt(&s.y);
    let c1 = v.axpy(3.0, &p1).axpy(-f2, &one_y);
    let ct = s.c_tilde;

    // −3com₁⚬𝕍 − 3com₂ − 3w⚬𝕍 (− 3f₂(1≺𝕐)⚬𝕍): resonant parts collected by linearity.
    let mut q = c1.scaled(-3.0).axpy(9.0, &p1).axpy(-3.0, w);
    if form == GForm::Consistent {
        q = q.axpy(-3.0 * f2, &one_y);
    }
    let qb = PaddedBlocks::new(&q, part);
    let psi_p = pb.total();
    let mut acc = vec![0.0; len];
    acc_resonant(&mut acc, 1.0, &qb, &ps.v);
    acc_para_gt(&mut acc, -3.0, &pb, &ps.v);

    let y = s.y2.scaled(3.0);
    let (yp, wvp) = to_padded_pair(&y, &s.wv);
    let (ip, zp) = (&ps.i_vals, &ps.iw_vals);
    let mut sup_u = 0.0f64;
    match form {
        GForm::Consistent => {
            for k in 0..len {
                let (x, i, z) = (psi_p[k] + zp[k] + yp[k], ip[k], zp[k]);
                sup_u = sup_u.max(x.abs());
                let q2 = -3.0 * i + 3.0 * z + f2;
                let q1 = 6.0 * z * i - 3.0 * z * z - 2.0 * f2 * z + 2.0 * f2 * i;
                let q0 = z * z * z - 3.0 * i * z * z + f2 * z * z - 2.0 * f2 * i * z;
                let poly = ((q2 - x) * x + q1) * x + q0;
                // 9ψ'·W𝕍 from the resonant expansion, −9ψ'(𝕐⚬𝕍) from com₂, −3y𝕍.
                acc[k] += poly + 9.0 * psi_p[k] * wvp[k] - 9.0 * psi_p[k] * (wvp[k] + 2.0 * ct)
                    - 3.0 * yp[k] * ps.v_vals[k];
            }
        }
        GForm::Literal => {
            let (d0, d1, d2) = literal_coefficients(s, f2, part);
            let (d0p, d1p) = to_padded_pair(&d0, &d1);
            let (d2p, xp) = to_padded_pair(&d2, &sum);
            for k in 0..len {
                let x = xp[k];
                sup_u = sup_u.max((x + yp[k]).abs());
                let poly = ((d2p[k] - x) * x + d1p[k]) * x + d0p[k];
                acc[k] += poly - 9.0 * psi_p[k] * (wvp[k] + 2.0 * ct);
            }
        }
    }
    let mut g = from_padded(grid, &acc);
    if form == GForm::Consistent {
        g = g.axpy(-18.0 * ct, &y);
    }
    if !sup_u.is_finite() {
        return Err(LabError::BlowUp { t: s.t, value: f64::INFINITY });
    }
    Ok(VwRhs { f, g, com1: c1, sup_u })
}

/// `G(v, w)` alone.
pub fn g_rhs(v: &SpectralField, w: &SpectralField, s: &SymbolSlice, f2: f64, form: GForm, ws: &VwWorkspace) -> Result<SpectralField> {
    Ok(vw_rhs(v, w, s, f2, form, ws)?.g)
}

/// `φ = φ̄ + 𝕀 − 𝕀W + 3I(WW) + v + w`.
pub fn reconstruct_phi(v: &SpectralField, w: &SpectralField, s: &SymbolSlice, phibar: f64) -> SpectralField {
    let mut out = s.i.sub(&s.iw).axpy(3.0, &s.y2).add(v).add(w);
    out.add_constant(phibar);
    out
}

/// Exponential-Euler stepping of `(v, w)` from `(0, 0)`.
pub struct VwStepper {
    pub v: SpectralField,
    pub w: SpectralField,
    form: GForm,
    ws: VwWorkspace,
    ceiling: f64,
}

impl VwStepper {
    pub fn new(grid: TorusGrid, form: GForm, ceiling: f64) -> Self {
        VwStepper {
            v: SpectralField::zeros(grid),
            w: SpectralField::zeros(grid),
            form,
            ws: VwWorkspace::new(grid),
            ceiling,
        }
    }

    pub fn workspace(&self) -> &VwWorkspace {
        &self.ws
    }

    /// Advances from the slice time to the next grid time; returns the right-hand sides used.
    pub fn step(&mut self, s: &SymbolSlice, props: &Propagators, coeffs: &CoefficientSet) -> Result<VwRhs> {
        let r = vw_rhs(&self.v, &self.w, s, coeffs.f2_at(s.t), self.form, &self.ws)?;
        if r.sup_u > self.ceiling {
            return Err(LabError::BlowUp { t: s.t, value: r.sup_u });
        }
        let dt = props.timegrid.dt(s.j);
        props.euler(s.j, &mut self.v, dt, &r.f);
        props.euler(s.j, &mut self.w, dt, &r.g);
        Ok(r)
    }
}

/// Paths of `v` and `w` driven by streamed symbols.
pub fn solve_vw(
    props: &Propagators,
    forcing: &OuForcing,
    renorm: &Renormalization,
    coeffs: &CoefficientSet,
    form: GForm,
    opts: &SolveOptions,
) -> Result<(SolutionPath, SolutionPath)> {
    let mut sym = SymbolStepper::new(props, forcing, renorm)?;
    let mut st = VwStepper::new(props.grid, form, opts.ceiling);
    let steps = props.steps();
    let (mut rv, mut rw) = (Recorder::new(opts.record_every, steps), Recorder::new(opts.record_every, steps));
    rv.push(0, 0.0, &st.v);
    rw.push(0, 0.0, &st.w);
    for j in 0..steps {
        let s = sym.slice();
        st.step(&s, props, coeffs)?;
        sym.advance(&s)?;
        let t = props.timegrid.time(j + 1);
        rv.push(j + 1, t, &st.v);
        rw.push(j + 1, t, &st.w);
    }
    let meta = |name: &str| PathMeta {
        scheme: format!("exponential-euler/{name}"),
        dt: max_step(&props.timegrid),
        steps,
        cutoff: Some(forcing.modes.cutoff),
        seed: None,
        sigma: f64::NAN,
    };
    Ok((rv.finish(meta("v")), rw.finish(meta("w"))))
}

/// `(v, w)` paths from a stored ensemble; slices must cover every grid time.
pub fn solve_vw_stored(
    ens: &SymbolEnsemble,
    props: &Propagators,
    coeffs: &CoefficientSet,
    form: GForm,
    opts: &SolveOptions,
) -> Result<(SolutionPath, SolutionPath)> {
    if ens.slices.len() != props.steps() + 1 {
        return invalid("ensemble does not cover the time grid");
    }
    let mut st = VwStepper::new(props.grid, form, opts.ceiling);
    let steps = props.steps();
    let (mut rv, mut rw) = (Recorder::new(opts.record_every, steps), Recorder::new(opts.record_every, steps));
    rv.push(0, 0.0, &st.v);
    rw.push(0, 0.0, &st.w);
    for j in 0..steps {
        st.step(&ens.slices[j], props, coeffs)?;
        let t = props.timegrid.time(j + 1);
        rv.push(j + 1, t, &st.v);
        rw.push(j + 1, t, &st.w);
    }
    let meta = |name: &str| PathMeta {
        scheme: format!("exponential-euler/{name}"),
        dt: max_step(&props.timegrid),
        steps,
        cutoff: Some(ens.meta.cutoff),
        seed: Some(ens.meta.seed),
        sigma: ens.meta.sigma,
    };
    Ok((rv.finish(meta("v")), rw.finish(meta("w"))))
}

/// Gap between the direct solve and the reconstruction on one time grid.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceRun {
    pub dt: f64,
    pub steps: usize,
    /// `max_t ‖φ_direct − φ_rec‖_∞ / max_t ‖φ_direct‖_∞`.
    pub gap: f64,
    pub final_gap: f64,
    pub direct_sup: f64,
    pub gap_path: Vec<(f64, f64)>,
}

/// Runs both routes in lockstep over the same forcing and constants.
pub fn equivalence_run(
    props: &Propagators,
    forcing: &OuForcing,
    renorm: &Renormalization,
    coeffs: &CoefficientSet,
    form: GForm,
    ceiling: f64,
) -> Result<EquivalenceRun> {
    let opts = SolveOptions { ceiling, ..SolveOptions::default() };
    let mut sym = SymbolStepper::new(props, forcing, renorm)?;
    let mut direct = DirectStepper::new(props, forcing, renorm, coeffs, &opts)?;
    let mut vw = VwStepper::new(props.grid, form, ceiling);
    let steps = props.steps();
    let mut gap_path = Vec::with_capacity(steps + 1);
    let (mut max_gap, mut max_sup) = (0.0f64, 0.0f64);
    let mut record = |t: f64, d: &SpectralField, r: &SpectralField| {
        let gap = d.sub(r).real().sup_norm();
        max_gap = max_gap.max(gap);
        max_sup = max_sup.max(d.real().sup_norm());
        gap_path.push((t, gap));
    };
    for _ in 0..steps {
        let s = sym.slice();
        record(s.t, direct.state(), &reconstruct_phi(&vw.v, &vw.w, &s, 0.0));
        vw.step(&s, props, coeffs)?;
        direct.step()?;
        sym.advance(&s)?;
    }
    let s = sym.slice();
    record(s.t, direct.state(), &reconstruct_phi(&vw.v, &vw.w, &s, 0.0));
    let final_gap = gap_path.last().unwrap().1;
    Ok(EquivalenceRun {
        dt: max_step(&props.timegrid),
        steps,
        gap: if max_sup > 0.0 { max_gap / max_sup } else { max_gap },
        final_gap,
        direct_sup: max_sup,
        gap_path,
    })
}

/// Recorded paths of both routes over one forcing.
#[derive(Clone, Debug)]
pub struct CoupledRun {
    pub direct: SolutionPath,
    pub reconstructed: SolutionPath,
    pub v: SolutionPath,
    pub w: SolutionPath,
    pub summary: EquivalenceRun,
}

/// [`equivalence_run`] that also keeps every `record_every`-th field of ψ
/// (direct), ψ (reconstructed), v and w.
pub fn simulate_coupled(
    props: &Propagators,
    forcing: &OuForcing,
    renorm: &Renormalization,
    coeffs: &CoefficientSet,
    form: GForm,
    opts: &SolveOptions,
) -> Result<CoupledRun> {
    let mut sym = SymbolStepper::new(props, forcing, renorm)?;
    let mut direct = DirectStepper::new(props, forcing, renorm, coeffs, opts)?;
    let mut vw = VwStepper::new(props.grid, form, opts.ceiling);
    let steps = props.steps();
    let mut rec: Vec<Recorder> = (0..4).map(|_| Recorder::new(opts.record_every, steps)).collect();
    let mut gap_path = Vec::with_capacity(steps + 1);
    let (mut max_gap, mut max_sup) = (0.0f64, 0.0f64);
    for j in 0..=steps {
        let s = sym.slice();
        let phi = reconstruct_phi(&vw.v, &vw.w, &s, 0.0);
        let d = direct.state();
        let gap = d.sub(&phi).real().sup_norm();
        max_gap = max_gap.max(gap);
        max_sup = max_sup.max(d.real().sup_norm());
        gap_path.push((s.t, gap));
        for (r, f) in rec.iter_mut().zip([d, &phi, &vw.v, &vw.w]) {
            r.push(j, s.t, f);
        }
        if j == steps {
            break;
        }
        vw.step(&s, props, coeffs)?;
        direct.step()?;
        sym.advance(&s)?;
    }
    let meta = |name: &str| PathMeta {
        scheme: format!("exponential-euler/{name}"),
        dt: max_step(&props.timegrid),
        steps,
        cutoff: Some(forcing.modes.cutoff),
        seed: None,
        sigma: f64::NAN,
    };
    let summary = EquivalenceRun {
        dt: max_step(&props.timegrid),
        steps,
        gap: if max_sup > 0.0 { max_gap / max_sup } else { max_gap },
        final_gap: gap_path.last().unwrap().1,
        direct_sup: max_sup,
        gap_path,
    };
    let mut it = rec.into_iter();
    let mut next = |name: &str| it.next().unwrap().finish(meta(name));
    Ok(CoupledRun { direct: next("direct"), reconstructed: next("reconstructed"), v: next("v"), w: next("w"), summary })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub dim: usize,
    pub points_per_axis: usize,
    pub cutoff: usize,
    pub horizon: f64,
    pub sigma: f64,
    pub dt: f64,
    pub seed: u64,
    pub c_tilde_replicas: usize,
    pub form: GForm,
    pub ceiling: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub coarse: EquivalenceRun,
    pub fine: EquivalenceRun,
    /// `gap(dt/2) / gap(dt)`.
    pub ratio: f64,
    pub c_tilde_final: f64,
    pub c_final: f64,
}

/// Direct solve vs reconstruction at `dt` and `dt/2` on one Brownian path.
///
/// Noise is drawn on the fine grid; the coarse forcing is its exact two-step
/// composition, so both grids see the same `𝕀` at coarse times. `c̃` is
/// estimated once on the fine grid and subsampled for the coarse one.
pub fn run_equivalence(cfg: &EquivalenceConfig, coeffs: &CoefficientSet) -> Result<EquivalenceReport> {
    let grid = TorusGrid::new(cfg.dim, cfg.points_per_axis)?;
    let m = (cfg.horizon / cfg.dt).round() as usize;
    if m == 0 || ((m as f64) * cfg.dt - cfg.horizon).abs() > 1e-9 * cfg.horizon {
        return invalid("horizon must be a whole number of steps");
    }
    let fine_tg = TimeGrid::uniform(cfg.horizon, 2 * m)?;
    let coarse_tg = TimeGrid::uniform(cfg.horizon, m)?;
    let noise = sample_noise(grid, &fine_tg, cfg.sigma, cfg.cutoff, derive_seed(cfg.seed, &[Role::Noise as u64]))?;
    let fine_props = Propagators::new(grid, &fine_tg, coeffs, cfg.cutoff)?;
    let coarse_props = Propagators::new(grid, &coarse_tg, coeffs, cfg.cutoff)?;
    let fine_forcing = OuForcing::new(&noise, &fine_props)?;
    let coarse_forcing = fine_forcing.coarsen(2, &fine_props)?;
    let ct = renorm_c_tilde_path(
        grid,
        &fine_tg,
        coeffs,
        cfg.cutoff,
        cfg.c_tilde_replicas,
        derive_seed(cfg.seed, &[Role::CTilde as u64]),
        f64::INFINITY,
    )?;
    let modes = ModeSet::new(grid, cfg.cutoff)?;
    let fine_renorm = Renormalization::new(&fine_props, &modes, cfg.sigma, &ct.value)?;
    let coarse_ct: Vec<f64> = ct.value.iter().step_by(2).copied().collect();
    let coarse_renorm = Renormalization::new(&coarse_props, &modes, cfg.sigma, &coarse_ct)?;
    let coarse = equivalence_run(&coarse_props, &coarse_forcing, &coarse_renorm, coeffs, cfg.form, cfg.ceiling)?;
    let fine = equivalence_run(&fine_props, &fine_forcing, &fine_renorm, coeffs, cfg.form, cfg.ceiling)?;
    let ratio = fine.gap / coarse.gap;
    Ok(EquivalenceReport {
        ratio,
        c_tilde_final: *fine_renorm.c_tilde.last().unwrap(),
        c_final: *fine_renorm.c.last().unwrap(),
        coarse,
        fine,
    })
}

/// `com₁(t)` by its value form and by the integral split `A + B + C`.
#[derive(Clone, Debug)]
pub struct Com1Split {
    pub a: SpectralField,
    pub b: SpectralField,
    pub c: SpectralField,
    pub value: SpectralField,
    /// `‖A + B + C − com₁‖_∞ / ‖com₁‖_∞`.
    pub rel_gap: f64,
}

/// Re-derives `com₁` at the final time through
/// `A = ∫ e^α [e^{(t−s)Δ}(X≺𝕍) − X≺e^{(t−s)Δ}𝕍]`, `B = ∫ (X(s) − X(t))≺e^α e^{(t−s)Δ}𝕍`,
/// `C = ∫ e^α e^{(t−s)Δ} f₂ (1⩾𝕍)`, with `X = f₂ − 3(v+w−𝕀W)`, by the trapezoid rule.
pub fn com1_integral_split(
    ens: &SymbolEnsemble,
    v: &SolutionPath,
    w: &SolutionPath,
    coeffs: &CoefficientSet,
) -> Result<Com1Split> {
    let m = ens.slices.len() - 1;
    if v.len() != m + 1 || w.len() != m + 1 {
        return invalid("v and w must be recorded at every grid time");
    }
    let grid = ens.slices[0].i.grid;
    let ws = VwWorkspace::new(grid);
    let part = &*ws.part;
    let times = ens.timegrid.times();
    let t = times[m];
    let x_at = |j: usize| {
        let mut x = v.fields[j].add(&w.fields[j]).sub(&ens.slices[j].iw).scaled(-3.0);
        x.add_constant(coeffs.f2_at(times[j]));
        x
    };
    let xt = x_at(m);
    let xtb = PaddedBlocks::new(&xt, part);
    let lt = |fb: &PaddedBlocks, g: &SpectralField| {
        let gb = PaddedBlocks::new(g, part);
        let mut acc = vec![0.0; fb.padded_len()];
        acc_para_lt(&mut acc, 1.0, fb, &gb);
        from_padded(grid, &acc)
    };
    let weight = |j: usize| {
        let left = if j > 0 { times[j] - times[j - 1] } else { 0.0 };
        let right = if j < m { times[j + 1] - times[j] } else { 0.0 };
        0.5 * (left + right)
    };
    let (mut a, mut b, mut c) = (SpectralField::zeros(grid), SpectralField::zeros(grid), SpectralField::zeros(grid));
    for j in 0..=m {
        let h = weight(j);
        let s = times[j];
        let vs = &ens.slices[j].v;
        if h == 0.0 || vs.max_abs_coeff() == 0.0 {
            continue;
        }
        let xs = x_at(j);
        let xsb = PaddedBlocks::new(&xs, part);
        let pv = heat_propagate(vs, s, t, coeffs)?;
        let a_s = heat_propagate(&lt(&xsb, vs), s, t, coeffs)?.sub(&lt(&xsb, &pv));
        let b_s = lt(&xsb, &pv).sub(&lt(&xtb, &pv));
        let c_s = heat_propagate(&ws.one_geq(vs).scaled(coeffs.f2_at(s)), s, t, coeffs)?;
        a.add_assign_scaled(h, &a_s);
        b.add_assign_scaled(h, &b_s);
        c.add_assign_scaled(h, &c_s);
    }
    let value = v.fields[m].sub(&lt(&xtb, &ens.slices[m].y));
    let total = a.add(&b).add(&c);
    let denom = value.real().sup_norm();
    let gap = total.sub(&value).real().sup_norm();
    Ok(Com1Split { a, b, c, value, rel_gap: if denom > 0.0 { gap / denom } else { gap } })
}

/// Fitted constants of the a-priori bounds along one `(v, w)` trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct InequalityReport {
    pub eps: f64,
    /// `max_r ‖v(r)‖_{C^{1−2ε}} / sup_{s≤r} ‖F(s)‖_{C^{−1−ε}}`.
    pub c_v: f64,
    /// `max_r ‖w(r)‖_{C^{3/2−2ε}} / sup_{s≤r} ‖G(s)‖_{C^{−1/2−ε}}`.
    pub c_w: f64,
    /// `‖F‖_{C^{−1−ε}} / ((‖v‖ + ‖w‖ + ‖𝕀W‖_{C^{1/2−ε}} + ‖f₂‖_∞) ‖𝕍‖_{C^{−1−ε}})`.
    pub c_f: f64,
    /// `‖G‖_{C^{−1/2−ε}}` over the sum of the six term bounds.
    pub c_g: f64,
    pub g_norm_max: f64,
    pub steps: usize,
}

/// Norms and bound ratios at every step of a stored trajectory.
pub fn inequality_harness(
    ens: &SymbolEnsemble,
    v: &SolutionPath,
    w: &SolutionPath,
    coeffs: &CoefficientSet,
    form: GForm,
    eps: f64,
) -> Result<InequalityReport> {
    let m = ens.slices.len() - 1;
    if v.len() != m + 1 || w.len() != m + 1 {
        return invalid("v and w must be recorded at every grid time");
    }
    if !(eps > 0.0 && eps < 1.0 / 16.0) {
        return invalid("ε must lie in (0, 1/16)");
    }
    let grid = ens.slices[0].i.grid;
    let ws = VwWorkspace::new(grid);
    let part = &*ws.part;
    let f2_sup = coeffs.f2.sup_abs(0.0, coeffs.horizon);
    let nrm = |f: &SpectralField, a: f64| besov_norm_spectral(f, a, part);
    let (mut sup_f, mut sup_g) = (0.0f64, 0.0f64);
    let mut rep = InequalityReport { eps, c_v: 0.0, c_w: 0.0, c_f: 0.0, c_g: 0.0, g_norm_max: 0.0, steps: m };
    for j in 0..=m {
        let s = &ens.slices[j];
        let f2 = coeffs.f2_at(s.t);
        let (vj, wj) = (&v.fields[j], &w.fields[j]);
        let r = vw_rhs(vj, wj, s, f2, form, &ws)?;
        let (nv, nw) = (nrm(vj, 1.0 - 2.0 * eps), nrm(wj, 1.5 - 2.0 * eps));
        let nf = nrm(&r.f, -1.0 - eps);
        let ng = nrm(&r.g, -0.5 - eps);
        if j > 0 {
            if sup_f > 0.0 {
                rep.c_v = rep.c_v.max(nv / sup_f);
            }
            if sup_g > 0.0 {
                rep.c_w = rep.c_w.max(nw / sup_g);
            }
        }
        sup_f = sup_f.max(nf);
        sup_g = sup_g.max(ng);
        rep.g_norm_max = rep.g_norm_max.max(ng);
        let nvv = nrm(&s.v, -1.0 - eps);
        let nz = nrm(&s.iw, 0.5 - eps);
        let f_bound = (nv + nw + nz + f2_sup) * nvv;
        if f_bound > 0.0 {
            rep.c_f = rep.c_f.max(nf / f_bound);
        }
        let (d0, d1, d2) = literal_coefficients(s, f2, part);
        let low = -0.5 - eps;
        let g_bound = (nv.powi(3) + nw.powi(3))
            + nw * nvv
            + (nrm(&s.iw, 0.5 - eps / 2.0) + nv + nw) * nrm(&s.v, -1.0 - eps / 2.0)
            + nrm(&d0, low)
            + nrm(&d1, low) * (nv + nw)
            + nrm(&d2, low) * (nv * nv + nw * nw)
            + (nv + nw + nrm(&s.iw, 0.5 - eps / 3.0)) * nrm(&s.y, 1.0 - eps / 3.0) * nrm(&s.v, -1.0 - eps / 3.0)
            + nrm(&r.com1, 1.0 + 2.0 * eps) * nvv;
        if g_bound > 0.0 {
            rep.c_g = rep.c_g.max(ng / g_bound);
        }
    }
    Ok(rep)
}

/// Final-time differences between successive dt halvings of the direct solve.
#[derive(Clone, Debug, Serialize)]
pub struct SelfConvergence {
    pub dts: Vec<f64>,
    /// Root mean square over seeds of `‖ψ_{dt_k} − ψ_{dt_{k+1}}‖_∞` at the final time.
    pub diffs: Vec<f64>,
    pub ratios: Vec<f64>,
}

pub fn self_convergence(
    grid: TorusGrid,
    coeffs: &CoefficientSet,
    cutoff: usize,
    horizon: f64,
    sigma: f64,
    c_tilde_unit: f64,
    base_steps: usize,
    levels: usize,
    seeds: &[u64],
) -> Result<SelfConvergence> {
    if levels < 3 {
        return invalid("self-convergence needs at least three levels");
    }
    if seeds.is_empty() {
        return invalid("self-convergence needs at least one seed");
    }
    let finest = base_steps << (levels - 1);
    let fine_tg = TimeGrid::uniform(horizon, finest)?;
    let fine_props = Propagators::new(grid, &fine_tg, coeffs, cutoff)?;
    let modes = ModeSet::new(grid, cutoff)?;
    let mut sq = vec![0.0; levels - 1];
    let mut dts = Vec::new();
    for &seed in seeds {
        let noise = sample_noise(grid, &fine_tg, sigma, cutoff, seed)?;
        let fine_forcing = OuForcing::new(&noise, &fine_props)?;
        let mut finals = Vec::new();
        dts.clear();
        for k in 0..levels {
            let factor = 1usize << (levels - 1 - k);
            let tg = fine_tg.coarsen(factor)?;
            let props = Propagators::new(grid, &tg, coeffs, cutoff)?;
            let forcing = if factor == 1 { fine_forcing.clone() } else { fine_forcing.coarsen(factor, &fine_props)? };
            let ct = vec![c_tilde_unit; tg.steps() + 1];
            let renorm = Renormalization::new(&props, &modes, sigma, &ct)?;
            let opts = SolveOptions { record_every: usize::MAX, ..SolveOptions::default() };
            let path = solve_renormalized(&props, &forcing, &renorm, coeffs, &opts)?;
            finals.push(path.last().clone());
            dts.push(tg.dt(0));
        }
        for (k, p) in finals.windows(2).enumerate() {
            sq[k] += p[0].sub(&p[1]).real().sup_norm().powi(2);
        }
    }
    let diffs: Vec<f64> = sq.iter().map(|x| (x / seeds.len() as f64).sqrt()).collect();
    let ratios = diffs.windows(2).map(|d| d[1] / d[0]).collect();
    Ok(SelfConvergence { dts, diffs, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::equilibrium_ode;
    use crate::symbols::{build_i_with, build_symbols_with};
    use crate::torus::spectral_product3;

    fn tp(c: f64) -> TimePoly {
        TimePoly::constant(c)
    }

    #[test]
    fn deterministic_fixed_point_is_stationary() {
        let grid = TorusGrid::new(2, 8).unwrap();
        let phi0 = RealField::constant(grid, 3f64.sqrt());
        let tg = TimeGrid::uniform(1.0, 100).unwrap();
        let path = solve_deterministic(&CubicDrift::gamma(tp(3.0)), &phi0, &tg, &SolveOptions::default()).unwrap();
        for f in &path.fields {
            assert!(f.real().sub(&phi0).sup_norm() < 1e-12);
        }
    }

    #[test]
    fn deterministic_matches_ode_for_constant_data() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let tg = TimeGrid::uniform(1.0, 10_000).unwrap();
        let opts = SolveOptions { record_every: 100, ..SolveOptions::default() };
        let path = solve_deterministic(&CubicDrift::gamma(tp(3.0)), &RealField::constant(grid, 2.0), &tg, &opts).unwrap();
        let ode = equilibrium_ode(&tp(3.0), 2.0, 1.0, 1e-4).unwrap();
        for (t, f) in path.times.iter().zip(&path.fields) {
            let x = f.real();
            assert!((x.values[3] - ode.at(*t)).abs() < 1e-4, "t={t}: {} vs {}", x.values[3], ode.at(*t));
        }
    }

    #[test]
    fn deterministic_dissipation_decreases_sup_norm() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let phi0 = RealField::from_fn(grid, |p| (2.0 * PI * p[0]).sin() + 0.5 * (4.0 * PI * p[1]).cos());
        let tg = TimeGrid::uniform(0.5, 500).unwrap();
        let path = solve_deterministic(&CubicDrift::gamma(tp(-1.0)), &phi0, &tg, &SolveOptions::default()).unwrap();
        let sups = path.sup_norms();
        assert!(sups.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn deterministic_blow_up_is_reported() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let drift = CubicDrift::new(tp(0.0), tp(0.0), tp(0.0));
        let tg = TimeGrid::uniform(1.0, 10).unwrap();
        // F = −φ³ with a huge initial value leaves the ceiling.
        let r = solve_deterministic(&drift, &RealField::constant(grid, 2e6), &tg, &SolveOptions::default());
        assert!(matches!(r, Err(LabError::BlowUp { .. })));
    }

    struct Setup {
        props: Propagators,
        forcing: OuForcing,
        renorm: Renormalization,
        coeffs: CoefficientSet,
    }

    fn setup(dim: usize, n_pts: usize, cutoff: usize, sigma: f64, steps: usize, horizon: f64, f2: f64, seed: u64) -> Setup {
        let grid = TorusGrid::new(dim, n_pts).unwrap();
        let coeffs = CoefficientSet::constant(f2, -1.0, horizon).unwrap();
        let tg = TimeGrid::uniform(horizon, steps).unwrap();
        let noise = sample_noise(grid, &tg, sigma, cutoff, seed).unwrap();
        let props = Propagators::new(grid, &tg, &coeffs, cutoff).unwrap();
        let forcing = OuForcing::new(&noise, &props).unwrap();
        let ct: Vec<f64> = (0..=steps).map(|j| 0.02 * (j as f64 / steps as f64)).collect();
        let renorm = Renormalization::new(&props, &noise.modes, sigma, &ct).unwrap();
        Setup { props, forcing, renorm, coeffs }
    }

    #[test]
    fn linear_case_reproduces_i() {
        let s = setup(2, 16, 5, 0.5, 20, 0.2, 0.0, 4);
        let opts = SolveOptions { drop_nonlinearity: true, ..SolveOptions::default() };
        let path = solve_renormalized(&s.props, &s.forcing, &s.renorm, &s.coeffs, &opts).unwrap();
        let i = build_i_with(&s.props, &s.forcing);
        for (a, b) in path.fields.iter().zip(&i) {
            assert_eq!(a.coeffs, b.coeffs);
        }
    }

    #[test]
    fn noiseless_renormalized_matches_deterministic() {
        let s = setup(2, 16, 4, 0.0, 50, 0.5, 0.7, 1);
        let zero = Renormalization::zero(&s.props.timegrid);
        let path = solve_renormalized(&s.props, &s.forcing, &zero, &s.coeffs, &SolveOptions::default()).unwrap();
        assert!(path.fields.iter().all(|f| f.max_abs_coeff() == 0.0));
        let _ = s.renorm;
    }

    #[test]
    fn vw_rhs_vanishes_at_time_zero_and_without_noise() {
        let s = setup(2, 16, 4, 0.6, 10, 0.1, 0.8, 3);
        let mut sym = SymbolStepper::new(&s.props, &s.forcing, &s.renorm).unwrap();
        let ws = VwWorkspace::new(s.props.grid);
        let z = SpectralField::zeros(s.props.grid);
        let s0 = sym.slice();
        for form in [GForm::Consistent, GForm::Literal] {
            let r = vw_rhs(&z, &z, &s0, 0.8, form, &ws).unwrap();
            assert_eq!(r.f.max_abs_coeff(), 0.0);
            assert!(r.g.max_abs_coeff() < 1e-15);
        }
        sym.advance(&s0).unwrap();
        let s1 = sym.slice();
        let c = com1(&z, &z, &s1, 0.0, &ws).unwrap();
        assert_eq!(c.max_abs_coeff(), 0.0);

        let q = setup(2, 16, 4, 0.0, 10, 0.1, 0.8, 3);
        let zero = Renormalization::zero(&q.props.timegrid);
        let mut sym = SymbolStepper::new(&q.props, &q.forcing, &zero).unwrap();
        let s0 = sym.slice();
        sym.advance(&s0).unwrap();
        let sl = sym.slice();
        let v = RealField::from_fn(q.props.grid, |p| 0.3 * (2.0 * PI * p[0]).cos()).spectral();
        let w = RealField::from_fn(q.props.grid, |p| 0.2 * (2.0 * PI * p[1]).sin()).spectral();
        assert!(f_rhs(&v, &w, &sl, 0.8, &ws).unwrap().max_abs_coeff() == 0.0);
        assert!(com1(&v, &w, &sl, 0.8, &ws).unwrap().sub(&v).max_abs_coeff() == 0.0);
        let c2 = com2(&v, &w, &sl, &ws).unwrap().max_abs_coeff();
        assert!(c2 < 1e-15, "com2 {c2}");
        let x = v.add(&w);
        let expect = spectral_product3(&x, &x, &x).scaled(-1.0).axpy(0.8, &spectral_product(&x, &x));
        for form in [GForm::Consistent, GForm::Literal] {
            let g = g_rhs(&v, &w, &sl, 0.8, form, &ws).unwrap();
            assert!(g.sub(&expect).max_abs_coeff() < 1e-14);
        }
    }

    #[test]
    fn fused_rhs_matches_named_pieces() {
        let s = setup(2, 16, 4, 0.8, 6, 0.06, 0.5, 8);
        let ens = {
            let nz = sample_noise(s.props.grid, &s.props.timegrid, 0.8, 4, 8).unwrap();
            build_symbols_with(&s.props, &s.forcing, &s.renorm, &nz).unwrap()
        };
        let ws = VwWorkspace::new(s.props.grid);
        let part = &*ws.part;
        let sl = &ens.slices[5];
        let v = RealField::from_fn(s.props.grid, |p| 0.3 * (2.0 * PI * (p[0] + 2.0 * p[1])).cos()).spectral();
        let w = RealField::from_fn(s.props.grid, |p| 0.2 * (2.0 * PI * p[1]).sin()).spectral();
        let f2 = 0.5;
        let r = vw_rhs(&v, &w, sl, f2, GForm::Literal, &ws).unwrap();
        let f = f_rhs(&v, &w, sl, f2, &ws).unwrap();
        assert!(r.f.sub(&f).max_abs_coeff() < 1e-13);
        let c1 = com1(&v, &w, sl, f2, &ws).unwrap();
        let c2 = com2(&v, &w, sl, &ws).unwrap();
        let x = v.add(&w);
        let (d0, d1, d2) = literal_coefficients(sl, f2, part);
        let poly = spectral_product3(&x, &x, &x)
            .scaled(-1.0)
            .add(&spectral_product(&d2, &spectral_product(&x, &x)))
            .add(&spectral_product(&d1, &x))
            .add(&d0);
        let com = crate::paracalc::resonant_spectral(&c1, &sl.v, part).add(&c2);
        let psi = x.sub(&sl.iw);
        let gt = crate::paracalc::para_lt_spectral(&sl.v, &psi, part);
        let g = poly
            .axpy(-3.0, &com)
            .axpy(-3.0, &crate::paracalc::resonant_spectral(&w, &sl.v, part))
            .axpy(-3.0, &gt);
        // the fused form evaluates P(X) pointwise from truncated d's; products of d's
        // and X are therefore the same up to the band truncation of X².
        assert!(r.g.sub(&g).max_abs_coeff() < 1e-3 * g.max_abs_coeff().max(1e-12));
    }

    #[test]
    fn literal_coefficients_reduce_to_plain_products() {
        let s = setup(2, 16, 4, 0.9, 6, 0.06, 0.4, 2);
        let nz = sample_noise(s.props.grid, &s.props.timegrid, 0.9, 4, 2).unwrap();
        let ens = build_symbols_with(&s.props, &s.forcing, &s.renorm, &nz).unwrap();
        let part = DyadicPartition::standard(s.props.grid);
        let sl = &ens.slices[6];
        let f2 = 0.4;
        let (d0, d1, d2) = literal_coefficients(sl, f2, &part);
        let (i, z) = (&sl.i, &sl.iw);
        let z2 = spectral_product(z, z);
        let iz = spectral_product(i, z);
        let mut q2 = i.scaled(-3.0).axpy(3.0, z);
        q2.add_constant(f2);
        let q1 = iz.scaled(6.0).axpy(-3.0, &z2).axpy(-2.0 * f2, z).axpy(2.0 * f2, i).axpy(9.0, &sl.wv);
        let q0 = spectral_product(z, &z2)
            .axpy(-3.0, &spectral_product(i, &z2))
            .axpy(f2, &z2)
            .axpy(-2.0 * f2, &iz)
            .axpy(-9.0, &spectral_product(z, &sl.wv));
        let scale = d0.max_abs_coeff().max(d1.max_abs_coeff());
        assert!(d2.sub(&q2).max_abs_coeff() < 1e-14);
        assert!(d1.sub(&q1).max_abs_coeff() < 1e-12 * scale);
        assert!(d0.sub(&q0).max_abs_coeff() < 1e-12 * scale);
    }

    #[test]
    fn consistent_form_is_exact_when_band_holds_the_square() {
        // 4n < N: 𝕍 is the exact square, so the two routes agree to roundoff.
        let s = setup(3, 16, 3, 0.6, 40, 0.1, 0.7, 11);
        let run = equivalence_run(&s.props, &s.forcing, &s.renorm, &s.coeffs, GForm::Consistent, 1e6).unwrap();
        assert!(run.direct_sup > 0.01);
        assert!(run.gap < 1e-11, "gap {}", run.gap);
        let lit = equivalence_run(&s.props, &s.forcing, &s.renorm, &s.coeffs, GForm::Literal, 1e6).unwrap();
        assert!(lit.gap > 1e3 * run.gap);
    }

    #[test]
    fn coupled_run_records_both_routes() {
        let s = setup(2, 16, 4, 0.4, 20, 0.2, 0.3, 6);
        let opts = SolveOptions { record_every: 5, ..SolveOptions::default() };
        let run = simulate_coupled(&s.props, &s.forcing, &s.renorm, &s.coeffs, GForm::Consistent, &opts).unwrap();
        let eq = equivalence_run(&s.props, &s.forcing, &s.renorm, &s.coeffs, GForm::Consistent, opts.ceiling).unwrap();
        assert_eq!(run.summary.gap, eq.gap);
        assert_eq!(run.direct.times.len(), 5);
        assert_eq!(run.direct.times[4], 0.2);
        let direct = solve_renormalized(&s.props, &s.forcing, &s.renorm, &s.coeffs, &opts).unwrap();
        assert_eq!(run.direct.last(), direct.last());
        assert_eq!(run.v.fields.len(), 5);
    }

    #[test]
    fn vw_paths_start_at_zero_and_reconstruct() {
        let s = setup(2, 16, 4, 0.4, 20, 0.2, 0.3, 6);
        let (v, w) = solve_vw(&s.props, &s.forcing, &s.renorm, &s.coeffs, GForm::Consistent, &SolveOptions::default()).unwrap();
        assert_eq!(v.fields[0].max_abs_coeff(), 0.0);
        assert_eq!(w.fields[0].max_abs_coeff(), 0.0);
        let direct = solve_renormalized(&s.props, &s.forcing, &s.renorm, &s.coeffs, &SolveOptions::default()).unwrap();
        let nz = sample_noise(s.props.grid, &s.props.timegrid, 0.4, 4, 6).unwrap();
        let ens = build_symbols_with(&s.props, &s.forcing, &s.renorm, &nz).unwrap();
        let (v2, w2) = solve_vw_stored(&ens, &s.props, &s.coeffs, GForm::Consistent, &SolveOptions::default()).unwrap();
        for j in 0..=20 {
            assert!(v.fields[j].sub(&v2.fields[j]).max_abs_coeff() < 1e-14);
            assert!(w.fields[j].sub(&w2.fields[j]).max_abs_coeff() < 1e-14);
            let phi = reconstruct_phi(&v.fields[j], &w.fields[j], &ens.slices[j], 0.0);
            assert!(phi.sub(&direct.fields[j]).real().sup_norm() < 1e-10);
            let shifted = reconstruct_phi(&v.fields[j], &w.fields[j], &ens.slices[j], 1.5);
            assert!((shifted.mean() - phi.mean() - 1.5).abs() < 1e-14);
        }
    }

    #[test]
    fn noiseless_w_matches_direct_remainder() {
        let s = setup(2, 16, 4, 0.0, 20, 0.2, 0.3, 6);
        let (v, w) = solve_vw(&s.props, &s.forcing, &s.renorm, &s.coeffs, GForm::Consistent, &SolveOptions::default()).unwrap();
        assert!(v.fields.iter().all(|f| f.max_abs_coeff() == 0.0));
        assert!(w.fields.iter().all(|f| f.max_abs_coeff() == 0.0));
    }

    #[test]
    fn com1_split_gap_shrinks_with_dt() {
        let gap = |steps: usize| {
            let grid = TorusGrid::new(2, 16).unwrap();
            let coeffs = CoefficientSet::constant(0.6, -1.0, 0.2).unwrap();
            let fine = TimeGrid::uniform(0.2, 64).unwrap();
            let noise = sample_noise(grid, &fine, 1.0, 4, 21).unwrap();
            let fp = Propagators::new(grid, &fine, &coeffs, 4).unwrap();
            let ff = OuForcing::new(&noise, &fp).unwrap();
            let tg = TimeGrid::uniform(0.2, steps).unwrap();
            let props = Propagators::new(grid, &tg, &coeffs, 4).unwrap();
            let forcing = if steps == 64 { ff.clone() } else { ff.coarsen(64 / steps, &fp).unwrap() };
            let renorm = Renormalization::new(&props, &noise.modes, 1.0, &vec![0.0; steps + 1]).unwrap();
            let nz = noise.coarsen(64 / steps).unwrap();
            let ens = build_symbols_with(&props, &forcing, &renorm, &nz).unwrap();
            let (v, w) = solve_vw_stored(&ens, &props, &coeffs, GForm::Consistent, &SolveOptions::default()).unwrap();
            com1_integral_split(&ens, &v, &w, &coeffs).unwrap().rel_gap
        };
        let (g1, g2, g3) = (gap(16), gap(32), gap(64));
        assert!(g2 < g1 && g3 < g2, "{g1} {g2} {g3}");
        assert!((g3 / g2 - 0.5).abs() < 0.2, "ratio {}", g3 / g2);
    }

    #[test]
    fn self_convergence_is_first_order() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let coeffs = CoefficientSet::constant(0.5, -1.0, 0.25).unwrap();
        let sc = self_convergence(grid, &coeffs, 4, 0.25, 0.5, 0.01, 64, 4, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert!(sc.diffs.windows(2).all(|d| d[1] < d[0]), "{:?}", sc.diffs);
        // stiff high modes keep the coarsest level pre-asymptotic
        let last = *sc.ratios.last().unwrap();
        assert!((last - 0.5).abs() < 0.1, "ratios {:?}", sc.ratios);
    }

    #[test]
    fn inequality_constants_are_finite() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let coeffs = CoefficientSet::constant(0.5, -1.0, 0.1).unwrap();
        let tg = TimeGrid::uniform(0.1, 10).unwrap();
        let noise = sample_noise(grid, &tg, 0.5, 4, 13).unwrap();
        let props = Propagators::new(grid, &tg, &coeffs, 4).unwrap();
        let forcing = OuForcing::new(&noise, &props).unwrap();
        let renorm = Renormalization::new(&props, &noise.modes, 0.5, &[0.0; 11]).unwrap();
        let ens = build_symbols_with(&props, &forcing, &renorm, &noise).unwrap();
        let (v, w) = solve_vw_stored(&ens, &props, &coeffs, GForm::Consistent, &SolveOptions::default()).unwrap();
        let rep = inequality_harness(&ens, &v, &w, &coeffs, GForm::Consistent, 0.05).unwrap();
        for c in [rep.c_v, rep.c_w, rep.c_f, rep.c_g] {
            assert!(c.is_finite() && c > 0.0, "{rep:?}");
        }
    }
}
