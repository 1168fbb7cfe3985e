//! Littlewood–Paley blocks, Hölder–Besov norms, paraproducts, the resonant
//! product and the two commutators.
//!
//! Block products are evaluated pointwise on the padded `2N` grid and summed
//! before a single analysis transform, so every bilinear expression is exact
//! on the retained band.

use crate::error::{invalid, LabError, Result};
use crate::torus::{
    dft_forward, from_padded, heat_flow, to_padded, RealField, SpectralField, TorusGrid, ZERO,
};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

fn h(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Radial cutoff: 1 on `[0, 3/4]`, 0 on `[4/3, ∞)`, smooth in between.
pub fn chi_tilde(r: f64) -> f64 {
    if r <= 0.75 {
        return 1.0;
    }
    if r >= 4.0 / 3.0 {
        return 0.0;
    }
    let a = h(4.0 / 3.0 - r);
    a / (a + h(r - 0.75))
}

/// Annulus function `χ(ζ) = χ̃(ζ/2) − χ̃(ζ)`.
pub fn chi(r: f64) -> f64 {
    chi_tilde(r / 2.0) - chi_tilde(r)
}

#[derive(Clone, Debug)]
pub struct DyadicPartition {
    grid: TorusGrid,
    max_block: i32,
    /// `weights[k + 1][flat]` = χ_k(|ω|).
    weights: Vec<Vec<f64>>,
    nonempty: Vec<bool>,
}

impl DyadicPartition {
    pub fn new(grid: TorusGrid) -> Self {
        Self::build(grid, &chi_tilde)
    }

    /// Shared standard partition for a grid.
    pub fn standard(grid: TorusGrid) -> Arc<DyadicPartition> {
        static CACHE: OnceLock<Mutex<HashMap<TorusGrid, Arc<DyadicPartition>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("partition cache poisoned");
        guard.entry(grid).or_insert_with(|| Arc::new(DyadicPartition::new(grid))).clone()
    }

    /// Partition whose low block uses `low` in place of χ̃ while the annuli keep the
    /// standard profile. Used to inject faults into the verification suite.
    pub fn with_low_cutoff(grid: TorusGrid, low: &dyn Fn(f64) -> f64) -> Self {
        Self::build(grid, low)
    }

    fn build(grid: TorusGrid, low: &dyn Fn(f64) -> f64) -> Self {
        let radius = (grid.dim() as f64).sqrt() * grid.n() as f64 / 2.0;
        let kmax = radius.log2().ceil() as i32 + 1;
        let t = grid.tables();
        let radii: Vec<f64> = t.norm_sq.iter().map(|&k2| (k2 as f64).sqrt()).collect();
        let mut weights = Vec::new();
        for k in -1..=kmax {
            let w: Vec<f64> = radii
                .iter()
                .map(|&r| if k < 0 { low(r) } else { chi(r / 2f64.powi(k)) })
                .collect();
            weights.push(w);
        }
        let nonempty: Vec<bool> = weights.iter().map(|w| w.iter().any(|&x| x != 0.0)).collect();
        let max_block = (0..weights.len()).rev().find(|&i| nonempty[i]).map_or(-1, |i| i as i32 - 1);
        weights.truncate((max_block + 2) as usize);
        let nonempty = nonempty[..weights.len()].to_vec();
        DyadicPartition { grid, max_block, weights, nonempty }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn max_block(&self) -> i32 {
        self.max_block
    }

    pub fn num_blocks(&self) -> usize {
        self.weights.len()
    }

    /// χ_k at a grid frequency.
    pub fn weight(&self, k: i32, flat: usize) -> f64 {
        self.weights[(k + 1) as usize][flat]
    }

    pub(crate) fn weights_by_index(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    pub(crate) fn is_nonempty(&self, i: usize) -> bool {
        self.nonempty[i]
    }

    /// Largest deviation of `Σ_k χ_k` from 1 over the grid.
    pub fn partition_error(&self) -> f64 {
        (0..self.grid.len())
            .map(|f| (self.weights.iter().map(|w| w[f]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest weight found outside the declared supports (0 when all constraints hold),
    /// together with the largest weight outside `[0, 1]`.
    pub fn support_violation(&self) -> f64 {
        let t = self.grid.tables();
        let mut worst: f64 = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let k = i as i32 - 1;
            for (f, &x) in w.iter().enumerate() {
                let r = (t.norm_sq[f] as f64).sqrt();
                let inside = if k < 0 {
                    r < 4.0 / 3.0
                } else {
                    let s = r / 2f64.powi(k);
                    s > 0.75 && s < 8.0 / 3.0
                };
                if !inside {
                    worst = worst.max(x.abs());
                }
                worst = worst.max((x - x.clamp(0.0, 1.0)).abs());
            }
        }
        worst
    }

    /// `Σ_{|k−l|≤1} χ_k χ_l` per frequency (weights of the resonant product's mean).
    #[cfg(test)]
    pub(crate) fn resonant_diagonal(&self) -> Vec<f64> {
        let nb = self.weights.len();
        (0..self.grid.len())
            .map(|f| {
                let mut s = 0.0;
                for i in 0..nb {
                    for j in i.saturating_sub(1)..=(i + 1).min(nb - 1) {
                        s += self.weights[i][f] * self.weights[j][f];
                    }
                }
                s
            })
            .collect()
    }

    fn check_grid(&self, g: TorusGrid) -> Result<()> {
        if g != self.grid {
            return Err(LabError::GridMismatch("partition built for another grid".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BlockDecomposition {
    /// Blocks for k = −1, 0, …, max_block.
    pub blocks: Vec<RealField>,
}

impl BlockDecomposition {
    pub fn block(&self, k: i32) -> &RealField {
        &self.blocks[(k + 1) as usize]
    }

    pub fn reconstruct(&self) -> RealField {
        let mut acc = RealField::zeros(self.blocks[0].grid);
        for b in &self.blocks {
            acc = acc.add(b);
        }
        acc
    }
}

fn masked(f: &SpectralField, w: &[f64]) -> Vec<num_complex::Complex64> {
    f.coeffs.iter().zip(w).map(|(c, &x)| if x == 0.0 { ZERO } else { c * x }).collect()
}

/// Spectral coefficients of each block.
pub fn block_spectra(f: &SpectralField, part: &DyadicPartition) -> Vec<SpectralField> {
    (0..part.num_blocks())
        .map(|i| SpectralField { grid: f.grid, coeffs: masked(f, part.weights_by_index(i)) })
        .collect()
}

/// Point values of each block on the base grid (`None` for identically zero blocks).
pub fn block_values(f: &SpectralField, part: &DyadicPartition) -> Vec<Option<Vec<f64>>> {
    let fft = f.grid.fft();
    let spectra: Vec<Option<Vec<num_complex::Complex64>>> = (0..part.num_blocks())
        .map(|i| {
            let m = masked(f, part.weights_by_index(i));
            m.iter().any(|c| *c != ZERO).then_some(m)
        })
        .collect();
    synthesize_pairs(&spectra, |a, b| fft.inverse_real_pair(a, b), |a| fft.inverse_real(a))
}

fn synthesize_pairs(
    spectra: &[Option<Vec<num_complex::Complex64>>],
    pair: impl Fn(&[num_complex::Complex64], &[num_complex::Complex64]) -> (Vec<f64>, Vec<f64>),
    single: impl Fn(&[num_complex::Complex64]) -> Vec<f64>,
) -> Vec<Option<Vec<f64>>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; spectra.len()];
    let live: Vec<usize> = (0..spectra.len()).filter(|&i| spectra[i].is_some()).collect();
    for chunk in live.chunks(2) {
        if let [i, j] = chunk {
            let (a, b) = pair(spectra[*i].as_ref().unwrap(), spectra[*j].as_ref().unwrap());
            out[*i] = Some(a);
            out[*j] = Some(b);
        } else {
            out[chunk[0]] = Some(single(spectra[chunk[0]].as_ref().unwrap()));
        }
    }
    out
}

pub fn lp_blocks(f: &RealField, part: &DyadicPartition) -> Result<BlockDecomposition> {
    part.check_grid(f.grid)?;
    let vals = block_values(&dft_forward(f), part);
    Ok(BlockDecomposition {
        blocks: vals
            .into_iter()
            .map(|v| match v {
                Some(v) => RealField { grid: f.grid, values: v },
                None => RealField::zeros(f.grid),
            })
            .collect(),
    })
}

/// `max_x |δ_k f(x)|` for each block.
pub fn block_sup_norms(f: &SpectralField, part: &DyadicPartition) -> Vec<f64> {
    block_values(f, part)
        .iter()
        .map(|b| b.as_ref().map_or(0.0, |v| v.iter().fold(0.0f64, |m, x| m.max(x.abs()))))
        .collect()
}

/// `sup_k 2^{αk} s_k` from precomputed block sup norms (index 0 is k = −1).
pub fn besov_from_sups(sups: &[f64], alpha: f64) -> f64 {
    sups.iter()
        .enumerate()
        .map(|(i, s)| 2f64.powf(alpha * (i as f64 - 1.0)) * s)
        .fold(0.0, f64::max)
}

pub fn besov_norm_spectral(f: &SpectralField, alpha: f64, part: &DyadicPartition) -> f64 {
    besov_from_sups(&block_sup_norms(f, part), alpha)
}

/// ‖f‖_{C^α} = max_k 2^{αk} ‖δ_k f‖_∞ over the finite block list.
pub fn besov_norm(f: &RealField, alpha: f64, part: &DyadicPartition) -> Result<f64> {
    part.check_grid(f.grid)?;
    Ok(besov_norm_spectral(&dft_forward(f), alpha, part))
}

/// Blocks of a field synthesised on the padded grid.
#[derive(Clone, Debug)]
pub struct PaddedBlocks {
    pub(crate) blocks: Vec<Option<Vec<f64>>>,
    padded_len: usize,
}

impl PaddedBlocks {
    pub fn new(f: &SpectralField, part: &DyadicPartition) -> Self {
        let pg = f.grid.padded();
        let t = f.grid.tables();
        let spectra: Vec<Option<Vec<num_complex::Complex64>>> = (0..part.num_blocks())
            .map(|i| {
                if !part.is_nonempty(i) {
                    return None;
                }
                let m = masked(f, part.weights_by_index(i));
                m.iter().any(|c| *c != ZERO).then(|| t.pad(&m, pg.len()))
            })
            .collect();
        let fft = pg.fft();
        let blocks =
            synthesize_pairs(&spectra, |a, b| fft.inverse_real_pair(a, b), |a| fft.inverse_real(a));
        PaddedBlocks { blocks, padded_len: pg.len() }
    }

    /// Padded point values of the whole field.
    pub fn total(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.padded_len];
        for b in self.blocks.iter().flatten() {
            for (a, x) in acc.iter_mut().zip(b) {
                *a += x;
            }
        }
        acc
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }
}

fn add_product(acc: &mut [f64], coef: f64, a: &[f64], b: &[f64]) {
    for ((o, x), y) in acc.iter_mut().zip(a).zip(b) {
        *o += coef * x * y;
    }
}

/// `acc += coef · (f ≺ g)` on the padded grid.
pub fn acc_para_lt(acc: &mut [f64], coef: f64, f: &PaddedBlocks, g: &PaddedBlocks) {
    let nb = f.blocks.len().min(g.blocks.len());
    let mut low = vec![0.0; acc.len()];
    let mut low_live = false;
    for l in 0..nb {
        if l >= 2 {
            if let Some(b) = &f.blocks[l - 2] {
                for (o, x) in low.iter_mut().zip(b) {
                    *o += x;
                }
                low_live = true;
            }
        }
        if let (true, Some(gb)) = (low_live, &g.blocks[l]) {
            add_product(acc, coef, &low, gb);
        }
    }
}

/// `acc += coef · (f ≻ g)`.
pub fn acc_para_gt(acc: &mut [f64], coef: f64, f: &PaddedBlocks, g: &PaddedBlocks) {
    acc_para_lt(acc, coef, g, f);
}

/// `acc += coef · (f ⚬ g)`.
pub fn acc_resonant(acc: &mut [f64], coef: f64, f: &PaddedBlocks, g: &PaddedBlocks) {
    let nb = f.blocks.len().min(g.blocks.len());
    for l in 0..nb {
        let Some(gb) = &g.blocks[l] else { continue };
        for k in l.saturating_sub(1)..=(l + 1).min(nb - 1) {
            if let Some(fb) = &f.blocks[k] {
                add_product(acc, coef, fb, gb);
            }
        }
    }
}

/// `acc += coef · a · b` for padded point values.
pub fn acc_product(acc: &mut [f64], coef: f64, a: &[f64], b: &[f64]) {
    add_product(acc, coef, a, b);
}

fn check_pair(f: &RealField, g: &RealField, part: &DyadicPartition) -> Result<()> {
    if f.grid != g.grid {
        return Err(LabError::GridMismatch("operands on different grids".into()));
    }
    part.check_grid(f.grid)
}

fn bilinear(
    f: &RealField,
    g: &RealField,
    part: &DyadicPartition,
    op: fn(&mut [f64], f64, &PaddedBlocks, &PaddedBlocks),
) -> Result<RealField> {
    check_pair(f, g, part)?;
    let fb = PaddedBlocks::new(&dft_forward(f), part);
    let gb = PaddedBlocks::new(&dft_forward(g), part);
    let mut acc = vec![0.0; fb.padded_len()];
    op(&mut acc, 1.0, &fb, &gb);
    Ok(from_padded(f.grid, &acc).real())
}

pub fn para_lt(f: &RealField, g: &RealField, part: &DyadicPartition) -> Result<RealField> {
    bilinear(f, g, part, acc_para_lt)
}

pub fn para_gt(f: &RealField, g: &RealField, part: &DyadicPartition) -> Result<RealField> {
    bilinear(f, g, part, acc_para_gt)
}

pub fn resonant(f: &RealField, g: &RealField, part: &DyadicPartition) -> Result<RealField> {
    bilinear(f, g, part, acc_resonant)
}

pub fn para_lt_spectral(f: &SpectralField, g: &SpectralField, part: &DyadicPartition) -> SpectralField {
    let fb = PaddedBlocks::new(f, part);
    let gb = PaddedBlocks::new(g, part);
    let mut acc = vec![0.0; fb.padded_len()];
    acc_para_lt(&mut acc, 1.0, &fb, &gb);
    from_padded(f.grid, &acc)
}

pub fn resonant_spectral(f: &SpectralField, g: &SpectralField, part: &DyadicPartition) -> SpectralField {
    let fb = PaddedBlocks::new(f, part);
    let gb = PaddedBlocks::new(g, part);
    let mut acc = vec![0.0; fb.padded_len()];
    acc_resonant(&mut acc, 1.0, &fb, &gb);
    from_padded(f.grid, &acc)
}

/// `Σ_{|k−l|≤1} χ_k χ_l` at radius `r` for the standard partition.
pub fn resonant_weight(r: f64) -> f64 {
    let kmax = if r <= 1.0 { 1 } else { r.log2().ceil() as i32 + 2 };
    let w = |k: i32| if k < 0 { chi_tilde(r) } else { chi(r / 2f64.powi(k)) };
    let mut s = 0.0;
    for k in -1..=kmax {
        let wk = w(k);
        if wk == 0.0 {
            continue;
        }
        for l in (k - 1).max(-1)..=k + 1 {
            s += wk * w(l);
        }
    }
    s
}

/// Resonant diagonal of the standard partition, computed shell by shell.
pub fn resonant_diagonal(grid: TorusGrid) -> Vec<f64> {
    let t = grid.tables();
    let mut cache: HashMap<i64, f64> = HashMap::new();
    t.norm_sq
        .iter()
        .map(|&k2| *cache.entry(k2).or_insert_with(|| resonant_weight((k2 as f64).sqrt())))
        .collect()
}

/// Spatial mean of `f ⚬ g`, computed from Fourier coefficients alone.
pub fn resonant_mean(f: &SpectralField, g: &SpectralField, diag: &[f64]) -> f64 {
    let t = f.grid.tables();
    f.coeffs
        .iter()
        .zip(&g.coeffs)
        .enumerate()
        .map(|(i, (a, b))| diag[i] * t.pair_weight(i) * (a * b.conj()).re)
        .sum()
}

/// Circled-≠: the product minus its resonant part, `f≺g + f≻g`.
pub fn circ_neq(f: &RealField, g: &RealField, part: &DyadicPartition) -> Result<RealField> {
    bilinear(f, g, part, |acc, c, a, b| {
        acc_para_lt(acc, c, a, b);
        acc_para_gt(acc, c, a, b);
    })
}

/// Circled-⩾: the product minus `f≺g`, i.e. `f⚬g + f≻g`.
pub fn circ_geq(f: &RealField, g: &RealField, part: &DyadicPartition) -> Result<RealField> {
    bilinear(f, g, part, |acc, c, a, b| {
        acc_resonant(acc, c, a, b);
        acc_para_gt(acc, c, a, b);
    })
}

/// `(f≺g)⚬h − f·(g⚬h)`.
pub fn commutator_lt_res(
    f: &RealField,
    g: &RealField,
    h: &RealField,
    part: &DyadicPartition,
) -> Result<RealField> {
    check_pair(f, g, part)?;
    check_pair(g, h, part)?;
    let (fs, gs, hs) = (dft_forward(f), dft_forward(g), dft_forward(h));
    Ok(commutator_lt_res_spectral(&fs, &gs, &hs, part).real())
}

pub fn commutator_lt_res_spectral(
    f: &SpectralField,
    g: &SpectralField,
    h: &SpectralField,
    part: &DyadicPartition,
) -> SpectralField {
    let flt = para_lt_spectral(f, g, part);
    let hb = PaddedBlocks::new(h, part);
    let gh = resonant_spectral(g, h, part);
    let mut acc = vec![0.0; hb.padded_len()];
    acc_resonant(&mut acc, 1.0, &PaddedBlocks::new(&flt, part), &hb);
    acc_product(&mut acc, -1.0, &to_padded(f), &to_padded(&gh));
    from_padded(f.grid, &acc)
}

/// `e^{tΔ}(f≺g) − f≺(e^{tΔ}g)`.
pub fn heat_commutator(f: &RealField, g: &RealField, t: f64, part: &DyadicPartition) -> Result<RealField> {
    check_pair(f, g, part)?;
    if t < 0.0 {
        return invalid("heat commutator needs t >= 0");
    }
    let (fs, gs) = (dft_forward(f), dft_forward(g));
    let lhs = heat_flow(&para_lt_spectral(&fs, &gs, part), t)?;
    let rhs = para_lt_spectral(&fs, &heat_flow(&gs, t)?, part);
    Ok(lhs.sub(&rhs).real())
}

/// L^p norm on the unit torus (`p = ∞` allowed).
pub fn lp_norm(values: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().fold(0.0, |m, x| m.max(x.abs()));
    }
    let n = values.len() as f64;
    (values.iter().map(|x| x.abs().powf(p)).sum::<f64>() / n).powf(1.0 / p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernsteinRatio {
    pub sup_norm: f64,
    pub lp_norm: f64,
    pub ratio: f64,
}

/// `‖δ_k f‖_∞` and its ratio to `2^{dk/p} ‖δ_k f‖_p`.
pub fn bernstein_check(f: &RealField, k: i32, p: f64, part: &DyadicPartition) -> Result<BernsteinRatio> {
    part.check_grid(f.grid)?;
    if !(p >= 1.0) {
        return invalid("Bernstein check needs p >= 1");
    }
    if k < -1 || k > part.max_block() {
        return invalid(format!("block {k} outside [-1, {}]", part.max_block()));
    }
    let blocks = lp_blocks(f, part)?;
    let b = &blocks.block(k).values;
    let sup = lp_norm(b, f64::INFINITY);
    let lp = lp_norm(b, p);
    let scale = if p.is_infinite() { 1.0 } else { 2f64.powf(f.grid.dim() as f64 * k as f64 / p) };
    let ratio = if lp == 0.0 { 0.0 } else { sup / (scale * lp) };
    Ok(BernsteinRatio { sup_norm: sup, lp_norm: lp, ratio })
}

/// `‖e^{tΔ}f‖_{C^α} t^{(α−β)/2} / ‖f‖_{C^β}`.
pub fn schauder_ratio(f: &SpectralField, alpha: f64, beta: f64, t: f64, part: &DyadicPartition) -> Result<f64> {
    let num = besov_norm_spectral(&heat_flow(f, t)?, alpha, part) * t.powf((alpha - beta) / 2.0);
    let den = besov_norm_spectral(f, beta, part);
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentCriterion {
    /// Monte Carlo estimate of `E‖f‖_{C^β}^p`.
    pub lhs: f64,
    /// Monte Carlo estimate of `sup_k 2^{αkp} E‖δ_k f‖_p^p`.
    pub rhs: f64,
    /// Empirical constant `(lhs/rhs)^{1/p}`.
    pub c0: f64,
    pub replicas: usize,
    /// Set when fewer than 30 replicas were used.
    pub insufficient: bool,
}

pub fn moment_criterion_check(
    mut sampler: impl FnMut(u64) -> RealField,
    alpha: f64,
    beta: f64,
    p: f64,
    replicas: usize,
    part: &DyadicPartition,
) -> Result<MomentCriterion> {
    if !(beta < alpha) {
        return invalid("moment criterion needs beta < alpha");
    }
    let d = part.grid().dim() as f64;
    if !(p > d / (alpha - beta) + 1.0) {
        return invalid(format!("moment criterion needs p > d/(alpha-beta) + 1 = {}", d / (alpha - beta) + 1.0));
    }
    if replicas == 0 {
        return Err(LabError::InsufficientData("no replicas".into()));
    }
    let nb = part.num_blocks();
    let mut lhs = 0.0;
    let mut block_moments = vec![0.0; nb];
    for r in 0..replicas {
        let f = sampler(r as u64);
        part.check_grid(f.grid)?;
        let vals = block_values(&dft_forward(&f), part);
        let sups: Vec<f64> = vals.iter().map(|b| b.as_ref().map_or(0.0, |v| lp_norm(v, f64::INFINITY))).collect();
        lhs += besov_from_sups(&sups, beta).powf(p);
        for (m, b) in block_moments.iter_mut().zip(&vals) {
            if let Some(v) = b {
                *m += lp_norm(v, p).powf(p);
            }
        }
    }
    let n = replicas as f64;
    lhs /= n;
    let rhs = block_moments
        .iter()
        .enumerate()
        .map(|(i, m)| 2f64.powf(alpha * (i as f64 - 1.0) * p) * m / n)
        .fold(0.0, f64::max);
    let c0 = if rhs == 0.0 { 0.0 } else { (lhs / rhs).powf(1.0 / p) };
    Ok(MomentCriterion { lhs, rhs, c0, replicas, insufficient: replicas < 30 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::dealiased_product;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_field(grid: TorusGrid, seed: u64) -> RealField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealField::new(grid, (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_diff(a: &RealField, b: &RealField) -> f64 {
        a.values.iter().zip(&b.values).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn plane_wave(grid: TorusGrid, k: [f64; 3]) -> RealField {
        RealField::from_fn(grid, |x| (2.0 * PI * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2])).cos())
    }

    #[test]
    fn partition_properties() {
        for (d, n) in [(1, 64), (2, 64), (3, 32)] {
            let g = TorusGrid::new(d, n).unwrap();
            let p = DyadicPartition::new(g);
            assert!(p.partition_error() <= 1e-12);
            assert_eq!(p.support_violation(), 0.0);
        }
        assert!(chi_tilde(0.75) == 1.0 && chi_tilde(4.0 / 3.0) == 0.0);
        assert!((chi_tilde(1.0) - 0.5).abs() < 0.5);
    }

    #[test]
    fn widened_low_cutoff_breaks_partition() {
        let g = TorusGrid::new(2, 32).unwrap();
        let bad = DyadicPartition::with_low_cutoff(g, &|r| chi_tilde(r / 1.5));
        assert!(bad.partition_error() > 1e-3);
        assert!(bad.support_violation() > 0.0);
    }

    #[test]
    fn constant_field_lives_in_low_block() {
        let g = TorusGrid::new(2, 16).unwrap();
        let p = DyadicPartition::new(g);
        let b = lp_blocks(&RealField::constant(g, 2.5), &p).unwrap();
        assert!(b.block(-1).values.iter().all(|v| (v - 2.5).abs() < 1e-14));
        for k in 0..=p.max_block() {
            assert!(b.block(k).sup_norm() < 1e-14);
        }
        for alpha in [-1.5, 0.0, 0.7] {
            let v = besov_norm(&RealField::constant(g, 1.0), alpha, &p).unwrap();
            assert!((v - 2f64.powf(-alpha)).abs() < 1e-13);
        }
        assert_eq!(besov_norm(&RealField::zeros(g), 1.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn wave_of_radius_four_splits_between_blocks_one_and_two() {
        let g = TorusGrid::new(2, 32).unwrap();
        let p = DyadicPartition::new(g);
        let f = plane_wave(g, [4.0, 0.0, 0.0]);
        let b = lp_blocks(&f, &p).unwrap();
        let (w1, w2) = (chi(2.0), chi(1.0));
        assert!((w1 + w2 - 1.0).abs() < 1e-15);
        for k in -1..=p.max_block() {
            let s = b.block(k).sup_norm();
            let expect = match k {
                1 => w1,
                2 => w2,
                _ => 0.0,
            };
            assert!((s - expect).abs() < 1e-12, "block {k}: {s} vs {expect}");
        }
        let norm = besov_norm(&f, 1.0, &p).unwrap();
        assert!((norm - (2.0 * w1).max(4.0 * w2)).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_and_three_way_identity() {
        let g = TorusGrid::new(2, 64).unwrap();
        let p = DyadicPartition::new(g);
        let f = random_field(g, 1);
        let h = random_field(g, 2);
        let b = lp_blocks(&f, &p).unwrap();
        assert!(max_diff(&b.reconstruct(), &f) <= 1e-10 * f.sup_norm());
        let prod = dealiased_product(&f, &h).unwrap();
        let sum = para_lt(&f, &h, &p)
            .unwrap()
            .add(&resonant(&f, &h, &p).unwrap())
            .add(&para_gt(&f, &h, &p).unwrap());
        assert!(max_diff(&sum, &prod) <= 1e-10 * prod.sup_norm());
        assert!(max_diff(&para_gt(&f, &h, &p).unwrap(), &para_lt(&h, &f, &p).unwrap()) < 1e-13);
    }

    #[test]
    fn low_high_pair_is_a_paraproduct() {
        let g = TorusGrid::new(1, 64).unwrap();
        let p = DyadicPartition::new(g);
        let f = plane_wave(g, [1.0, 0.0, 0.0]);
        let h = plane_wave(g, [16.0, 0.0, 0.0]);
        let prod = dealiased_product(&f, &h).unwrap();
        // |ω|=1 sits in blocks −1 and 0, |ω|=16 in blocks 4 and 5: all pairs satisfy k < l − 1
        let lt = para_lt(&f, &h, &p).unwrap();
        assert!(max_diff(&lt, &prod) < 1e-12);
        assert!(resonant(&f, &h, &p).unwrap().sup_norm() < 1e-12);
    }

    #[test]
    fn para_lt_against_constant() {
        let g = TorusGrid::new(2, 16).unwrap();
        let p = DyadicPartition::new(g);
        let f = random_field(g, 4);
        let one = RealField::constant(g, 1.0);
        // the constant only occupies block −1, so nothing sits above it
        assert!(para_lt(&f, &one, &p).unwrap().sup_norm() < 1e-14);
        let geq = circ_geq(&one, &f, &p).unwrap();
        let expect = f.sub(&para_lt(&one, &f, &p).unwrap());
        assert!(max_diff(&geq, &expect) < 1e-12);
        let neq = circ_neq(&f, &one, &p).unwrap().add(&resonant(&f, &one, &p).unwrap());
        assert!(max_diff(&neq, &dealiased_product(&f, &one).unwrap()) < 1e-12);
    }

    #[test]
    fn commutators() {
        let g = TorusGrid::new(2, 16).unwrap();
        let p = DyadicPartition::new(g);
        let (f1, f2, gg, hh) = (random_field(g, 1), random_field(g, 2), random_field(g, 3), random_field(g, 4));
        assert!(commutator_lt_res(&RealField::zeros(g), &gg, &hh, &p).unwrap().sup_norm() < 1e-15);
        let lhs = commutator_lt_res(&f1.add(&f2), &gg, &hh, &p).unwrap();
        let rhs = commutator_lt_res(&f1, &gg, &hh, &p).unwrap().add(&commutator_lt_res(&f2, &gg, &hh, &p).unwrap());
        assert!(max_diff(&lhs, &rhs) <= 1e-10 * lhs.sup_norm().max(1.0));
        // constant f: c·[(1≺g)⚬h − g⚬h] evaluated directly
        let c = RealField::constant(g, 2.0);
        let direct = resonant(&para_lt(&c, &gg, &p).unwrap(), &hh, &p)
            .unwrap()
            .sub(&resonant(&gg, &hh, &p).unwrap().scaled(2.0));
        assert!(max_diff(&commutator_lt_res(&c, &gg, &hh, &p).unwrap(), &direct) < 1e-12);

        assert!(heat_commutator(&f1, &gg, 0.0, &p).unwrap().sup_norm() < 1e-14);
        let a = heat_commutator(&f1.add(&f2), &gg, 0.01, &p).unwrap();
        let b = heat_commutator(&f1, &gg, 0.01, &p).unwrap().add(&heat_commutator(&f2, &gg, 0.01, &p).unwrap());
        assert!(max_diff(&a, &b) <= 1e-10 * a.sup_norm().max(1.0));
    }

    #[test]
    fn heat_commutator_of_constant_is_low_block_bookkeeping() {
        let g = TorusGrid::new(2, 16).unwrap();
        let p = DyadicPartition::new(g);
        let gg = random_field(g, 8);
        let c = RealField::constant(g, 1.5);
        let t = 0.003;
        let got = heat_commutator(&c, &gg, t, &p).unwrap();
        // 1≺g keeps blocks l ≥ 1 of g, a Fourier multiplier commuting with e^{tΔ}
        assert!(got.sup_norm() < 1e-12);
    }

    #[test]
    fn heat_commutator_scaling_is_stable() {
        let g = TorusGrid::new(2, 64).unwrap();
        let p = DyadicPartition::new(g);
        let f = random_field(g, 21);
        let h = random_field(g, 22);
        let (a, b, gamma) = (0.5, -0.5, 0.5);
        let mut consts = Vec::new();
        for t in [1e-3, 1e-2, 1e-1, 1.0] {
            let c = heat_commutator(&f, &h, t, &p).unwrap();
            let lhs = besov_norm(&c, gamma, &p).unwrap();
            let rhs = t.powf((a + b - gamma) / 2.0) * besov_norm(&f, a, &p).unwrap() * besov_norm(&h, b, &p).unwrap();
            consts.push(lhs / rhs);
        }
        assert!(consts.iter().all(|c| c.is_finite() && *c < 10.0), "{consts:?}");
    }

    #[test]
    fn bernstein_cases() {
        let g = TorusGrid::new(2, 32).unwrap();
        let p = DyadicPartition::new(g);
        let one = RealField::constant(g, 1.0);
        let r = bernstein_check(&one, -1, 2.0, &p).unwrap();
        assert!((r.sup_norm - 1.0).abs() < 1e-14 && (r.lp_norm - 1.0).abs() < 1e-14);
        assert!((r.ratio - 2.0).abs() < 1e-13);
        let f = random_field(g, 5);
        let r = bernstein_check(&f, 3, f64::INFINITY, &p).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-14);
        assert!(bernstein_check(&f, 3, 0.5, &p).is_err());
    }

    #[test]
    fn moment_criterion_cases() {
        let g = TorusGrid::new(1, 32).unwrap();
        let p = DyadicPartition::new(g);
        let zero = moment_criterion_check(|_| RealField::zeros(g), 0.5, -0.5, 4.0, 10, &p).unwrap();
        assert_eq!((zero.lhs, zero.rhs), (0.0, 0.0));
        let fixed = random_field(g, 3);
        let det = moment_criterion_check(|_| fixed.clone(), 0.5, -0.5, 4.0, 5, &p).unwrap();
        let sups = block_sup_norms(&dft_forward(&fixed), &p);
        assert!((det.lhs - besov_from_sups(&sups, -0.5).powi(4)).abs() < 1e-12 * det.lhs);
        assert!(det.insufficient);
        assert!(moment_criterion_check(|_| fixed.clone(), -0.5, 0.5, 4.0, 5, &p).is_err());
        assert!(moment_criterion_check(|_| fixed.clone(), 0.5, -0.5, 1.5, 5, &p).is_err());
    }

    #[test]
    fn resonant_mean_matches_field_mean() {
        let g = TorusGrid::new(2, 16).unwrap();
        let p = DyadicPartition::new(g);
        let f = random_field(g, 31);
        let h = random_field(g, 32);
        let direct = resonant(&f, &h, &p).unwrap().mean();
        let fast = resonant_mean(&dft_forward(&f), &dft_forward(&h), &p.resonant_diagonal());
        let radial = resonant_diagonal(g);
        for (a, b) in radial.iter().zip(p.resonant_diagonal()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((direct - fast).abs() < 1e-13);
    }
}
