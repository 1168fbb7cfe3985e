//! Discrete torus geometry, real/spectral fields, exact heat propagation,
//! spectral truncation and dealiased products.
//!
//! Frequencies live in `(-N/2, N/2]` per axis. A coefficient whose index sits
//! on the Nyquist plane stands for the sum of the two continuum modes `±N/2`;
//! when a field is lifted to the padded `2N` grid it is split evenly between
//! them, and folding back sums them again.

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, LabError, Result};
use crate::fft::FftNd;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return invalid(format!("dimension must be 1, 2 or 3 (got {dim})"));
        }
        if n < 4 || !n.is_power_of_two() {
            return invalid(format!("points per axis must be a power of two >= 4 (got {n})"));
        }
        Ok(TorusGrid { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid with twice the points per axis, used for dealiasing.
    pub fn padded(&self) -> TorusGrid {
        TorusGrid { dim: self.dim, n: 2 * self.n }
    }

    /// Signed frequency of an axis index, in `(-N/2, N/2]`.
    pub fn freq_of_index(&self, i: usize) -> i64 {
        if i <= self.n / 2 {
            i as i64
        } else {
            i as i64 - self.n as i64
        }
    }

    pub fn index_of_freq(&self, k: i64) -> usize {
        k.rem_euclid(self.n as i64) as usize
    }

    pub fn wavevector(&self, flat: usize) -> [i64; 3] {
        let mut out = [0i64; 3];
        let mut rem = flat;
        for a in (0..self.dim).rev() {
            out[a] = self.freq_of_index(rem % self.n);
            rem /= self.n;
        }
        out
    }

    pub fn flat_of_wavevector(&self, k: &[i64]) -> usize {
        k.iter()
            .take(self.dim)
            .fold(0, |acc, &ki| acc * self.n + self.index_of_freq(ki))
    }

    /// |ω|² as an integer.
    pub fn norm_sq(&self, flat: usize) -> i64 {
        self.wavevector(flat).iter().map(|k| k * k).sum()
    }

    pub fn linf(&self, flat: usize) -> i64 {
        self.wavevector(flat).iter().map(|k| k.abs()).max().unwrap_or(0)
    }

    /// Number of Nyquist components of a wavevector.
    pub fn nyquist_count(&self, flat: usize) -> u32 {
        let h = (self.n / 2) as i64;
        self.wavevector(flat).iter().take(self.dim).filter(|&&k| k == h).count() as u32
    }

    /// Flat index of `-ω` on the grid.
    pub fn negate(&self, flat: usize) -> usize {
        let k = self.wavevector(flat);
        let neg: Vec<i64> = k.iter().take(self.dim).map(|x| -x).collect();
        self.flat_of_wavevector(&neg)
    }

    /// Coordinates of a grid point in `[0,1)^d`.
    pub fn point(&self, flat: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        let mut rem = flat;
        for a in (0..self.dim).rev() {
            out[a] = (rem % self.n) as f64 / self.n as f64;
            rem /= self.n;
        }
        out
    }

    pub fn fft(&self) -> Arc<FftNd> {
        FftNd::cached(self.dim, self.n)
    }

    pub(crate) fn tables(&self) -> Arc<GridTables> {
        static CACHE: OnceLock<Mutex<HashMap<TorusGrid, Arc<GridTables>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("grid cache poisoned");
        guard
            .entry(*self)
            .or_insert_with(|| Arc::new(GridTables::new(*self)))
            .clone()
    }
}

/// Precomputed per-grid index tables.
pub(crate) struct GridTables {
    pub norm_sq: Vec<i64>,
    pub linf: Vec<i64>,
    pub negate: Vec<usize>,
    /// Padded-grid images of each base index (CSR layout).
    pad_offsets: Vec<usize>,
    pad_targets: Vec<usize>,
    pad_weights: Vec<f64>,
}

impl GridTables {
    fn new(grid: TorusGrid) -> Self {
        let len = grid.len();
        let pg = grid.padded();
        let h = (grid.n / 2) as i64;
        let mut pad_offsets = Vec::with_capacity(len + 1);
        let mut pad_targets = Vec::new();
        let mut pad_weights = Vec::new();
        pad_offsets.push(0);
        for flat in 0..len {
            let k = grid.wavevector(flat);
            let nyq: Vec<usize> = (0..grid.dim).filter(|&a| k[a] == h).collect();
            let copies = 1usize << nyq.len();
            let w = 1.0 / copies as f64;
            for mask in 0..copies {
                let mut kk = k;
                for (bit, &a) in nyq.iter().enumerate() {
                    if mask & (1 << bit) != 0 {
                        kk[a] = -h;
                    }
                }
                pad_targets.push(pg.flat_of_wavevector(&kk[..grid.dim]));
                pad_weights.push(w);
            }
            pad_offsets.push(pad_targets.len());
        }
        GridTables {
            norm_sq: (0..len).map(|f| grid.norm_sq(f)).collect(),
            linf: (0..len).map(|f| grid.linf(f)).collect(),
            negate: (0..len).map(|f| grid.negate(f)).collect(),
            pad_offsets,
            pad_targets,
            pad_weights,
        }
    }

    /// Lifts base-grid coefficients to the padded grid.
    pub fn pad(&self, coeffs: &[Complex64], padded_len: usize) -> Vec<Complex64> {
        let mut out = vec![ZERO; padded_len];
        for (flat, c) in coeffs.iter().enumerate() {
            if *c == ZERO {
                continue;
            }
            for p in self.pad_offsets[flat]..self.pad_offsets[flat + 1] {
                out[self.pad_targets[p]] = c * self.pad_weights[p];
            }
        }
        out
    }

    /// Truncates padded-grid coefficients back to the base band (folding Nyquist images).
    pub fn unpad(&self, padded: &[Complex64]) -> Vec<Complex64> {
        (0..self.pad_offsets.len() - 1)
            .map(|flat| {
                (self.pad_offsets[flat]..self.pad_offsets[flat + 1])
                    .map(|p| padded[self.pad_targets[p]])
                    .sum()
            })
            .collect()
    }

    /// Weight `2^{-m}` used when pairing coefficients consistently with the padded lift.
    pub fn pair_weight(&self, flat: usize) -> f64 {
        self.pad_weights[self.pad_offsets[flat]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealField {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    pub grid: TorusGrid,
    pub coeffs: Vec<Complex64>,
}

impl RealField {
    /// Values drawn uniformly from `[−1, 1]` on the `Fields` stream of `seed`.
    pub fn random(grid: TorusGrid, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, 0, crate::rng::Role::Fields, 0);
        RealField { grid, values: (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!("expected {} values, got {}", grid.len(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("field contains non-finite values");
        }
        Ok(RealField { grid, values })
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        RealField { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        RealField { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: TorusGrid, f: impl Fn([f64; 3]) -> f64) -> Self {
        RealField { grid, values: (0..grid.len()).map(|i| f(grid.point(i))).collect() }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        RealField { grid: self.grid, values: self.values.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &RealField) -> Self {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &RealField) -> Self {
        self.axpy(-1.0, other)
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: f64, other: &RealField) -> Self {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        RealField {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect(),
        }
    }

    pub fn spectral(&self) -> SpectralField {
        dft_forward(self)
    }
}

impl SpectralField {
    pub fn zeros(grid: TorusGrid) -> Self {
        SpectralField { grid, coeffs: vec![ZERO; grid.len()] }
    }

    pub fn real(&self) -> RealField {
        dft_inverse(self)
    }

    pub fn scaled(&self, s: f64) -> Self {
        SpectralField { grid: self.grid, coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    pub fn add(&self, other: &SpectralField) -> Self {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &SpectralField) -> Self {
        self.axpy(-1.0, other)
    }

    pub fn axpy(&self, s: f64, other: &SpectralField) -> Self {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        SpectralField {
            grid: self.grid,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b * s).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, s: f64, other: &SpectralField) {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += b * s;
        }
    }

    /// Adds a constant function.
    pub fn add_constant(&mut self, c: f64) {
        self.coeffs[0] += c;
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[0].re
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.norm()))
    }

    /// Largest violation of `c(-ω) = conj c(ω)`.
    pub fn hermitian_defect(&self) -> f64 {
        let t = self.grid.tables();
        self.coeffs
            .iter()
            .enumerate()
            .fold(0.0, |m, (i, c)| m.max((c - self.coeffs[t.negate[i]].conj()).norm()))
    }

    /// Sum over ω of |c(ω)|².
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

pub fn dft_forward(f: &RealField) -> SpectralField {
    SpectralField { grid: f.grid, coeffs: f.grid.fft().forward_real(&f.values) }
}

/// Synthesis `f(x) = Σ_ω f̂(ω) e^{2iπω·x}`; the imaginary part is discarded.
pub fn dft_inverse(f: &SpectralField) -> RealField {
    RealField { grid: f.grid, values: f.grid.fft().inverse_real(&f.coeffs) }
}

/// Multiplier `e^{α(t,s)} e^{-4π²|ω|²(t-s)}` applied to every coefficient.
pub fn heat_propagate(
    f: &SpectralField,
    s: f64,
    t: f64,
    coeffs: &CoefficientSet,
) -> Result<SpectralField> {
    if t < s {
        return Err(LabError::TimeOrder { s, t });
    }
    let growth = coeffs.alpha(t, s)?.exp();
    Ok(apply_heat(f, t - s, growth))
}

/// Pure heat flow `e^{tΔ}` (no drift factor).
pub fn heat_flow(f: &SpectralField, t: f64) -> Result<SpectralField> {
    if t < 0.0 {
        return Err(LabError::TimeOrder { s: 0.0, t });
    }
    Ok(apply_heat(f, t, 1.0))
}

fn apply_heat(f: &SpectralField, tau: f64, growth: f64) -> SpectralField {
    let tables = f.grid.tables();
    let mut cache: HashMap<i64, f64> = HashMap::new();
    let coeffs = f
        .coeffs
        .iter()
        .zip(&tables.norm_sq)
        .map(|(c, &k2)| {
            let m = *cache
                .entry(k2)
                .or_insert_with(|| growth * (-4.0 * PI * PI * k2 as f64 * tau).exp());
            c * m
        })
        .collect();
    SpectralField { grid: f.grid, coeffs }
}

/// Zeroes every coefficient with `|ω|_∞ > n`.
pub fn spectral_truncate(f: &SpectralField, n: usize) -> SpectralField {
    let tables = f.grid.tables();
    let coeffs = f
        .coeffs
        .iter()
        .zip(&tables.linf)
        .map(|(c, &l)| if l > n as i64 { ZERO } else { *c })
        .collect();
    SpectralField { grid: f.grid, coeffs }
}

/// Point values of a spectral field on the padded `2N` grid.
pub fn to_padded(f: &SpectralField) -> Vec<f64> {
    let pg = f.grid.padded();
    let padded = f.grid.tables().pad(&f.coeffs, pg.len());
    pg.fft().inverse_real(&padded)
}

/// Two padded syntheses sharing one transform.
pub fn to_padded_pair(f: &SpectralField, g: &SpectralField) -> (Vec<f64>, Vec<f64>) {
    let pg = f.grid.padded();
    let t = f.grid.tables();
    let a = t.pad(&f.coeffs, pg.len());
    let b = t.pad(&g.coeffs, pg.len());
    pg.fft().inverse_real_pair(&a, &b)
}

/// Analyses padded point values and truncates back to the base band.
pub fn from_padded(grid: TorusGrid, values: &[f64]) -> SpectralField {
    let pg = grid.padded();
    let coeffs = pg.fft().forward_real(values);
    SpectralField { grid, coeffs: grid.tables().unpad(&coeffs) }
}

pub fn from_padded_pair(grid: TorusGrid, a: &[f64], b: &[f64]) -> (SpectralField, SpectralField) {
    let pg = grid.padded();
    let (fa, fb) = pg.fft().forward_real_pair(a, b);
    let t = grid.tables();
    (
        SpectralField { grid, coeffs: t.unpad(&fa) },
        SpectralField { grid, coeffs: t.unpad(&fb) },
    )
}

pub fn spectral_product(f: &SpectralField, g: &SpectralField) -> SpectralField {
    assert_eq!(f.grid, g.grid, "grid mismatch");
    let (a, b) = to_padded_pair(f, g);
    let prod: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    from_padded(f.grid, &prod)
}

pub fn spectral_product3(f: &SpectralField, g: &SpectralField, h: &SpectralField) -> SpectralField {
    assert!(f.grid == g.grid && g.grid == h.grid, "grid mismatch");
    let (a, b) = to_padded_pair(f, g);
    let c = to_padded(h);
    let prod: Vec<f64> = a.iter().zip(&b).zip(&c).map(|((x, y), z)| x * y * z).collect();
    from_padded(f.grid, &prod)
}

/// Product of two bandlimited fields on the `2N` grid, truncated to the base band.
pub fn dealiased_product(f: &RealField, g: &RealField) -> Result<RealField> {
    if f.grid != g.grid {
        return Err(LabError::GridMismatch("dealiased_product".into()));
    }
    Ok(spectral_product(&dft_forward(f), &dft_forward(g)).real())
}

/// Triple product computed in one pass on the `2N` grid.
pub fn dealiased_product3(f: &RealField, g: &RealField, h: &RealField) -> Result<RealField> {
    if f.grid != g.grid || g.grid != h.grid {
        return Err(LabError::GridMismatch("dealiased_product3".into()));
    }
    Ok(spectral_product3(&dft_forward(f), &dft_forward(g), &dft_forward(h)).real())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoefficientSet, TimePoly};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: TorusGrid, seed: u64) -> RealField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealField::new(grid, (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_bandlimited(grid: TorusGrid, band: i64, seed: u64) -> SpectralField {
        let f = dft_forward(&random_field(grid, seed));
        let t = grid.tables();
        let coeffs = f
            .coeffs
            .iter()
            .zip(&t.linf)
            .map(|(c, &l)| if l > band { ZERO } else { *c })
            .collect();
        SpectralField { grid, coeffs }
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(4, 8).is_err());
        assert!(TorusGrid::new(2, 6).is_err());
        assert!(TorusGrid::new(2, 2).is_err());
        let g = TorusGrid::new(3, 8).unwrap();
        assert_eq!(g.len(), 512);
        assert_eq!(g.freq_of_index(4), 4);
        assert_eq!(g.freq_of_index(5), -3);
    }

    #[test]
    fn constant_field_has_only_mean() {
        let g = TorusGrid::new(2, 8).unwrap();
        let f = dft_forward(&RealField::constant(g, 1.0));
        assert!((f.coeffs[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(f.coeffs[1..].iter().all(|c| c.norm() < 1e-15));
    }

    #[test]
    fn cosine_coefficients() {
        let g = TorusGrid::new(1, 8).unwrap();
        let f = RealField::from_fn(g, |x| (2.0 * PI * x[0]).cos());
        let fh = dft_forward(&f);
        for (i, c) in fh.coeffs.iter().enumerate() {
            let expect = if i == 1 || i == 7 { 0.5 } else { 0.0 };
            assert!((c - Complex64::new(expect, 0.0)).norm() < 1e-14, "index {i}");
        }
    }

    #[test]
    fn round_trip_3d() {
        let g = TorusGrid::new(3, 32).unwrap();
        let f = random_field(g, 3);
        let back = dft_inverse(&dft_forward(&f));
        let err = f.values.iter().zip(&back.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-12, "round trip error {err}");
        let fh = dft_forward(&f);
        assert!((fh.mean() - f.mean()).abs() < 1e-14);
        assert!(fh.hermitian_defect() < 1e-14);
    }

    #[test]
    fn heat_kernel_values() {
        let g = TorusGrid::new(1, 8).unwrap();
        let c = CoefficientSet::new(TimePoly::zero(), TimePoly::constant(-1.0), 2.0, true).unwrap();
        let mut f = SpectralField::zeros(g);
        f.coeffs[0] = Complex64::new(1.0, 0.0);
        f.coeffs[1] = Complex64::new(1.0, 0.0);
        let same = heat_propagate(&f, 0.3, 0.3, &c).unwrap();
        assert_eq!(same, f);
        let one = heat_propagate(&f, 0.0, 1.0, &c).unwrap();
        assert!((one.coeffs[0].re - (-1.0f64).exp()).abs() < 1e-15);
        let q = heat_propagate(&f, 0.5, 0.75, &c).unwrap();
        let expect = (-0.25f64).exp() * (-PI * PI).exp();
        assert!((q.coeffs[1].re - expect).abs() < 1e-15 * expect.max(1e-300) + 1e-18);
        assert!(heat_propagate(&f, 0.5, 0.4, &c).is_err());
    }

    #[test]
    fn product_of_cosines() {
        let g = TorusGrid::new(1, 8).unwrap();
        let f = RealField::from_fn(g, |x| (2.0 * PI * x[0]).cos());
        let p = dft_forward(&dealiased_product(&f, &f).unwrap());
        assert!((p.coeffs[0].re - 0.5).abs() < 1e-14);
        assert!((p.coeffs[2].re - 0.25).abs() < 1e-14);
        assert!((p.coeffs[6].re - 0.25).abs() < 1e-14);
    }

    #[test]
    fn product_with_one_is_identity() {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = random_field(g, 9);
        let p = dealiased_product(&f, &RealField::constant(g, 1.0)).unwrap();
        let err = f.values.iter().zip(&p.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-12);
    }

    fn brute_convolution(f: &SpectralField, g: &SpectralField) -> SpectralField {
        let grid = f.grid;
        let mut out = SpectralField::zeros(grid);
        for i in 0..grid.len() {
            if f.coeffs[i] == ZERO {
                continue;
            }
            let ki = grid.wavevector(i);
            for j in 0..grid.len() {
                if g.coeffs[j] == ZERO {
                    continue;
                }
                let kj = grid.wavevector(j);
                let s: Vec<i64> = (0..grid.dim()).map(|a| ki[a] + kj[a]).collect();
                if s.iter().all(|&x| x.abs() < (grid.n() / 2) as i64) {
                    out.coeffs[grid.flat_of_wavevector(&s)] += f.coeffs[i] * g.coeffs[j];
                }
            }
        }
        out
    }

    #[test]
    fn product_matches_brute_force_convolution() {
        for (dim, n) in [(1usize, 32usize), (2, 32), (3, 16)] {
            let g = TorusGrid::new(dim, n).unwrap();
            let band = (n / 2 - 1) as i64;
            let f = random_bandlimited(g, band, 1);
            let h = random_bandlimited(g, band, 2);
            let p = spectral_product(&f, &h);
            let b = brute_convolution(&f, &h);
            let t = g.tables();
            for k in 0..g.len() {
                if t.linf[k] <= band {
                    assert!((p.coeffs[k] - b.coeffs[k]).norm() < 1e-12, "dim {dim} mode {k}");
                }
            }
        }
    }

    #[test]
    fn triple_product_matches_iterated_convolution() {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = random_bandlimited(g, 3, 4);
        let h = random_bandlimited(g, 3, 5);
        let k = random_bandlimited(g, 3, 6);
        let p = spectral_product3(&f, &h, &k);
        let b = brute_convolution(&brute_convolution(&f, &h), &k);
        for i in 0..g.len() {
            if g.linf(i) < 8 {
                assert!((p.coeffs[i] - b.coeffs[i]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn truncation_cases() {
        let g = TorusGrid::new(3, 8).unwrap();
        let f = dft_forward(&random_field(g, 11));
        assert_eq!(spectral_truncate(&f, 4), f);
        let z = spectral_truncate(&f, 0);
        assert_eq!(z.coeffs[0], f.coeffs[0]);
        assert!(z.coeffs[1..].iter().all(|c| *c == ZERO));
        let t4 = spectral_truncate(&f, 2);
        for i in 0..g.len() {
            let expect = if g.linf(i) <= 2 { f.coeffs[i] } else { ZERO };
            assert_eq!(t4.coeffs[i], expect);
        }
        assert_eq!(spectral_truncate(&t4, 2), t4);
    }
}
