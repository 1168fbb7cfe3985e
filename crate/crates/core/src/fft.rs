//! Multi-dimensional complex FFTs on cubic grids, built on `rustfft`.
//!
//! Layout is row-major with the last axis contiguous. The forward transform
//! carries the `1/len` factor so that coefficients are Fourier coefficients.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

const TILE: usize = 16;

pub struct FftNd {
    dim: usize,
    n: usize,
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftNd {
    pub fn new(dim: usize, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        FftNd {
            dim,
            n,
            len: n.pow(dim as u32),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// Shared plan for a `dim`-dimensional grid with `n` points per axis.
    pub fn cached(dim: usize, n: usize) -> Arc<FftNd> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<FftNd>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("fft cache poisoned");
        guard
            .entry((dim, n))
            .or_insert_with(|| Arc::new(FftNd::new(dim, n)))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Forward transform with `1/len` normalisation.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.forward);
        let s = 1.0 / self.len as f64;
        for z in buf.iter_mut() {
            *z *= s;
        }
    }

    /// Unnormalised inverse transform (synthesis from Fourier coefficients).
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.inverse);
    }

    /// Synthesises two real fields from two Hermitian spectra with one transform.
    pub fn inverse_real_pair(&self, a: &[Complex64], b: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| x + Complex64::i() * y)
            .collect();
        self.inverse(&mut buf);
        (buf.iter().map(|z| z.re).collect(), buf.iter().map(|z| z.im).collect())
    }

    pub fn inverse_real(&self, a: &[Complex64]) -> Vec<f64> {
        let mut buf = a.to_vec();
        self.inverse(&mut buf);
        buf.iter().map(|z| z.re).collect()
    }

    pub fn forward_real(&self, a: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Analyses two real fields with one transform.
    pub fn forward_real_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut buf: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.forward(&mut buf);
        let mut fa = vec![Complex64::new(0.0, 0.0); self.len];
        let mut fb = vec![Complex64::new(0.0, 0.0); self.len];
        self.for_each_negated(|idx, neg| {
            let h = buf[idx];
            let hm = buf[neg].conj();
            fa[idx] = (h + hm) * 0.5;
            fb[idx] = (h - hm) * Complex64::new(0.0, -0.5);
        });
        (fa, fb)
    }

    /// Calls `f(idx, negate(idx))` for every flat index, in order.
    pub fn for_each_negated(&self, mut f: impl FnMut(usize, usize)) {
        let n = self.n;
        let neg: Vec<usize> = (0..n).map(|i| (n - i) % n).collect();
        match self.dim {
            1 => (0..n).for_each(|i| f(i, neg[i])),
            2 => {
                for i0 in 0..n {
                    for i1 in 0..n {
                        f(i0 * n + i1, neg[i0] * n + neg[i1]);
                    }
                }
            }
            3 => {
                for i0 in 0..n {
                    for i1 in 0..n {
                        let (a, b) = ((i0 * n + i1) * n, (neg[i0] * n + neg[i1]) * n);
                        for i2 in 0..n {
                            f(a + i2, b + neg[i2]);
                        }
                    }
                }
            }
            d => panic!("unsupported dimension {d}"),
        }
    }

    /// Flat index of the frequency `-omega`.
    pub fn negate(&self, idx: usize) -> usize {
        let n = self.n;
        let mut rem = idx;
        let mut out = 0;
        let mut stride = 1;
        for _ in 0..self.dim {
            let i = rem % n;
            rem /= n;
            out += ((n - i) % n) * stride;
            stride *= n;
        }
        out
    }

    /// Inverse transform of a spectrum supported in `|ω|_∞ ≤ band`; lines that
    /// are identically zero are skipped.
    pub fn inverse_band(&self, buf: &mut [Complex64], band: usize) {
        self.transform_band(buf, &self.inverse, band);
    }

    fn transform(&self, buf: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        self.transform_band(buf, fft, self.n / 2);
    }

    fn transform_band(&self, buf: &mut [Complex64], fft: &Arc<dyn Fft<f64>>, band: usize) {
        assert_eq!(buf.len(), self.len, "buffer length does not match plan");
        let n = self.n;
        let inside = |i: usize| i <= band || i + band >= n;
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        match self.dim {
            1 => fft.process_with_scratch(buf, &mut scratch),
            2 => {
                for (i0, row) in buf.chunks_mut(n).enumerate() {
                    if inside(i0) {
                        fft.process_with_scratch(row, &mut scratch);
                    }
                }
                transpose_square(buf, n);
                fft.process_with_scratch(buf, &mut scratch);
                transpose_square(buf, n);
            }
            3 => {
                let plane = n * n;
                for (i0, slab) in buf.chunks_mut(plane).enumerate() {
                    if !inside(i0) {
                        continue;
                    }
                    for (i1, row) in slab.chunks_mut(n).enumerate() {
                        if inside(i1) {
                            fft.process_with_scratch(row, &mut scratch);
                        }
                    }
                    transpose_square(slab, n);
                    fft.process_with_scratch(slab, &mut scratch);
                    transpose_square(slab, n);
                }
                let mut tile = vec![Complex64::new(0.0, 0.0); TILE * n];
                let mut col = 0;
                while col < plane {
                    let w = TILE.min(plane - col);
                    for i0 in 0..n {
                        let row = &buf[i0 * plane + col..i0 * plane + col + w];
                        for (c, z) in row.iter().enumerate() {
                            tile[c * n + i0] = *z;
                        }
                    }
                    fft.process_with_scratch(&mut tile[..w * n], &mut scratch);
                    for i0 in 0..n {
                        let row = &mut buf[i0 * plane + col..i0 * plane + col + w];
                        for (c, z) in row.iter_mut().enumerate() {
                            *z = tile[c * n + i0];
                        }
                    }
                    col += w;
                }
            }
            d => panic!("unsupported dimension {d}"),
        }
    }
}

fn transpose_square(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}
