//! Gauss–Legendre quadrature, including the exponential kernel integrals
//! that give exact per-mode variances of the stochastic convolution.

use crate::coefficients::CoefficientSet;

const GL_NODES: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_8,
    0.755_404_408_355_003,
    0.865_631_202_387_831_7,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL_WEIGHTS: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_78,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_09,
];

/// 16-point Gauss–Legendre rule on `[a, b]`.
pub fn gauss16(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for (x, w) in GL_NODES.iter().zip(&GL_WEIGHTS) {
        s += w * (f(m - h * x) + f(m + h * x));
    }
    s * h
}

/// Adaptive Gauss–Legendre integration to an absolute tolerance.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let left = gauss16(f, a, m);
        let right = gauss16(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= tol.max(1e-15 * (left + right).abs()) {
            return left + right;
        }
        rec(f, a, m, left, 0.5 * tol, depth - 1) + rec(f, m, b, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    rec(&f, a, b, gauss16(&f, a, b), tol, 30)
}

/// `∫_{t0}^{t1} e^{2α(t1,s)} e^{−2λ(t1−s)} ds`, with λ = 4π²|ω|².
///
/// Closed form for constant `a`; otherwise Gauss–Legendre panels whose widths
/// grow geometrically away from `s = t1`, where the integrand concentrates.
pub fn ou_variance(c: &CoefficientSet, lambda: f64, t0: f64, t1: f64) -> f64 {
    let h = t1 - t0;
    if h <= 0.0 {
        return 0.0;
    }
    if c.a.is_constant() {
        let kappa = 2.0 * (lambda - c.a.eval(0.0));
        let x = kappa * h;
        return if x.abs() < 1e-12 { h * (1.0 - 0.5 * x) } else { -(-x).exp_m1() / kappa };
    }
    let f = |u: f64| (2.0 * c.alpha_unchecked(t1, t1 - u) - 2.0 * lambda * u).exp();
    let (amin, amax) = c.a.extrema(0.0, c.horizon);
    let rate = 2.0 * lambda + 2.0 * amin.abs().max(amax.abs()) + 1.0;
    let mut lo = 0.0;
    let mut width = (1.0 / rate).min(h);
    let mut total = 0.0;
    while lo < h {
        let hi = (lo + width).min(h);
        total += gauss16(&f, lo, hi);
        lo = hi;
        width *= 2.0;
    }
    total
}
