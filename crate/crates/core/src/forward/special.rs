//! Scaled complementary error function and log-domain Gaussian box integrals.

use std::f64::consts::PI;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Above this argument `erfc` is replaced by a continued fraction.
const CONTINUED_FRACTION_THRESHOLD: f64 = 10.0;

/// `exp(z^2) * erfc(z)` without overflow.
///
/// For moderate arguments the product is formed from `erfc` with the
/// rounding error of `z^2` carried separately; for large arguments the
/// Laplace continued fraction is evaluated with the modified Lentz method.
pub fn erfcx(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z < 0.0 {
        // erfc(-z) = 2 - erfc(z)
        let z2 = z * z;
        return 2.0 * z2.exp() - erfcx(-z);
    }
    if z < CONTINUED_FRACTION_THRESHOLD {
        let hi = z * z;
        let lo = z.mul_add(z, -hi);
        hi.exp() * (1.0 + lo) * libm::erfc(z)
    } else {
        FRAC_1_SQRT_PI * continued_fraction(z)
    }
}

/// `1 / (z + (1/2) / (z + 1 / (z + (3/2) / (z + ...))))`
fn continued_fraction(z: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = z;
    let mut c = z;
    let mut d = 0.0;
    for n in 1..500 {
        let a = 0.5 * n as f64;
        d = z + a * d;
        if d == 0.0 {
            d = TINY;
        }
        c = z + a / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    1.0 / f
}

/// `ln(erf(hi) - erf(lo))` for `lo < hi`, accurate deep in either tail.
pub fn ln_erf_diff(lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    if lo >= 0.0 {
        // erfc(lo) - erfc(hi) = e^{-lo^2} (erfcx(lo) - e^{lo^2 - hi^2} erfcx(hi))
        let ratio = ((lo - hi) * (lo + hi)).exp();
        let inner = erfcx(lo) - ratio * erfcx(hi);
        if inner <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -lo * lo + inner.ln()
    } else if hi <= 0.0 {
        ln_erf_diff(-hi, -lo)
    } else {
        (libm::erf(hi) + libm::erf(-lo)).ln()
    }
}

/// Logarithm of `∫_a^b exp(-p (x - x_d)^2 - q (x - x_s)^2) dx` for `p, q > 0`.
pub fn ln_gaussian_product_integral(p: f64, q: f64, xd: f64, xs: f64, a: f64, b: f64) -> f64 {
    let w = p + q;
    let m = (p * xd + q * xs) / w;
    let sep = xd - xs;
    let cross = p * q / w * sep * sep;
    let sw = w.sqrt();
    -cross + (0.5 * (PI / w).sqrt()).ln() + ln_erf_diff(sw * (a - m), sw * (b - m))
}
