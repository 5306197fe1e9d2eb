//! Deterministic scalar math kernels.
//!
//! Decoding must be bit-identical across platforms, and Rust's float
//! transcendentals route to the platform libm, which is not. Every
//! transcendental used on a coded path therefore lives here as a hand-written
//! f64 implementation: range reduction plus fixed-order polynomial cores.
//! The erf pieces were fitted offline with `tools/gen_detmath_coeffs.py`
//! (mpmath, 60-digit arithmetic); fit errors are recorded next to each table.
//!
//! `sqrt`, `floor`, `round`, `abs`, `copysign` and ordinary arithmetic are
//! IEEE-754-exact in hardware and used from std directly.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_2_PI, LOG2_E, LOG10_E};

/// ln(2) split so that `k * LN2_HI` is exact for |k| < 2^20.
const LN2_HI: f64 = 0.69314718036912382;
const LN2_LO: f64 = 1.9082149292705878e-10;

/// pi/2 split the same way.
const PIO2_HI: f64 = 1.5707963267341256;
const PIO2_LO: f64 = 6.0771005065061926e-11;

/// 1/sqrt(2*pi).
pub const FRAC_1_SQRT_2PI: f64 = 0.39894228040143268;

/// Horner evaluation, coefficients highest-degree first. The fold order is
/// part of the determinism contract; never reassociate.
#[inline(always)]
fn horner(u: f64, c: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for &k in c {
        acc = acc * u + k;
    }
    acc
}

/// e^r for |r| <= ln(2)/2, Taylor to degree 13 (tail < 5e-18 relative).
const EXP_C: [f64; 14] = [
    1.0 / 6227020800.0,
    1.0 / 479001600.0,
    1.0 / 39916800.0,
    1.0 / 3628800.0,
    1.0 / 362880.0,
    1.0 / 40320.0,
    1.0 / 5040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    1.0 / 2.0,
    1.0,
    1.0,
];

/// (e^x - 1)/x for |x| <= ln(2)/2: coefficients 1/(n+1)!.
const EXPM1_C: [f64; 13] = [
    1.0 / 6227020800.0,
    1.0 / 479001600.0,
    1.0 / 39916800.0,
    1.0 / 3628800.0,
    1.0 / 362880.0,
    1.0 / 40320.0,
    1.0 / 5040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    1.0 / 2.0,
    1.0,
];

/// 2*artanh(s)/s as a polynomial in s^2, |s| <= 0.1716 (tail < 3e-19).
const LN_C: [f64; 11] = [
    2.0 / 21.0,
    2.0 / 19.0,
    2.0 / 17.0,
    2.0 / 15.0,
    2.0 / 13.0,
    2.0 / 11.0,
    2.0 / 9.0,
    2.0 / 7.0,
    2.0 / 5.0,
    2.0 / 3.0,
    2.0,
];

/// cos(r) for |r| <= pi/4: coefficients (-1)^n/(2n)! in r^2.
const COS_C: [f64; 11] = [
    1.0 / 2432902008176640000.0,
    -1.0 / 6402373705728000.0,
    1.0 / 20922789888000.0,
    -1.0 / 87178291200.0,
    1.0 / 479001600.0,
    -1.0 / 3628800.0,
    1.0 / 40320.0,
    -1.0 / 720.0,
    1.0 / 24.0,
    -1.0 / 2.0,
    1.0,
];

/// sin(r)/r for |r| <= pi/4: coefficients (-1)^n/(2n+1)! in r^2.
const SIN_C: [f64; 11] = [
    1.0 / 51090942171709440000.0,
    -1.0 / 121645100408832000.0,
    1.0 / 355687428096000.0,
    -1.0 / 1307674368000.0,
    1.0 / 6227020800.0,
    -1.0 / 39916800.0,
    1.0 / 362880.0,
    -1.0 / 5040.0,
    1.0 / 120.0,
    -1.0 / 6.0,
    1.0,
];

// erf tables from tools/gen_detmath_coeffs.py, variable mapped to [-1,1],
// highest degree first.

// erf(x)/x in t = x^2 on [0,1]; max fit error 2.2e-21.
const ERF_P0: [f64; 14] = [
    -5.1647287894230198e-16,
    1.4548169783352386e-14,
    -3.7910973708931528e-13,
    9.1676067489981638e-12,
    -2.0352493866103599e-10,
    4.1158005976616647e-9,
    -7.5115691607106235e-8,
    1.2233827383524027e-6,
    -1.7537169441492005e-5,
    0.00021751715604160107,
    -0.0022854855611440673,
    0.019852496688983707,
    -0.14053608902271712,
    0.96546873866986731,
];

// erf(x) on [1,2]; max fit error 5.7e-23.
const ERF_P1: [f64; 22] = [
    -2.0979764723340723e-15,
    2.8030029380125193e-15,
    9.4617566783665173e-14,
    -3.9881870394868011e-13,
    -2.5636339249797713e-12,
    2.3385133874916543e-11,
    1.8170970582024036e-11,
    -8.6013299219847570e-10,
    2.1918071167591609e-9,
    1.8967290916207549e-8,
    -1.2424237969683660e-7,
    -9.0736610049404293e-8,
    3.3394913117142644e-6,
    -9.2292094559561132e-6,
    -3.7055103134225077e-5,
    0.00030197143748186536,
    -0.00046457144227980206,
    -0.0027874286536788130,
    0.017344000511779283,
    -0.044598858458861014,
    0.059465144611814686,
    0.96610514647531073,
];

// erfc(x)*exp(x^2) on [2,6]; max fit error 5.3e-18. erf is reconstructed as
// 1 - exp(-x^2)*Q(x), so the absolute error scales with erfc itself.
const ERF_Q2: [f64; 24] = [
    -9.2200118051480054e-11,
    2.7974119179024156e-10,
    -2.8716509123715203e-10,
    8.2054039790360214e-10,
    -3.7641540074665457e-9,
    1.0824531561065030e-8,
    -2.8586397069465238e-8,
    7.9843555038103272e-8,
    -2.2228881573046239e-7,
    6.0569179582904003e-7,
    -1.6270404669103896e-6,
    4.3132558268762839e-6,
    -1.1270914791676502e-5,
    2.9011995906441519e-5,
    -7.3521375743789669e-5,
    0.00018330768136819641,
    -0.00044932693147525612,
    0.0010819615534120512,
    -0.0025570841697618859,
    0.0059256395038797596,
    -0.013449456613969250,
    0.029861732979903316,
    -0.064767012190042908,
    0.13699945762506139,
];

/// v * 2^k for results that stay normal.
#[inline]
fn scale_by_pow2(v: f64, k: i32) -> f64 {
    let bits = v.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i64 + k as i64;
    debug_assert!(e > 0 && e < 0x7ff, "scale_by_pow2 left the normal range");
    f64::from_bits((bits & 0x800f_ffff_ffff_ffff) | ((e as u64) << 52))
}

/// (mantissa in [0.5, 1), exponent) with x = m * 2^e. Requires x > 0 finite.
#[inline]
fn frexp(x: f64) -> (f64, i32) {
    let mut bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i32;
    if e == 0 {
        // Subnormal input: renormalize by 2^54 first.
        bits = (x * 18014398509481984.0).to_bits();
        e = ((bits >> 52) & 0x7ff) as i32 - 54;
    }
    let m = f64::from_bits((bits & 0x800f_ffff_ffff_ffff) | (1022u64 << 52));
    (m, e - 1022)
}

/// e^x. Flushes to 0 below -708 (skips the subnormal sliver) and to
/// infinity above 709.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.0 {
        return f64::INFINITY;
    }
    if x < -708.0 {
        return 0.0;
    }
    let k = (x * LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    scale_by_pow2(horner(r, &EXP_C), k as i32)
}

/// e^x - 1, accurate through x = 0.
pub fn expm1(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.abs() <= 0.34657359027997264 {
        x * horner(x, &EXPM1_C)
    } else {
        exp(x) - 1.0
    }
}

/// Natural log. ln(0) = -inf, ln(x<0) = NaN.
pub fn ln(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    let (mut m, mut e) = frexp(x);
    if m < FRAC_1_SQRT_2 {
        m *= 2.0;
        e -= 1;
    }
    let s = (m - 1.0) / (m + 1.0);
    let p = s * horner(s * s, &LN_C);
    let ef = e as f64;
    ef * LN2_HI + (p + ef * LN2_LO)
}

/// ln(1 + x), accurate through x = 0.
pub fn ln1p(x: f64) -> f64 {
    if x.is_nan() || x < -1.0 {
        return f64::NAN;
    }
    if x == -1.0 {
        return f64::NEG_INFINITY;
    }
    if x.abs() <= 0.25 {
        let s = x / (2.0 + x);
        s * horner(s * s, &LN_C)
    } else {
        ln(1.0 + x)
    }
}

/// Base-2 log.
pub fn log2(x: f64) -> f64 {
    ln(x) * LOG2_E
}

/// Base-10 log.
pub fn log10(x: f64) -> f64 {
    ln(x) * LOG10_E
}

/// Square root. IEEE 754 requires correct rounding here, so the hardware
/// instruction is already deterministic across platforms.
pub fn sqrt(x: f64) -> f64 {
    x.sqrt()
}

/// Hyperbolic tangent via expm1 (no cancellation anywhere on the axis).
pub fn tanh(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax >= 20.0 {
        return 1.0f64.copysign(x);
    }
    let t = expm1(-2.0 * ax);
    (-t / (t + 2.0)).copysign(x)
}

/// Inverse hyperbolic tangent; +-1 map to +-inf, |x| > 1 to NaN.
pub fn artanh(x: f64) -> f64 {
    0.5 * (ln1p(x) - ln1p(-x))
}

/// x^y for x > 0 (y = 0 returns 1, x = 0 returns 0 for the y > 0 uses here).
pub fn pow(x: f64, y: f64) -> f64 {
    if y == 0.0 {
        return 1.0;
    }
    if x == 0.0 {
        return 0.0;
    }
    debug_assert!(x > 0.0, "pow requires a positive base, got {x}");
    exp(y * ln(x))
}

fn cos_poly(r: f64) -> f64 {
    horner(r * r, &COS_C)
}

fn sin_poly(r: f64) -> f64 {
    r * horner(r * r, &SIN_C)
}

/// Cosine. Intended for schedule arguments (|x| up to a few thousand); the
/// two-word pi/2 reduction is exact enough there.
pub fn cos(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let k = (x * FRAC_2_PI).round();
    let r = (x - k * PIO2_HI) - k * PIO2_LO;
    match ((k as i64 % 4) + 4) % 4 {
        0 => cos_poly(r),
        1 => -sin_poly(r),
        2 => -cos_poly(r),
        _ => sin_poly(r),
    }
}

/// Error function, exactly odd, |erf| <= 1.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax <= 1.0 {
        let u = 2.0 * (x * x) - 1.0;
        x * horner(u, &ERF_P0)
    } else if ax <= 2.0 {
        horner(2.0 * ax - 3.0, &ERF_P1).copysign(x)
    } else if ax < 6.0 {
        let u = (ax - 4.0) / 2.0;
        (1.0 - exp(-ax * ax) * horner(u, &ERF_Q2)).copysign(x)
    } else {
        1.0f64.copysign(x)
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// GELU(x) = x * Phi(x).
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// d/dx GELU(x) = Phi(x) + x * phi(x).
pub fn gelu_deriv(x: f64) -> f64 {
    norm_cdf(x) + x * FRAC_1_SQRT_2PI * exp(-0.5 * x * x)
}
