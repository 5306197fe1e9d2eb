//! Integrated Laplace bin probabilities, exact in log space.
//!
//! The rate model assigns a quantization bin [z-1/2, z+1/2] the mass
//! F(z+1/2) - F(z-1/2) under Laplace(mu, b). The three case splits below
//! avoid catastrophic cancellation for every (z, mu, b) the codec can
//! produce, including bins far out in the tails where the mass underflows:
//! the log stays finite there.

use crate::math;
use std::f64::consts::LOG2_E;

const LN_HALF: f64 = -0.69314718055994531;

/// Partial derivatives of the bin's bits (-log2 P) with respect to z, mu
/// and the scale b.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BinBits {
    pub dz: f64,
    pub dmu: f64,
    pub db: f64,
}

/// ln P(bin) and d(lnP)/dd, d(lnP)/db where d = z - mu.
#[inline]
fn ln_prob(d: f64, b: f64) -> (f64, f64, f64) {
    debug_assert!(b > 0.0, "Laplace scale must be positive, got {b}");
    if d <= -0.5 {
        // Bin entirely in the lower tail: P = (1/2) e^{(d+1/2)/b} (1 - e^{-1/b}).
        let e = math::exp(-1.0 / b);
        let lnp = LN_HALF + (d + 0.5) / b + math::ln1p(-e);
        let dldd = 1.0 / b;
        let dldb = -(d + 0.5) / (b * b) - e / (b * b * (1.0 - e));
        (lnp, dldd, dldb)
    } else if d >= 0.5 {
        let e = math::exp(-1.0 / b);
        let lnp = LN_HALF + (-d + 0.5) / b + math::ln1p(-e);
        let dldd = -1.0 / b;
        let dldb = (d - 0.5) / (b * b) - e / (b * b * (1.0 - e));
        (lnp, dldd, dldb)
    } else {
        // Bin straddles the mode: P = 1 - (E1 + E2)/2.
        let e1 = math::exp(-(0.5 + d) / b);
        let e2 = math::exp(-(0.5 - d) / b);
        let m = 0.5 * e1 + 0.5 * e2;
        let lnp = math::ln1p(-m);
        let p = 1.0 - m;
        let dldd = (e1 - e2) / (2.0 * b * p);
        let dldb = -0.5 * (e1 * (0.5 + d) + e2 * (0.5 - d)) / (b * b * p);
        (lnp, dldd, dldb)
    }
}

/// log2 of the bin mass. Valid at non-integer z as well.
pub fn bin_log2_prob(z: f64, mu: f64, b: f64) -> f64 {
    ln_prob(z - mu, b).0 * LOG2_E
}

/// Bin mass (linear domain).
pub fn bin_prob(z: f64, mu: f64, b: f64) -> f64 {
    math::exp(ln_prob(z - mu, b).0)
}

/// Partials of the bin's bits.
pub(crate) fn bin_bits_grad(z: f64, mu: f64, b: f64) -> BinBits {
    let (_, dldd, dldb) = ln_prob(z - mu, b);
    BinBits {
        dz: -dldd * LOG2_E,
        dmu: dldd * LOG2_E,
        db: -dldb * LOG2_E,
    }
}

/// Laplace CDF, used by the frequency-table builder.
pub fn cdf(x: f64, mu: f64, b: f64) -> f64 {
    let d = x - mu;
    if d <= 0.0 {
        0.5 * math::exp(d / b)
    } else {
        1.0 - 0.5 * math::exp(-d / b)
    }
}

/// -log2 of the mass a finite-alphabet coder assigns the integer symbol z
/// in [-a, a]: interior bins take the true bin mass, the two edge symbols
/// absorb their tails, and the charge is capped at 16 bits (the coder's
/// frequency floor).
pub fn coded_bits(z: f64, mu: f64, b: f64, a: f64) -> f64 {
    debug_assert!(z.abs() <= a && a >= 0.0);
    let bits = if a == 0.0 {
        0.0
    } else if z == a {
        -math::log2(1.0 - cdf(a - 0.5, mu, b))
    } else if z == -a {
        -math::log2(cdf(-a + 0.5, mu, b))
    } else {
        -bin_log2_prob(z, mu, b)
    };
    bits.min(16.0)
}
