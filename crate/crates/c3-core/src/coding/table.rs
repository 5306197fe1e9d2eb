//! Frequency tables for the range coder.
//!
//! A table quantizes a probability law over a finite alphabet to 16-bit
//! cumulative frequencies: every symbol keeps frequency >= 1 and the total
//! is exactly 2^16. [`laplace_table`] turns the entropy model's (mu, sigma)
//! into such a table with one frozen f64 expression order, so encoder and
//! decoder always derive identical tables from identical inputs.

use crate::error::{Error, Result};
use crate::{laplace, math};

/// Cumulative frequency total: 16-bit coder precision.
pub const TOTAL: u32 = 1 << 16;

/// Cumulative frequency table over symbols `0..n`.
#[derive(Debug, Clone)]
pub struct SymbolTable {
    cums: Vec<u32>,
}

impl SymbolTable {
    pub fn from_freqs(freqs: &[u32]) -> Self {
        assert!(!freqs.is_empty());
        let mut cums = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cums.push(0);
        for &f in freqs {
            assert!(f >= 1, "zero-frequency symbol");
            acc = acc.checked_add(f).expect("frequency overflow");
            cums.push(acc);
        }
        assert_eq!(acc, TOTAL, "frequencies must sum to 2^16");
        SymbolTable { cums }
    }

    pub fn len(&self) -> usize {
        self.cums.len() - 1
    }

    /// (cumulative, frequency) span of one symbol.
    pub fn span(&self, sym: usize) -> (u32, u32) {
        (self.cums[sym], self.cums[sym + 1] - self.cums[sym])
    }

    /// Largest symbol whose cumulative start is <= `dv`.
    pub fn find(&self, dv: u32) -> usize {
        debug_assert!(dv < TOTAL);
        self.cums.partition_point(|&c| c <= dv) - 1
    }

    /// Coded cost of one symbol in bits.
    pub fn bits(&self, sym: usize) -> f64 {
        let (_, freq) = self.span(sym);
        -(freq as f64 / TOTAL as f64).log2()
    }
}

/// Integrated Laplace(mu, sigma) over the integer alphabet [-a_max, a_max].
///
/// Interior bins take the mass of [k-1/2, k+1/2]; the two edge bins absorb
/// their whole tails, matching the unbounded-support probabilities the rate
/// estimator charges. Frequencies are floor(p * 2^16) clamped to >= 1, and
/// the residual (either sign) lands on the first largest bin. The CDF is
/// evaluated once per bin edge; everything stays in f64 with a fixed
/// evaluation order so both ends of the channel build the same table.
pub fn laplace_table(mu: f64, sigma: f64, a_max: i64) -> Result<SymbolTable> {
    debug_assert!(sigma > 0.0 && a_max >= 0);
    let n = (2 * a_max + 1) as usize;
    if n as u32 > TOTAL {
        return Err(Error::invalid(format!(
            "alphabet [-{a_max}, {a_max}] too large for 16-bit frequencies"
        )));
    }
    if a_max == 0 {
        return Ok(SymbolTable::from_freqs(&[TOTAL]));
    }
    let mut freqs = vec![0i64; n];
    let mut lower = 0.0f64;
    for (i, f) in freqs.iter_mut().enumerate() {
        let k = i as i64 - a_max;
        let p = if k == a_max {
            1.0 - lower
        } else {
            let upper = laplace::cdf(k as f64 + 0.5, mu, sigma);
            let p = if k == -a_max { upper } else { upper - lower };
            lower = upper;
            p
        };
        *f = ((p * TOTAL as f64).floor() as i64).max(1);
    }
    // Renormalization residual: a surplus goes to the first largest bin; a
    // deficit (floor-1 clamps can overshoot on wide alphabets) is taken from
    // the largest bins first, never below 1. Always feasible since the
    // alphabet fits in the 16-bit total.
    let diff = TOTAL as i64 - freqs.iter().sum::<i64>();
    if diff >= 0 {
        let top = freqs.iter().copied().max().unwrap();
        let i = freqs.iter().position(|&f| f == top).unwrap();
        freqs[i] += diff;
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by_key(|&i| (std::cmp::Reverse(freqs[i]), i));
        let mut need = -diff;
        for i in order {
            let take = need.min(freqs[i] - 1);
            freqs[i] -= take;
            need -= take;
            if need == 0 {
                break;
            }
        }
        debug_assert_eq!(need, 0);
    }
    let f32s: Vec<u32> = freqs.iter().map(|&f| f as u32).collect();
    Ok(SymbolTable::from_freqs(&f32s))
}

const SCALE_GRID_LEN: usize = 1024;
const SCALE_LO: f64 = 1e-6;
const SCALE_HI: f64 = 1e2;

/// Log-spaced parameter-coding scale grid value at `idx` (0..1024).
pub fn scale_for_index(idx: usize) -> f64 {
    debug_assert!(idx < SCALE_GRID_LEN);
    let ln_lo = math::ln(SCALE_LO);
    let step = (math::ln(SCALE_HI) - ln_lo) / (SCALE_GRID_LEN - 1) as f64;
    math::exp(ln_lo + idx as f64 * step)
}

/// Nearest grid index (in log distance) for an empirical scale.
pub fn quantize_scale(b: f64) -> usize {
    let ln_lo = math::ln(SCALE_LO);
    let step = (math::ln(SCALE_HI) - ln_lo) / (SCALE_GRID_LEN - 1) as f64;
    let idx = (math::ln(b.max(SCALE_LO)) - ln_lo) / step;
    (idx + 0.5).floor().clamp(0.0, (SCALE_GRID_LEN - 1) as f64) as usize
}
