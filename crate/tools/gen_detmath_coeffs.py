#!/usr/bin/env python3
"""Generate polynomial coefficients for the deterministic f64 math kernels.

The decoder must produce bit-identical results on every platform, so the hot
scalar functions avoid the platform libm entirely. erf() is approximated by
piecewise polynomials; this script fits them with mpmath at 60-digit precision,
reports the max fit error on a dense grid, and prints Rust const arrays
(coefficients in the mapped variable u in [-1,1], highest degree first, ready
for Horner evaluation).

Run: python3 tools/gen_detmath_coeffs.py
"""

import mpmath as mp

mp.mp.dps = 60


def fit_segment(f, lo, hi, deg):
    """Chebyshev-node least-max fit of f on [lo,hi] in u-space; returns (coeffs, err)."""
    g = lambda u: f(lo + (hi - lo) * (u + 1) / 2)
    coeffs, err = mp.chebyfit(g, [-1, 1], deg, error=True)
    return coeffs, err


def check(f, lo, hi, coeffs):
    """Max abs error of the fitted polynomial evaluated in f64-like precision."""
    worst = mp.mpf(0)
    n = 2001
    for i in range(n):
        x = lo + (hi - lo) * mp.mpf(i) / (n - 1)
        u = 2 * (x - lo) / (hi - lo) - 1
        acc = mp.mpf(0)
        for c in coeffs:
            acc = acc * u + c
        worst = max(worst, abs(acc - f(x)))
    return worst


def emit(name, coeffs, err, checked):
    print(f"// max fit error {mp.nstr(err, 3)} (grid check {mp.nstr(checked, 3)})")
    print(f"const {name}: [f64; {len(coeffs)}] = [")
    for c in coeffs:
        print(f"    {mp.nstr(c, 17, strip_zeros=False)},")
    print("];")
    print()


def main():
    # erf(x)/x as a function of t = x^2 on [0,1]; evaluated as x * P(x^2).
    # Keeps erf exactly odd and fully accurate through zero.
    f0 = lambda t: mp.erf(mp.sqrt(t)) / mp.sqrt(t) if t > 0 else 2 / mp.sqrt(mp.pi)
    c0, e0 = fit_segment(f0, mp.mpf(0), mp.mpf(1), 14)
    emit("ERF_P0", c0, e0, check(f0, mp.mpf("1e-30"), mp.mpf(1), c0))

    c1, e1 = fit_segment(mp.erf, mp.mpf(1), mp.mpf(2), 22)
    emit("ERF_P1", c1, e1, check(mp.erf, mp.mpf(1), mp.mpf(2), c1))

    # [2,6]: erfc(x)*exp(x^2) is smooth and O(1/x); evaluating
    # erf = 1 - exp(-x^2) * Q(x) keeps absolute error ~erfc * fit_error.
    q = lambda x: mp.erfc(x) * mp.exp(x * x)
    c2, e2 = fit_segment(q, mp.mpf(2), mp.mpf(6), 24)
    emit("ERF_Q2", c2, e2, check(q, mp.mpf(2), mp.mpf(6), c2))

    print("// 2/sqrt(pi), ln2 hi/lo split, pi/2 hi/lo split, ln(10)")
    print(f"TWO_OVER_SQRT_PI = {mp.nstr(2 / mp.sqrt(mp.pi), 17)}")
    ln2 = mp.log(2)
    ln2_hi = mp.mpf(mp.nstr(ln2, 17))  # placeholder; real split below
    print(f"LN2 = {mp.nstr(ln2, 17)}")
    # hi/lo split: hi = ln2 rounded to 32 significant bits, lo = ln2 - hi
    hi = mp.mpf(int(ln2 * 2**32)) / 2**32
    print(f"LN2_HI = {mp.nstr(hi, 17)}")
    print(f"LN2_LO = {mp.nstr(ln2 - hi, 17)}")
    pio2 = mp.pi / 2
    phi = mp.mpf(int(pio2 * 2**32)) / 2**32
    print(f"PIO2_HI = {mp.nstr(phi, 17)}")
    print(f"PIO2_LO = {mp.nstr(pio2 - phi, 17)}")
    print(f"LN10 = {mp.nstr(mp.log(10), 17)}")
    print(f"LOG2E = {mp.nstr(1 / ln2, 17)}")


if __name__ == "__main__":
    main()
