//! Quantization primitives: the soft-rounding family, Kumaraswamy noise,
//! hard rounding, and uniform parameter quantization.
//!
//! Soft rounding s_T interpolates between the identity (large T) and exact
//! rounding (T -> 0) while staying differentiable; its temperature-matched
//! shifted inverse undoes it around bin centers. Training adds centered
//! Kumaraswamy noise between the two so the rate term sees a smoothed
//! quantizer.

use crate::math;
use crate::tensor::{Elem, TensorOf};

/// s_T(z) = floor(z) + tanh(D/T) / (2 tanh(1/2T)) + 1/2 with
/// D = z - floor(z) - 1/2. Exact fixed points at integers and half-integers.
pub fn soft_round(z: f64, t: f64) -> f64 {
    debug_assert!(t > 0.0, "soft_round temperature must be positive");
    let fl = z.floor();
    let d = z - fl - 0.5;
    fl + math::tanh(d / t) / (2.0 * math::tanh(0.5 / t)) + 0.5
}

/// d/dz soft_round(z, T). Vanishes away from bin centers as T -> 0;
/// an infinite T degenerates to the identity slope (linear estimator).
pub fn soft_round_deriv(z: f64, t: f64) -> f64 {
    if t.is_infinite() {
        return 1.0;
    }
    let d = z - z.floor() - 0.5;
    let th = math::tanh(d / t);
    (1.0 - th * th) / (2.0 * t * math::tanh(0.5 / t))
}

/// True inverse of s_T on one bin: s_inv(s_T(z)) = z.
fn s_inv(v: f64, t: f64) -> f64 {
    let k = v.floor();
    let d = v - k - 0.5;
    let half_inv_t = 0.5 / t;
    let arg = (2.0 * d * math::tanh(half_inv_t)).clamp(-1.0, 1.0);
    let at = math::artanh(arg).clamp(-half_inv_t, half_inv_t);
    k + 0.5 + t * at
}

fn s_inv_deriv(v: f64, t: f64) -> f64 {
    let d = v - v.floor() - 0.5;
    let th = math::tanh(0.5 / t);
    let arg = (2.0 * d * th).clamp(-1.0, 1.0);
    // The denominator floor only engages when tanh(1/2T) rounds to 1 and the
    // input sits exactly on a bin edge; it caps an (legitimately) unbounded
    // slope instead of producing infinity.
    2.0 * t * th / (1.0 - arg * arg).max(1e-12)
}

/// Shifted inverse r_T(y) = s_inv(y - 1/2) + 1/2, the decoder-free
/// counterpart applied after noise injection.
pub fn soft_round_inverse(y: f64, t: f64) -> f64 {
    s_inv(y - 0.5, t) + 0.5
}

/// d/dy soft_round_inverse(y, T).
pub fn soft_round_inverse_deriv(y: f64, t: f64) -> f64 {
    s_inv_deriv(y - 0.5, t)
}

/// Noisy soft rounding: r_T(s_T(z) + (u - 1/2)) for noise u in [0, 1].
/// As T -> 0 this approaches round(z) for every u away from the endpoints.
pub fn softround_noise(z: f64, u: f64, t: f64) -> f64 {
    soft_round_inverse(soft_round(z, t) + (u - 0.5), t)
}

/// Shape parameter b that pins the Kumaraswamy mode at 1/2:
/// b = (2^a (a-1) + 1) / a. a = 1 gives b = 1 (uniform).
pub fn kumaraswamy_b(a: f64) -> f64 {
    debug_assert!(a >= 1.0, "Kumaraswamy shape a must be >= 1, got {a}");
    (math::pow(2.0, a) * (a - 1.0) + 1.0) / a
}

/// Inverse-CDF sample from the mode-1/2 Kumaraswamy family given a uniform
/// variate v in [0, 1): u = (1 - (1-v)^(1/b))^(1/a).
pub fn kumaraswamy_sample(v: f64, a: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&v), "uniform variate out of range");
    let b = kumaraswamy_b(a);
    let inner = 1.0 - math::pow(1.0 - v, 1.0 / b);
    math::pow(inner, 1.0 / a)
}

/// Density of the mode-1/2 Kumaraswamy family on [0, 1]:
/// p(u) = a b u^(a-1) (1 - u^a)^(b-1).
pub fn kumaraswamy_pdf(u: f64, a: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&u), "pdf argument out of range");
    let b = kumaraswamy_b(a);
    if a == 1.0 {
        return 1.0;
    }
    if u == 0.0 {
        return 0.0;
    }
    if u == 1.0 {
        // b > 1 for a > 1, so the density vanishes at the right edge.
        return 0.0;
    }
    a * b * math::pow(u, a - 1.0) * math::pow(1.0 - math::pow(u, a), b - 1.0)
}

/// Round half away from zero: 2.5 -> 3, -2.5 -> -3.
pub fn round_half_away(z: f64) -> f64 {
    (z.abs() + 0.5).floor().copysign(z)
}

/// Hard-round every latent to its integer (step-unit) value.
pub fn quantize_latents<T: Elem>(z: &TensorOf<T>) -> TensorOf<T> {
    let data: Vec<T> = z
        .data()
        .iter()
        .map(|&x| T::from_f64(round_half_away(x.to_f64())))
        .collect();
    TensorOf::from_vec(z.shape(), data)
}

/// Uniform quantization of a parameter tensor: integers round(p/step) plus
/// the dequantized tensor q*step actually used by the decoder.
pub fn quantize_params<T: Elem>(p: &TensorOf<T>, step: f64) -> (Vec<i64>, TensorOf<T>) {
    assert!(step > 0.0, "quantization step must be positive, got {step}");
    let q: Vec<i64> = p
        .data()
        .iter()
        .map(|&x| round_half_away(x.to_f64() / step) as i64)
        .collect();
    let deq: Vec<T> = q.iter().map(|&k| T::from_f64(k as f64 * step)).collect();
    (q, TensorOf::from_vec(p.shape(), deq))
}

/// log2 probability of the integer bin [z-1/2, z+1/2] under Laplace(mu, sigma).
pub fn laplace_bin_logp(z: f64, mu: f64, sigma: f64) -> f64 {
    crate::laplace::bin_log2_prob(z, mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from mpmath at 40 digits.

    #[test]
    fn soft_round_fixed_points_are_exact() {
        for t in [0.3, 0.1, 1e-4] {
            for k in [-3i64, -1, 0, 2, 17] {
                let kf = k as f64;
                assert_eq!(soft_round(kf, t), kf, "integer fixed point, t={t}");
                assert_eq!(
                    soft_round(kf + 0.5, t),
                    kf + 0.5,
                    "half-integer fixed point, t={t}"
                );
            }
        }
    }

    #[test]
    fn soft_round_matches_reference_values() {
        let cases = [
            (0.75, 0.1, 0.99335194332920985),
            (0.2, 0.3, 0.091028731276004227),
            (-1.63, 0.3, -1.7191488796997394),
        ];
        for (z, t, want) in cases {
            let got = soft_round(z, t);
            assert!(
                (got - want).abs() < 1e-13,
                "soft_round({z}, {t}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn soft_round_shift_equivariance() {
        for i in 0..100 {
            let z = -2.0 + 4.0 * (i as f64) / 99.0;
            let a = soft_round(z + 1.0, 0.17);
            let b = soft_round(z, 0.17) + 1.0;
            assert!((a - b).abs() < 1e-12, "shift equivariance broken at {z}");
        }
    }

    #[test]
    fn soft_round_monotone_within_bin() {
        for t in [0.3, 0.15, 0.05] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=1000 {
                let z = i as f64 / 1000.0;
                let s = soft_round(z, t);
                assert!(s >= prev, "not monotone at z={z}, t={t}");
                prev = s;
            }
        }
    }

    #[test]
    fn shifted_inverse_matches_its_definition() {
        // soft_round_inverse(s_T(z) + 1/2) = z + 1/2 since r is the inverse
        // shifted by a half.
        for t in [0.3, 0.1] {
            for i in 0..50 {
                let z = -1.4 + 2.9 * (i as f64) / 49.0;
                let y = soft_round(z, t) + 0.5;
                let back = soft_round_inverse(y, t);
                assert!(
                    (back - (z + 0.5)).abs() < 1e-10,
                    "inverse roundtrip failed at z={z}, t={t}: {back}"
                );
            }
        }
        // Frozen pair from the s_0.1(0.75) value.
        let got = soft_round_inverse(0.99335194332920985 + 0.5, 0.1);
        assert!((got - 1.25).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn softround_noise_matches_reference_values() {
        let cases = [
            (2.3, 0.5, 1e-4, 2.0),
            (2.7, 0.5, 1e-4, 3.0),
            (0.42, 0.75, 0.2, 0.73067349940196371),
            (-1.2, 0.9, 0.3, -0.80334491160914552),
        ];
        for (z, u, t, want) in cases {
            let got = softround_noise(z, u, t);
            assert!(
                (got - want).abs() < 1e-12,
                "softround_noise({z}, {u}, {t}) = {got}, want {want}"
            );
        }
    }

    #[test]
    fn softround_noise_approaches_hard_rounding() {
        // At T = 1e-4 the noisy soft round collapses to round(z) for any
        // noise not at the extreme endpoints.
        for i in 0..60 {
            let z = -2.9 + 5.7 * (i as f64) / 59.0;
            for u in [0.01, 0.2, 0.5, 0.8, 0.99] {
                let got = softround_noise(z, u, 1e-4);
                let want = round_half_away(z);
                assert!(
                    (got - want).abs() <= 1e-3,
                    "limit violated at z={z}, u={u}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn soft_round_derivs_match_reference() {
        let d1 = soft_round_deriv(0.8, 0.3);
        assert!((d1 - 0.75174526125341888).abs() < 1e-13, "got {d1}");
        let d2 = soft_round_inverse_deriv(0.8, 0.3);
        assert!((d2 - 0.64864172340371972).abs() < 1e-13, "got {d2}");
    }

    #[test]
    fn soft_round_derivs_match_finite_differences() {
        let h = 1e-7;
        for t in [0.3, 0.1] {
            for i in 1..40 {
                let z = -1.95 + (i as f64) * 0.1;
                let fd = (soft_round(z + h, t) - soft_round(z - h, t)) / (2.0 * h);
                let an = soft_round_deriv(z, t);
                assert!(
                    (an - fd).abs() < 1e-5 * fd.abs().max(1.0),
                    "soft_round' mismatch at z={z}, t={t}: {an} vs {fd}"
                );
                let fdi =
                    (soft_round_inverse(z + h, t) - soft_round_inverse(z - h, t)) / (2.0 * h);
                let ani = soft_round_inverse_deriv(z, t);
                assert!(
                    (ani - fdi).abs() < 2e-4 * fdi.abs().max(1.0),
                    "inverse' mismatch at y={z}, t={t}: {ani} vs {fdi}"
                );
            }
        }
    }

    #[test]
    fn kumaraswamy_b_endpoints() {
        assert_eq!(kumaraswamy_b(1.0), 1.0);
        assert!((kumaraswamy_b(2.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn kumaraswamy_sample_matches_reference() {
        let s = kumaraswamy_sample(0.5, 2.0);
        assert!((s - 0.49207897409338774).abs() < 1e-13, "got {s}");
        let s2 = kumaraswamy_sample(0.123, 1.37);
        assert!((s2 - 0.16938656291620415).abs() < 1e-13, "got {s2}");
        // a = 1 degenerates to the uniform itself.
        for v in [0.0, 0.123, 0.5, 0.987] {
            let u = kumaraswamy_sample(v, 1.0);
            assert!((u - v).abs() < 1e-14, "a=1 must be uniform: {v} -> {u}");
        }
    }

    #[test]
    fn kumaraswamy_pdf_matches_reference_and_normalizes() {
        let p = kumaraswamy_pdf(0.25, 2.0);
        assert!((p - 1.1346630897092042).abs() < 1e-13, "got {p}");
        let p2 = kumaraswamy_pdf(0.7, 1.5);
        assert!((p2 - 1.1806243009094711).abs() < 1e-13, "got {p2}");
        // Simpson quadrature as an independent normalization oracle.
        for a in [1.0, 1.37, 2.0] {
            let n = 20_000usize;
            let h = 1.0 / n as f64;
            let mut acc = kumaraswamy_pdf(0.0, a) + kumaraswamy_pdf(1.0, a);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * kumaraswamy_pdf(i as f64 * h, a);
            }
            let integral = acc * h / 3.0;
            assert!(
                (integral - 1.0).abs() < 1e-6,
                "pdf for a={a} integrates to {integral}"
            );
        }
    }

    #[test]
    fn kumaraswamy_mode_is_half() {
        for a in [1.2, 1.5, 2.0] {
            let peak = kumaraswamy_pdf(0.5, a);
            for i in 1..50 {
                let u = i as f64 / 50.0;
                assert!(
                    kumaraswamy_pdf(u, a) <= peak + 1e-12,
                    "density exceeds mode value at u={u}, a={a}"
                );
            }
        }
    }

    #[test]
    fn round_half_away_reference_cases() {
        let cases = [
            (2.5, 3.0),
            (-2.5, -3.0),
            (0.49, 0.0),
            (-0.49, 0.0),
            (1.5, 2.0),
            (-1.5, -2.0),
            (0.0, 0.0),
            (7.0, 7.0),
            (-3.2, -3.0),
        ];
        for (z, want) in cases {
            assert_eq!(round_half_away(z), want, "round_half_away({z})");
        }
    }

    #[test]
    fn quantize_params_roundtrip() {
        let p = crate::tensor::Tensor::from_vec(&[4], vec![0.013, -0.0049, 0.0, 0.1]);
        let (q, deq) = quantize_params(&p, 0.01);
        assert_eq!(q, vec![1, 0, 0, 10]);
        let d: Vec<f32> = deq.data().to_vec();
        assert_eq!(d, vec![0.01, 0.0, 0.0, 0.1]);
    }

    #[test]
    fn quantize_latents_rounds_every_entry() {
        let z = crate::tensor::Tensor::from_vec(&[5], vec![0.4, -0.5, 1.5, -2.6, 0.0]);
        let q = quantize_latents(&z);
        assert_eq!(q.data(), &[0.0, -1.0, 2.0, -3.0, 0.0]);
    }

    #[test]
    fn laplace_bin_logp_matches_worked_example() {
        let p = laplace_bin_logp(0.0, 0.0, 1.0);
        assert!((p - (-1.3456768717052028)).abs() < 1e-12, "got {p}");
    }
}
