//! Finite-difference verification of every differentiable op on the tape.
//!
//! All graphs here use f64 storage so the central-difference oracle is
//! limited by truncation error, not storage rounding; the production f32
//! pipeline shares the identical code paths.

mod common;

use std::sync::Arc;

use c3_core::tensor::{causal_mask_2d, causal_mask_3d, Graph, TensorOf, Var};
use common::{check_gradients, TestRng};

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn sum_loss(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> Box<Build> {
    Box::new(move |g, vars| {
        let y = build(g, vars);
        g.sum(y)
    })
}

#[test]
fn grad_elementwise_binary_ops() {
    let mut rng = TestRng::new(11);
    let a = rng.vec(12, -2.0, 2.0);
    let b = rng.vec(12, -2.0, 2.0);
    let inputs = vec![(vec![3, 4], a), (vec![3, 4], b)];
    check_gradients(&inputs, &sum_loss(|g, v| g.add(v[0], v[1])), 1e-4, "add");
    check_gradients(&inputs, &sum_loss(|g, v| g.sub(v[0], v[1])), 1e-4, "sub");
    check_gradients(&inputs, &sum_loss(|g, v| g.mul(v[0], v[1])), 1e-4, "mul");
    check_gradients(
        &inputs,
        &|g: &mut Graph<f64>, v: &[Var]| g.mse(v[0], v[1]),
        1e-4,
        "mse",
    );
}

#[test]
fn grad_scale_and_shift() {
    let mut rng = TestRng::new(12);
    let inputs = vec![(vec![7], rng.vec(7, -3.0, 3.0))];
    check_gradients(&inputs, &sum_loss(|g, v| g.scale(v[0], -1.7)), 1e-4, "scale");
    check_gradients(
        &inputs,
        &sum_loss(|g, v| g.add_scalar(v[0], 0.35)),
        1e-4,
        "add_scalar",
    );
}

#[test]
fn grad_unary_activations() {
    let mut rng = TestRng::new(13);
    let inputs = vec![(vec![9], rng.vec(9, -2.5, 2.5))];
    check_gradients(&inputs, &sum_loss(|g, v| g.gelu(v[0])), 1e-4, "gelu");
    check_gradients(&inputs, &sum_loss(|g, v| g.exp(v[0])), 1e-4, "exp");
    // Keep ReLU and clamp test points away from their kinks.
    let pts = vec![-2.1, -1.3, -0.4, 0.3, 0.9, 1.7, 2.2];
    let inputs = vec![(vec![7], pts)];
    check_gradients(&inputs, &sum_loss(|g, v| g.relu(v[0])), 1e-4, "relu");
    check_gradients(
        &inputs,
        &sum_loss(|g, v| g.clamp(v[0], -1.0, 1.5)),
        1e-4,
        "clamp",
    );
}

#[test]
fn clamp_ste_passes_gradient_even_when_saturated() {
    let pts = [-3.0, -1.0, 0.2, 1.5, 4.0];
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(TensorOf::from_f64_slice(&[5], &pts), true);
    let y = g.clamp_ste(x, -1.0, 1.5);
    assert_eq!(g.value(y).data(), &[-1.0, -1.0, 0.2, 1.5, 1.5]);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert_eq!(grads.get(x).unwrap(), &[1.0; 5]);
}

#[test]
fn grad_soft_round_family() {
    // Points away from bin edges (fd steps must not cross a floor boundary).
    let zs = vec![-1.62, -0.87, -0.31, 0.22, 0.68, 1.13, 1.76];
    for t in [0.3, 0.12] {
        let inputs = vec![(vec![7], zs.clone())];
        check_gradients(
            &inputs,
            &sum_loss(move |g, v| g.soft_round(v[0], t)),
            1e-4,
            "soft_round",
        );
        check_gradients(
            &inputs,
            &sum_loss(move |g, v| g.soft_round_inverse(v[0], t)),
            2e-4,
            "soft_round_inverse",
        );
        // Full noisy-quantizer composition with fixed centered noise.
        check_gradients(
            &inputs,
            &sum_loss(move |g, v| {
                let noise =
                    g.constant(TensorOf::from_f64_slice(&[7], &[0.1, -0.2, 0.3, 0.0, -0.4, 0.25, 0.05]));
                g.softround_noise(v[0], noise, t)
            }),
            2e-4,
            "softround_noise",
        );
    }
}

#[test]
fn round_ste_backward_is_soft_round_slope() {
    // Forward is a step function, so finite differences are useless; the
    // contract is: gradient equals s'_T at the input, T = 1e-4.
    let t = 1e-4;
    let zs = [-1.5001, -0.75, 0.0, 0.2499, 0.9999, 2.0];
    let mut g: Graph<f64> = Graph::new();
    let z = g.leaf(TensorOf::from_f64_slice(&[6], &zs), true);
    let y = g.round_ste(z, t);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    let got = grads.get(z).unwrap();
    for (j, &zv) in zs.iter().enumerate() {
        let want = c3_core::quant::soft_round_deriv(zv, t);
        assert!(
            (got[j] - want).abs() <= 1e-12 * want.abs().max(1.0),
            "round_ste grad at {zv}: {} vs {want}",
            got[j]
        );
    }
    // Forward must be hard rounding (half away from zero).
    let vals = g.value(y).data();
    assert_eq!(vals, &[-2.0, -1.0, 0.0, 0.0, 1.0, 2.0]);
}

#[test]
fn grad_conv_1x1() {
    let mut rng = TestRng::new(21);
    let inputs = vec![
        (vec![3, 4, 5], rng.vec(60, -1.0, 1.0)),
        (vec![2, 3, 1, 1], rng.vec(6, -1.0, 1.0)),
        (vec![2], rng.vec(2, -0.5, 0.5)),
    ];
    check_gradients(
        &inputs,
        &sum_loss(|g, v| {
            let y = g.conv(v[0], v[1], v[2]);
            g.gelu(y)
        }),
        1e-4,
        "conv 1x1",
    );
}

#[test]
fn grad_conv_3x3() {
    let mut rng = TestRng::new(22);
    let inputs = vec![
        (vec![2, 5, 4], rng.vec(40, -1.0, 1.0)),
        (vec![2, 2, 3, 3], rng.vec(36, -1.0, 1.0)),
        (vec![2], rng.vec(2, -0.5, 0.5)),
    ];
    check_gradients(
        &inputs,
        &sum_loss(|g, v| g.conv(v[0], v[1], v[2])),
        1e-4,
        "conv 3x3",
    );
}

#[test]
fn grad_masked_conv_2d() {
    let mut rng = TestRng::new(23);
    let mask = Arc::new(causal_mask_2d(5));
    let inputs = vec![
        (vec![1, 6, 5], rng.vec(30, -1.5, 1.5)),
        (vec![3, 1, 5, 5], rng.vec(75, -1.0, 1.0)),
        (vec![3], rng.vec(3, -0.5, 0.5)),
    ];
    check_gradients(
        &inputs,
        &sum_loss(move |g, v| g.masked_conv(v[0], v[1], v[2], mask.clone())),
        1e-4,
        "masked conv 2d",
    );
}

#[test]
fn grad_masked_conv_3d() {
    let mut rng = TestRng::new(24);
    let mask = Arc::new(causal_mask_3d(3, 3, 3));
    let inputs = vec![
        (vec![1, 3, 4, 4], rng.vec(48, -1.0, 1.0)),
        (vec![2, 1, 3, 3, 3], rng.vec(54, -1.0, 1.0)),
        (vec![2], rng.vec(2, -0.5, 0.5)),
    ];
    check_gradients(
        &inputs,
        &sum_loss(move |g, v| g.masked_conv(v[0], v[1], v[2], mask.clone())),
        1e-4,
        "masked conv 3d",
    );
}

#[test]
fn grad_resample_up_and_down() {
    let mut rng = TestRng::new(25);
    let inputs2 = vec![(vec![3, 4], rng.vec(12, -1.0, 1.0))];
    check_gradients(
        &inputs2,
        &sum_loss(|g, v| {
            let up = g.bilinear_upsample(v[0], 5, 7);
            g.gelu(up)
        }),
        1e-4,
        "bilinear upsample",
    );
    check_gradients(
        &inputs2,
        &sum_loss(|g, v| g.resample(v[0], &[2, 2])),
        1e-4,
        "bilinear downsample",
    );
    let inputs3 = vec![(vec![2, 3, 4], rng.vec(24, -1.0, 1.0))];
    check_gradients(
        &inputs3,
        &sum_loss(|g, v| g.trilinear_upsample(v[0], 3, 5, 6)),
        1e-4,
        "trilinear upsample",
    );
    check_gradients(
        &inputs3,
        &sum_loss(|g, v| g.resample(v[0], &[1, 2, 2])),
        1e-4,
        "trilinear downsample",
    );
}

#[test]
fn grad_stack_and_channel() {
    let mut rng = TestRng::new(26);
    let inputs = vec![
        (vec![3, 4], rng.vec(12, -1.0, 1.0)),
        (vec![3, 4], rng.vec(12, -1.0, 1.0)),
    ];
    check_gradients(
        &inputs,
        &sum_loss(|g, v| {
            let s = g.stack(&[v[0], v[1]]);
            g.channel(s, 1)
        }),
        1e-4,
        "stack/channel",
    );
}

#[test]
fn grad_laplace_rate_bits() {
    let mut rng = TestRng::new(27);
    let z = rng.vec(10, -3.0, 3.0);
    let mu = rng.vec(10, -1.0, 1.0);
    let sigma = rng.vec(10, 0.3, 4.0);
    let inputs = vec![
        (vec![10], z),
        (vec![10], mu),
        (vec![10], sigma),
    ];
    check_gradients(
        &inputs,
        &|g: &mut Graph<f64>, v: &[Var]| g.laplace_rate_bits(v[0], v[1], v[2]),
        1e-4,
        "laplace_rate_bits",
    );
}

#[test]
fn grad_composite_pipeline() {
    // Miniature end-to-end shape: two latent grids, upsample, stack, 1x1 conv,
    // GELU, reconstruction MSE plus a Laplace rate term, all differentiated
    // at once.
    let mut rng = TestRng::new(28);
    let z1 = rng.vec(16, -1.0, 1.0);
    let z2 = rng.vec(4, -1.0, 1.0);
    let w = rng.vec(6, -0.8, 0.8);
    let b = rng.vec(3, -0.2, 0.2);
    let target = rng.vec(48, 0.0, 1.0);
    let inputs = vec![
        (vec![4, 4], z1),
        (vec![2, 2], z2),
        (vec![3, 2, 1, 1], w),
        (vec![3], b),
        (vec![3, 4, 4], target),
    ];
    check_gradients(
        &inputs,
        &|g: &mut Graph<f64>, v: &[Var]| {
            let up2 = g.bilinear_upsample(v[1], 4, 4);
            let stacked = g.stack(&[v[0], up2]);
            let y = g.conv(stacked, v[2], v[3]);
            let act = g.gelu(y);
            let d = g.mse(act, v[4]);
            let mu = g.scale(v[1], 0.3);
            let sig = g.exp(v[1]);
            let sigc = g.clamp(sig, 1e-3, 150.0);
            let rate = g.laplace_rate_bits(v[1], mu, sigc);
            let r = g.scale(rate, 1.0 / 48.0);
            g.add(d, r)
        },
        2e-4,
        "composite pipeline",
    );
}

#[test]
fn gradients_are_deterministic() {
    // Two identical builds must produce bit-identical gradient buffers.
    let mut rng = TestRng::new(29);
    let data = rng.vec(40, -1.0, 1.0);
    let w = rng.vec(36, -1.0, 1.0);
    let b = rng.vec(2, -0.1, 0.1);
    let run = || {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(TensorOf::from_f64_slice(&[2, 5, 4], &data), true);
        let wv = g.leaf(TensorOf::from_f64_slice(&[2, 2, 3, 3], &w.clone()), true);
        let bv = g.leaf(TensorOf::from_f64_slice(&[2], &b.clone()), true);
        let y = g.conv(x, wv, bv);
        let l = g.sum(y);
        let grads = g.backward(l);
        (
            grads.get(x).unwrap().to_vec(),
            grads.get(wv).unwrap().to_vec(),
        )
    };
    let (dx1, dw1) = run();
    let (dx2, dw2) = run();
    assert!(dx1.iter().zip(&dx2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(dw1.iter().zip(&dw2).all(|(a, b)| a.to_bits() == b.to_bits()));
}
