//! Synthesis network: upsample the latent grids to the input resolution,
//! mix them with a 1x1 stack, then refine with zero-initialized residual
//! convolutions.

use crate::config::{CodecConfig, ResidualKind};
use crate::model::SynthesisParams;
use crate::tensor::{Elem, Graph, TensorOf, Var};

/// Graph handles for the lifted synthesis parameters.
pub struct SynthVars {
    pub stack: Vec<(Var, Var)>,
    pub residual: Vec<(Var, Var)>,
}

pub fn lift_synthesis<T: Elem>(
    g: &mut Graph<T>,
    p: &SynthesisParams<T>,
    spatial_rank: usize,
    trainable: bool,
) -> SynthVars {
    let mut unit = vec![0usize; 2 + spatial_rank];
    let stack = p
        .stack
        .iter()
        .map(|l| {
            unit[0] = l.w.shape()[0];
            unit[1] = l.w.shape()[1];
            unit[2..].fill(1);
            (g.leaf(l.w.reshaped(&unit), trainable), g.leaf(l.b.clone(), trainable))
        })
        .collect();
    let residual = p
        .residual
        .iter()
        .map(|l| (g.leaf(l.w.clone(), trainable), g.leaf(l.b.clone(), trainable)))
        .collect();
    SynthVars { stack, residual }
}

/// Reconstruction from warped latents (step units): delta-scale each grid,
/// resample to the input extents, stack to (N, spatial...), run the 1x1
/// stack with activations after the hidden layers, then apply each residual
/// convolution as y = y + conv(y). Output is (3, spatial...).
pub fn synthesize_graph<T: Elem>(
    g: &mut Graph<T>,
    warped: &[Var],
    v: &SynthVars,
    cfg: &CodecConfig,
    dims: &[usize],
) -> Var {
    let planes: Vec<Var> = warped
        .iter()
        .map(|&z| {
            let s = g.scale(z, cfg.delta);
            if g.shape(s) == dims {
                s
            } else {
                g.resample(s, dims)
            }
        })
        .collect();
    let mut y = g.stack(&planes);
    let last = v.stack.len() - 1;
    for (i, &(w, b)) in v.stack.iter().enumerate() {
        y = g.conv(y, w, b);
        if i < last {
            y = if cfg.gelu { g.gelu(y) } else { g.relu(y) };
        }
    }
    for &(w, b) in &v.residual {
        let r = g.conv(y, w, b);
        y = g.add(y, r);
    }
    y
}

/// Decode-side reconstruction: the same graph ops over constants, so the
/// result is bit-identical to the encoder's final forward pass.
pub fn synthesize<T: Elem>(
    cfg: &CodecConfig,
    synthesis: &SynthesisParams<T>,
    grids: &[TensorOf<T>],
    dims: &[usize],
) -> TensorOf<T> {
    let mut g = Graph::new();
    let warped: Vec<Var> = grids.iter().map(|t| g.constant(t.clone())).collect();
    let vars = lift_synthesis(&mut g, synthesis, dims.len(), false);
    let out = synthesize_graph(&mut g, &warped, &vars, cfg, dims);
    g.value(out).clone()
}

/// Kernel extents of one residual layer, for capacity accounting.
pub fn residual_taps(kind: ResidualKind) -> usize {
    match kind {
        ResidualKind::Conv2d => 9,
        ResidualKind::Conv3d => 27,
        ResidualKind::Conv2dPerFrame => 9,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use crate::model::{init_model, Model, ModelOf};
    use crate::rng;
    use rand::RngCore;

    fn randomize_latents(m: &mut Model, seed: u64) {
        let mut r = rng::stream(seed, "test-latents", 0);
        for g in &mut m.grids {
            for v in g.data_mut() {
                *v = ((r.next_u64() % 11) as f64 - 5.0) as f32;
            }
        }
    }

    #[test]
    fn fresh_model_reconstructs_the_bias() {
        // Zero latents through He 1x1 layers give the last bias everywhere;
        // zero residual kernels then add nothing.
        let mut cfg = CodecConfig::kodak_default();
        cfg.mean_rgb_bias = true;
        let m: Model = init_model(&cfg, &[64, 64], 1, Some([0.2, 0.5, 0.9]), None).unwrap();
        let y = synthesize(&cfg, &m.synthesis, &m.grids, &m.dims);
        assert_eq!(y.shape(), [3, 64, 64]);
        let plane = 64 * 64;
        for (c, want) in [0.2f32, 0.5, 0.9].iter().enumerate() {
            for i in 0..plane {
                assert_eq!(y.data()[c * plane + i], *want);
            }
        }
    }

    #[test]
    fn output_shape_matches_input_extents_for_video() {
        let cfg = CodecConfig::uvg_default();
        let m: Model = init_model(&cfg, &[32, 48, 64], 2, None, None).unwrap();
        let y = synthesize(&cfg, &m.synthesis, &m.grids, &m.dims);
        assert_eq!(y.shape(), [3, 32, 48, 64]);
    }

    #[test]
    fn reconstruction_is_local_to_latent_changes() {
        // With zero residual kernels the network is 1x1 over upsampled
        // grids: poking one full-resolution latent moves only a small
        // neighborhood (bilinear footprint), and exactly 2 pixels in each
        // axis direction once the two 3x3 residual layers are active.
        let cfg = CodecConfig::kodak_default();
        let mut m: Model = init_model(&cfg, &[64, 64], 8, None, None).unwrap();
        randomize_latents(&mut m, 21);
        // Make the residual layers non-trivial.
        for l in &mut m.synthesis.residual {
            let n = l.w.numel();
            for (i, v) in l.w.data_mut().iter_mut().enumerate() {
                *v = ((i * 7919 % n) as f32 / n as f32 - 0.5) * 0.1;
            }
        }
        let base = synthesize(&cfg, &m.synthesis, &m.grids, &m.dims);
        let (py, px) = (31usize, 17usize);
        m.grids[0].data_mut()[py * 64 + px] += 3.0;
        let poked = synthesize(&cfg, &m.synthesis, &m.grids, &m.dims);
        let plane = 64 * 64;
        for y in 0..64 {
            for x in 0..64 {
                let changed = (0..3).any(|c| {
                    base.data()[c * plane + y * 64 + x] != poked.data()[c * plane + y * 64 + x]
                });
                let dy = (y as isize - py as isize).abs();
                let dx = (x as isize - px as isize).abs();
                if changed {
                    assert!(
                        dy <= 4 && dx <= 4,
                        "change leaked to ({y},{x}) from ({py},{px})"
                    );
                }
                if dy == 0 && dx == 0 {
                    assert!(changed, "poked pixel did not change");
                }
            }
        }
    }

    #[test]
    fn f64_model_matches_dense_reference_at_one_pixel() {
        // Independent scalar recomputation of the 1x1 stack at a single
        // pixel (residuals are zero at init so they drop out).
        let cfg = CodecConfig::kodak_default();
        let mut m: ModelOf<f64> = init_model(&cfg, &[64, 64], 13, None, None).unwrap();
        let mut r = rng::stream(4, "test-latents", 0);
        for g in &mut m.grids {
            for v in g.data_mut() {
                *v = (r.next_u64() % 11) as f64 - 5.0;
            }
        }
        let y = synthesize(&cfg, &m.synthesis, &m.grids, &m.dims);

        // Build the per-grid upsampled inputs the same way.
        let (py, px) = (40usize, 9usize);
        let mut feat = Vec::new();
        for g in &m.grids {
            let s: TensorOf<f64> = TensorOf::from_f64_slice(
                g.shape(),
                &g.data().iter().map(|v| v * cfg.delta).collect::<Vec<_>>(),
            );
            let up = if s.shape() == [64, 64] {
                s
            } else {
                crate::tensor::kernels::resize_linear(&s, &[64, 64])
            };
            feat.push(up.at(&[py, px]));
        }
        let mut h = feat;
        for (i, l) in m.synthesis.stack.iter().enumerate() {
            h = crate::tensor::dense(&l.w, &l.b, &h);
            if i < 2 {
                for v in &mut h {
                    *v = crate::math::gelu(*v);
                }
            }
        }
        let plane = 64 * 64;
        for c in 0..3 {
            let got = y.data()[c * plane + py * 64 + px];
            assert!(
                (got - h[c]).abs() <= 1e-12 * h[c].abs().max(1.0),
                "channel {c}: {got} vs {}",
                h[c]
            );
        }
    }
}
