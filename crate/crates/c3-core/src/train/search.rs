//! Post-training parameter-quantization search: picks the (weight, bias)
//! step pair whose quantized networks minimize the rate-distortion objective
//! on the already-rounded latents, charging parameters a zero-mean Laplace
//! rate with empirically fit scales.

use crate::coding;
use crate::config::PARAM_STEPS;
use crate::error::{Error, Result};
use crate::model::entropy::coded_rate_bits;
use crate::model::synthesis::synthesize;
use crate::model::Model;
use crate::tensor::TensorOf;

/// Winning cell of [`param_quant_search`].
#[derive(Debug, Clone, Copy)]
pub struct QuantChoice {
    pub weight_step_idx: usize,
    pub bias_step_idx: usize,
    /// Objective at the argmin: mse + lambda * (latent + param bits) / npix.
    pub loss: f64,
    pub mse: f64,
    /// Coded latent bits under the quantized entropy networks.
    pub latent_bits: f64,
    /// Ideal coded bits of the parameter payload.
    pub param_bits: f64,
    /// Parameter segment bits including the bit-packed group headers.
    pub segment_bits: f64,
}

/// Scans every step pair, quantizing all weight groups at the first step and
/// all bias groups at the second, and scores each candidate by hard MSE plus
/// the coded rate of latents and parameters (per pixel, so the objective is
/// commensurate with the training loss). Returns the fully quantized model
/// (latents hard-rounded, parameters snapped to the chosen steps) and the
/// winning cell. Cells whose integers overflow the coder alphabet or whose
/// objective is non-finite are skipped; only when every cell is skipped does
/// the search fail.
pub fn param_quant_search(
    m: &Model,
    target: &TensorOf<f32>,
    lambda: f64,
) -> Result<(Model, QuantChoice)> {
    let mut q = m.clone();
    q.grids = m.quantized_grids();
    let alphabet = coding::grid_alphabet(&q.grids)?;
    let npix = m.npix() as f64;
    let nel = target.numel() as f64;

    let mut best: Option<(Model, QuantChoice)> = None;
    for w_idx in 0..PARAM_STEPS.len() {
        for b_idx in 0..PARAM_STEPS.len() {
            let Ok(pq) = coding::quantize_param_groups(m, w_idx, b_idx) else {
                continue;
            };
            let mut cand = q.clone();
            cand.set_param_groups(&pq.groups);
            let recon = synthesize(&cand.config, &cand.synthesis, &cand.grids, &cand.dims);
            let mse = recon
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum::<f64>()
                / nel;
            let latent_bits =
                coded_rate_bits(&cand.config, &cand.entropy, &cand.grids, &alphabet).total_bits;
            let loss = mse + lambda * (latent_bits + pq.ideal_bits) / npix;
            if !loss.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(_, c)| loss < c.loss) {
                best = Some((
                    cand,
                    QuantChoice {
                        weight_step_idx: w_idx,
                        bias_step_idx: b_idx,
                        loss,
                        mse,
                        latent_bits,
                        param_bits: pq.ideal_bits,
                        segment_bits: pq.header_bits as f64 + pq.ideal_bits,
                    },
                ));
            }
        }
    }
    best.ok_or_else(|| Error::invalid("no parameter quantization produced a finite objective"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::table::{quantize_scale, scale_for_index};
    use crate::laplace;
    use crate::model::{init_model, GroupKind};
    use crate::quant::round_half_away;
    use crate::rng;
    use crate::train::tiny_config;
    use rand::RngCore;

    fn unit(r: &mut impl RngCore) -> f64 {
        (r.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Toy state standing in for a trained model: perturbed network
    /// parameters and small integer-ish latents.
    fn toy_model(seed: u64) -> (Model, TensorOf<f32>) {
        let cfg = tiny_config();
        let dims = [8usize, 8];
        let mut m: Model = init_model(&cfg, &dims, seed, None, None).unwrap();
        let mut r = rng::stream(seed, "toy", 1);
        for grid in &mut m.grids {
            for v in grid.data_mut() {
                *v = ((unit(&mut r) * 6.0 - 3.0) + 0.3) as f32;
            }
        }
        m.visit_params_mut(&mut |t| {
            for v in t.data_mut() {
                *v += (unit(&mut r) * 0.02 - 0.01) as f32;
            }
        });
        let data: Vec<f32> = (0..192).map(|_| (unit(&mut r) * 0.9) as f32).collect();
        (m, TensorOf::from_vec(&[3, 8, 8], data))
    }

    /// Straight-line re-evaluation of one cell from public primitives only.
    fn brute_cell(m: &Model, target: &TensorOf<f32>, lambda: f64, wi: usize, bi: usize) -> Option<f64> {
        let mut param_bits = 0.0f64;
        let mut groups = Vec::new();
        for g in m.param_groups() {
            let step = match g.kind {
                GroupKind::Weight => PARAM_STEPS[wi],
                GroupKind::Bias => PARAM_STEPS[bi],
            };
            let ints: Vec<i64> = g.values.iter().map(|&v| round_half_away(v / step) as i64).collect();
            let a = ints.iter().map(|k| k.abs()).max().unwrap();
            if a > u16::MAX as i64 {
                return None;
            }
            let n = ints.len() as f64;
            let mean = ints.iter().map(|&k| k as f64 * step).sum::<f64>() / n;
            let var = ints
                .iter()
                .map(|&k| (k as f64 * step - mean) * (k as f64 * step - mean))
                .sum::<f64>()
                / n;
            let b = scale_for_index(quantize_scale((var.sqrt() / 2.0f64.sqrt()).max(1e-6)));
            for &k in &ints {
                param_bits += laplace::coded_bits(k as f64, 0.0, b / step, a as f64);
            }
            groups.push(ints.iter().map(|&k| k as f64 * step).collect::<Vec<f64>>());
        }
        let mut cand = m.clone();
        cand.grids = m.quantized_grids();
        cand.set_param_groups(&groups);
        let alphabet: Vec<u16> = cand
            .grids
            .iter()
            .map(|g| {
                g.data()
                    .iter()
                    .map(|&v| round_half_away(v as f64) as i64)
                    .map(i64::abs)
                    .max()
                    .unwrap()
                    .max(1) as u16
            })
            .collect();
        let latent_bits =
            coded_rate_bits(&cand.config, &cand.entropy, &cand.grids, &alphabet).total_bits;
        let recon = synthesize(&cand.config, &cand.synthesis, &cand.grids, &cand.dims);
        let mse = recon
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
            .sum::<f64>()
            / target.numel() as f64;
        Some(mse + lambda * (latent_bits + param_bits) / cand.npix() as f64)
    }

    #[test]
    fn matches_exhaustive_brute_force() {
        let (m, target) = toy_model(11);
        let lambda = 2e-3;
        let (_, choice) = param_quant_search(&m, &target, lambda).unwrap();

        let mut best: Option<(usize, usize, f64)> = None;
        for wi in 0..PARAM_STEPS.len() {
            for bi in 0..PARAM_STEPS.len() {
                let Some(loss) = brute_cell(&m, &target, lambda, wi, bi) else {
                    continue;
                };
                if best.is_none_or(|(_, _, b)| loss < b) {
                    best = Some((wi, bi, loss));
                }
            }
        }
        let (wi, bi, loss) = best.unwrap();
        assert_eq!((choice.weight_step_idx, choice.bias_step_idx), (wi, bi));
        assert!(
            (choice.loss - loss).abs() <= 1e-12 * loss.abs().max(1.0),
            "objective mismatch: {} vs {}",
            choice.loss,
            loss
        );
    }

    #[test]
    fn smaller_lambda_never_coarsens_the_steps() {
        let (m, target) = toy_model(7);
        let mut prev: Option<(usize, usize)> = None;
        // Descending lambda: rate matters less and less, so the chosen
        // steps should only stay or get finer.
        for lambda in [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            let (_, c) = param_quant_search(&m, &target, lambda).unwrap();
            if let Some((pw, pb)) = prev {
                assert!(
                    c.weight_step_idx <= pw && c.bias_step_idx <= pb,
                    "lambda {lambda}: steps ({}, {}) coarser than ({pw}, {pb})",
                    c.weight_step_idx,
                    c.bias_step_idx
                );
            }
            prev = Some((c.weight_step_idx, c.bias_step_idx));
        }
        // The ladder must actually exercise the trend, not sit still.
        let first = param_quant_search(&m, &target, 1.0).unwrap().1;
        let last = param_quant_search(&m, &target, 1e-5).unwrap().1;
        assert!(
            first.weight_step_idx + first.bias_step_idx
                > last.weight_step_idx + last.bias_step_idx
        );
    }

    #[test]
    fn constant_groups_fall_back_to_the_scale_floor() {
        // A freshly initialized model has all-zero bias groups: std = 0,
        // so their rate is priced at the minimum scale without blowing up.
        let cfg = tiny_config();
        let mut m: Model = init_model(&cfg, &[8, 8], 3, None, None).unwrap();
        m.grids[0].data_mut()[5] = 2.0;
        let target = TensorOf::from_vec(&[3, 8, 8], vec![0.5f32; 192]);
        let (q, choice) = param_quant_search(&m, &target, 1e-3).unwrap();
        assert!(choice.loss.is_finite());
        assert!(choice.param_bits.is_finite() && choice.param_bits > 0.0);
        // Zero bias groups survive quantization exactly.
        let zero_bias = q.param_groups().iter().any(|g| {
            g.kind == GroupKind::Bias && !g.values.is_empty() && g.values.iter().all(|&v| v == 0.0)
        });
        assert!(zero_bias);
    }

    #[test]
    fn oversized_parameters_fail_every_cell() {
        let (mut m, target) = toy_model(5);
        m.synthesis.stack[0].w.data_mut()[0] = 1.0e6;
        let err = param_quant_search(&m, &target, 1e-3).unwrap_err();
        assert!(err.to_string().contains("no parameter quantization"));
    }
}
