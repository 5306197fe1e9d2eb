//! Two-stage rate-distortion overfitting.
//!
//! Stage 1 trains through a noisy soft-rounding quantizer surrogate with a
//! cosine learning-rate schedule, annealing both the soft-rounding
//! temperature and the Kumaraswamy noise shape. Stage 2 switches to hard
//! rounding with a straight-through gradient and a small adaptive learning
//! rate that decays whenever the loss stops improving, resetting to the best
//! snapshot seen.

mod adam;
mod pipeline;
mod search;

pub use adam::Adam;
pub use pipeline::{encode, encode_adaptive, encode_prepared, EncodeOutcome};
pub use search::{param_quant_search, QuantChoice};

#[cfg(test)]
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::model::{entropy, lift_model, synthesis, LiftedModel, ModelOf};
use crate::rng;
use crate::tensor::{Elem, Graph, TensorOf, Var};
use crate::{math, quant};
use rand::RngCore;

/// How latent leaves are transformed before entering the networks.
pub enum LatentWarp<T: Elem> {
    /// Noisy soft rounding r_T(s_T(z) + noise), stage 1.
    SoftNoise { t: f64, noise: Vec<TensorOf<T>> },
    /// Plain additive noise (soft-rounding knockout).
    Additive { noise: Vec<TensorOf<T>> },
    /// Hard rounding forward, soft-round slope backward (stage 2).
    /// An infinite temperature gives the linear straight-through slope.
    Ste { t: f64 },
}

pub struct LossVars {
    pub loss: Var,
    pub mse: Var,
    pub rate_bits: Var,
}

fn warp_latents<T: Elem>(
    g: &mut Graph<T>,
    latents: &[Var],
    warp: &LatentWarp<T>,
) -> Vec<Var> {
    match warp {
        LatentWarp::SoftNoise { t, noise } => latents
            .iter()
            .zip(noise)
            .map(|(&z, n)| {
                let nv = g.constant(n.clone());
                g.softround_noise(z, nv, *t)
            })
            .collect(),
        LatentWarp::Additive { noise } => latents
            .iter()
            .zip(noise)
            .map(|(&z, n)| {
                let nv = g.constant(n.clone());
                g.add(z, nv)
            })
            .collect(),
        LatentWarp::Ste { t } => latents.iter().map(|&z| g.round_ste(z, *t)).collect(),
    }
}

/// Builds the full rate-distortion graph:
/// loss = mean-square error + lambda * (rate bits / pixel count).
pub fn build_rd_graph<T: Elem>(
    g: &mut Graph<T>,
    m: &ModelOf<T>,
    target: &TensorOf<T>,
    lambda: f64,
    warp: &LatentWarp<T>,
    trainable: bool,
) -> (LiftedModel, LossVars) {
    let lifted = lift_model(g, m, trainable);
    let warped = warp_latents(g, &lifted.latents, warp);
    let recon = synthesis::synthesize_graph(g, &warped, &lifted.synth, &m.config, &m.dims);
    let tv = g.constant(target.clone());
    let mse = g.mse(recon, tv);
    let rate_bits = entropy::rate_bits_graph(g, &warped, &lifted.nets, &m.config);
    let scaled = g.scale(rate_bits, lambda / m.npix() as f64);
    let loss = g.add(mse, scaled);
    (
        lifted,
        LossVars {
            loss,
            mse,
            rate_bits,
        },
    )
}

/// Centered noise tensors for one step, one per grid. Kumaraswamy shape `a`
/// (a = 1 is uniform), offset to [-1/2, 1/2].
fn noise_tensors<T: Elem>(m: &ModelOf<T>, seed: u64, step: usize, a: f64) -> Vec<TensorOf<T>> {
    let mut r = rng::stream(seed, "noise", step as u64);
    m.grids
        .iter()
        .map(|grid| {
            let data: Vec<T> = (0..grid.numel())
                .map(|_| {
                    let v = (r.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
                    T::from_f64(quant::kumaraswamy_sample(v, a) - 0.5)
                })
                .collect();
            TensorOf::from_vec(grid.shape(), data)
        })
        .collect()
}

/// Gathers leaf gradients in canonical order, densifying missing ones.
fn gather_grads<T: Elem>(
    g: &Graph<T>,
    back: &crate::tensor::Gradients,
    leaves: &[Var],
) -> Vec<Vec<f64>> {
    leaves
        .iter()
        .map(|&v| {
            back.get(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect()
}

/// Scales all gradients so their joint L2 norm is at most `clip`.
fn clip_global_norm(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum();
    let norm = math::sqrt(sq);
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

fn apply_update<T: Elem>(m: &mut ModelOf<T>, opt: &mut Adam, grads: &[Vec<f64>], lr: f64) {
    let mut deltas: Vec<Vec<f64>> = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    opt.step(lr, grads, |gi, j, d| deltas[gi][j] = d);
    let mut gi = 0;
    m.visit_params_mut(&mut |p| {
        for (x, d) in p.data_mut().iter_mut().zip(&deltas[gi]) {
            *x = T::from_f64(x.to_f64() + d);
        }
        gi += 1;
    });
}

/// Loss trace of one stage. `losses` holds every step's pre-update loss.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub final_mse: f64,
    pub final_rate_bits: f64,
    pub steps: usize,
}

/// Cosine decay from `lr0` to 0 across `steps` (denominator steps - 1).
pub fn cosine_lr(lr0: f64, step: usize, steps: usize) -> f64 {
    let denom = steps.saturating_sub(1).max(1) as f64;
    0.5 * lr0 * (1.0 + math::cos(std::f64::consts::PI * step as f64 / denom))
}

fn linear(from: f64, to: f64, step: usize, steps: usize) -> f64 {
    let denom = steps.saturating_sub(1).max(1) as f64;
    from + (to - from) * step as f64 / denom
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            reason: format!("loss became {loss}"),
        })
    }
}

/// Stage 1: noisy quantizer surrogate, cosine learning rate, annealed
/// temperature and noise shape, global gradient-norm clipping.
pub fn run_stage1<T: Elem>(
    m: &mut ModelOf<T>,
    target: &TensorOf<T>,
    lambda: f64,
    seed: u64,
) -> Result<StageReport> {
    let sch = m.config.schedules.clone();
    let variant = m.config.variant;
    let steps = sch.stage1_steps;
    let mut opt = Adam::new(&m.param_sizes());
    let mut losses = Vec::with_capacity(steps);
    let (mut fm, mut fr) = (0.0, 0.0);

    for step in 0..steps {
        let lr = cosine_lr(sch.stage1_lr, step, steps);
        let t = linear(sch.t_start, sch.t_end, step, steps);
        let a = if variant.kumaraswamy {
            linear(sch.a_start, sch.a_end, step, steps)
        } else {
            1.0
        };
        let noise = noise_tensors(m, seed, step, a);
        let warp = if variant.soft_round {
            LatentWarp::SoftNoise { t, noise }
        } else {
            LatentWarp::Additive { noise }
        };

        let mut g = Graph::new();
        let (lifted, lv) = build_rd_graph(&mut g, m, target, lambda, &warp, true);
        let loss = g.value(lv.loss).item();
        check_finite(loss, step)?;
        losses.push(loss);
        fm = g.value(lv.mse).item();
        fr = g.value(lv.rate_bits).item();

        let back = g.backward(lv.loss);
        let mut grads = gather_grads(&g, &back, &lifted.leaves);
        clip_global_norm(&mut grads, sch.grad_clip);
        apply_update(m, &mut opt, &grads, lr);
    }

    Ok(StageReport {
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        final_mse: fm,
        final_rate_bits: fr,
        losses,
        steps,
    })
}

/// Stage 2: hard-rounded forward with a straight-through slope on the
/// latents. With the adaptive variant the learning rate multiplies by
/// `lr_decay` each time `patience` steps pass without a new best loss,
/// parameters and optimizer reset to the best snapshot, and training stops
/// once the rate falls below `lr_stop`; the best snapshot wins at the end.
pub fn run_stage2<T: Elem>(
    m: &mut ModelOf<T>,
    target: &TensorOf<T>,
    lambda: f64,
) -> Result<StageReport> {
    let sch = m.config.schedules.clone();
    let variant = m.config.variant;
    let ste_t = if variant.soft_round { 1e-4 } else { f64::INFINITY };
    let warp = LatentWarp::Ste { t: ste_t };

    let mut opt = Adam::new(&m.param_sizes());
    let mut lr = sch.stage2_lr;
    let mut losses = Vec::new();
    let (mut fm, mut fr) = (0.0, 0.0);
    let mut best: Option<(f64, ModelOf<T>, Adam)> = None;
    let mut since_best = 0usize;

    for step in 0..sch.stage2_max_steps {
        let mut g = Graph::new();
        let (lifted, lv) = build_rd_graph(&mut g, m, target, lambda, &warp, true);
        let loss = g.value(lv.loss).item();
        check_finite(loss, step)?;
        losses.push(loss);
        fm = g.value(lv.mse).item();
        fr = g.value(lv.rate_bits).item();

        if variant.adaptive_lr {
            if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                best = Some((loss, m.clone(), opt.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= sch.patience {
                    let (_, bm, bo) = best.as_ref().unwrap();
                    *m = bm.clone();
                    opt = bo.clone();
                    lr *= sch.lr_decay;
                    since_best = 0;
                    if lr < sch.lr_stop {
                        break;
                    }
                    continue;
                }
            }
        }

        let back = g.backward(lv.loss);
        let mut grads = gather_grads(&g, &back, &lifted.leaves);
        clip_global_norm(&mut grads, sch.grad_clip);
        apply_update(m, &mut opt, &grads, lr);
    }

    if let Some((b, bm, _)) = best {
        // Keep the best snapshot even if the tail of training drifted.
        if losses.last().is_some_and(|&l| l > b) {
            *m = bm;
        }
    }

    Ok(StageReport {
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        final_mse: fm,
        final_rate_bits: fr,
        steps: losses.len(),
        losses,
    })
}

/// Rate-distortion loss of the current parameters under hard rounding.
pub fn eval_hard_loss<T: Elem>(m: &ModelOf<T>, target: &TensorOf<T>, lambda: f64) -> LossSummary {
    let mut g = Graph::new();
    let warp = LatentWarp::Ste { t: 1e-4 };
    let (_, lv) = build_rd_graph(&mut g, m, target, lambda, &warp, false);
    LossSummary {
        loss: g.value(lv.loss).item(),
        mse: g.value(lv.mse).item(),
        rate_bits: g.value(lv.rate_bits).item(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossSummary {
    pub loss: f64,
    pub mse: f64,
    pub rate_bits: f64,
}

/// Small config for unit tests: trains in milliseconds on tiny inputs.
#[cfg(test)]
pub(crate) fn tiny_config() -> CodecConfig {
    use crate::config::{ContextSpec, Schedules};
    let mut cfg = CodecConfig::kodak_default();
    cfg.n_grids = 3;
    cfg.synthesis_widths = (6, 6);
    cfg.entropy_widths = (6, 6);
    cfg.context = ContextSpec::Causal2d { l: 3 };
    cfg.schedules = Schedules {
        stage1_steps: 150,
        stage2_max_steps: 30,
        ..Schedules::image_default()
    };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Model};

    fn checker_target(h: usize, w: usize) -> TensorOf<f32> {
        let mut data = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = ((x / 2 + y / 2 + c) % 2) as f32 * 0.8 + 0.1;
                    data[c * h * w + y * w + x] = v;
                }
            }
        }
        TensorOf::from_vec(&[3, h, w], data)
    }

    #[test]
    fn stage1_reduces_the_loss_on_a_checkerboard() {
        let cfg = tiny_config();
        let mut m: Model = init_model(&cfg, &[8, 8], 3, None, None).unwrap();
        let target = checker_target(8, 8);
        let rep = run_stage1(&mut m, &target, 1e-3, 3).unwrap();
        let head: f64 = rep.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = rep.losses[rep.losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < 0.55 * head,
            "no descent: head {head:.5} tail {tail:.5}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let target = checker_target(8, 8);
        let run = || {
            let mut m: Model = init_model(&cfg, &[8, 8], 3, None, None).unwrap();
            run_stage1(&mut m, &target, 1e-3, 7).unwrap();
            m
        };
        let (a, b) = (run(), run());
        for (x, y) in a.grids.iter().zip(&b.grids) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(
            a.synthesis.stack[0].w.data(),
            b.synthesis.stack[0].w.data()
        );
    }

    #[test]
    fn masked_slots_stay_zero_through_training() {
        let cfg = tiny_config();
        let mut m: Model = init_model(&cfg, &[8, 8], 5, None, None).unwrap();
        let target = checker_target(8, 8);
        run_stage1(&mut m, &target, 1e-3, 5).unwrap();
        run_stage2(&mut m, &target, 1e-3).unwrap();
        let net = &m.entropy.nets[0];
        let slot = net.mask.len();
        for (i, &v) in net.first.w.data().iter().enumerate() {
            if !net.mask[i % slot] {
                assert_eq!(v, 0.0, "masked slot {i} moved");
            }
        }
    }

    #[test]
    fn stage2_never_worsens_the_hard_rounded_loss() {
        let cfg = tiny_config();
        let mut m: Model = init_model(&cfg, &[8, 8], 11, None, None).unwrap();
        let target = checker_target(8, 8);
        run_stage1(&mut m, &target, 1e-3, 11).unwrap();
        let before = eval_hard_loss(&m, &target, 1e-3);
        run_stage2(&mut m, &target, 1e-3).unwrap();
        let after = eval_hard_loss(&m, &target, 1e-3);
        assert!(
            after.loss <= before.loss + 1e-12,
            "stage 2 worsened: {} -> {}",
            before.loss,
            after.loss
        );
    }

    #[test]
    fn knockout_variants_still_train() {
        let mut cfg = tiny_config();
        cfg.variant.soft_round = false;
        cfg.variant.kumaraswamy = false;
        cfg.variant.adaptive_lr = false;
        let mut m: Model = init_model(&cfg, &[8, 8], 2, None, None).unwrap();
        let target = checker_target(8, 8);
        let rep = run_stage1(&mut m, &target, 1e-3, 2).unwrap();
        assert!(rep.losses[rep.losses.len() - 1] < rep.losses[0]);
        run_stage2(&mut m, &target, 1e-3).unwrap();
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert!((cosine_lr(1e-2, 0, 101) - 1e-2).abs() < 1e-15);
        assert!((cosine_lr(1e-2, 50, 101) - 5e-3).abs() < 1e-12);
        assert!(cosine_lr(1e-2, 100, 101) < 1e-15);
    }
}
