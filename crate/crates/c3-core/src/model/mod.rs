//! The codec model: multi-resolution latent grids, the synthesis network,
//! and the autoregressive entropy network.

pub mod entropy;
pub mod synthesis;

use std::sync::Arc;

use crate::config::{CodecConfig, ContextSpec, Media, ResidualKind};
use crate::error::Result;
use crate::rng;
use crate::tensor::{Elem, TensorOf};
use crate::{math, quant};
use rand::RngCore;

/// One convolution (or dense) layer. Weight shape (cout, cin, k...)
/// with k... empty meaning 1x1.
#[derive(Debug, Clone)]
pub struct ConvLayer<T: Elem> {
    pub w: TensorOf<T>,
    pub b: TensorOf<T>,
}

#[derive(Debug, Clone)]
pub struct SynthesisParams<T: Elem> {
    /// 1x1 stack N -> w1 -> w2 -> 3, activation after the hidden layers.
    pub stack: Vec<ConvLayer<T>>,
    /// Residual 3-channel convolutions, zero-initialized: y = x + conv(x).
    pub residual: Vec<ConvLayer<T>>,
}

/// One entropy network: masked context layer then a 1x1 stack down to the
/// two distribution heads (location, raw log-scale).
#[derive(Debug, Clone)]
pub struct EntropyNet<T: Elem> {
    pub first: ConvLayer<T>,
    pub mask: Arc<Vec<bool>>,
    pub rest: Vec<ConvLayer<T>>,
}

#[derive(Debug, Clone)]
pub struct EntropyParams<T: Elem> {
    /// One net shared by all grids, or one per grid.
    pub nets: Vec<EntropyNet<T>>,
}

impl<T: Elem> EntropyParams<T> {
    pub fn net_for_grid(&self, grid: usize) -> &EntropyNet<T> {
        if self.nets.len() == 1 {
            &self.nets[0]
        } else {
            &self.nets[grid]
        }
    }
}

/// Rectangle offsets (top-left, relative to window center) of learned
/// previous-frame masks, one per learned grid.
pub type MaskOffsets = Vec<(i8, i8)>;

#[derive(Debug, Clone)]
pub struct ModelOf<T: Elem> {
    pub config: CodecConfig,
    /// Input extents: [h, w] for images, [t, h, w] for video.
    pub dims: Vec<usize>,
    /// Latent grids in step units.
    pub grids: Vec<TensorOf<T>>,
    pub synthesis: SynthesisParams<T>,
    pub entropy: EntropyParams<T>,
    /// Present only when the config uses learned custom masks.
    pub mask_offsets: Option<MaskOffsets>,
}

pub type Model = ModelOf<f32>;

/// Standard normal via Box-Muller on the deterministic math kernel.
fn normal_sample(rng: &mut impl RngCore) -> f64 {
    let u1 = 1.0 - (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(std::f64::consts::TAU * u2)
}

fn he_layer<T: Elem>(
    rng: &mut impl RngCore,
    cout: usize,
    cin: usize,
    kshape: &[usize],
    fan_in: usize,
    mask: Option<&[bool]>,
) -> ConvLayer<T> {
    let mut wshape = vec![cout, cin];
    wshape.extend_from_slice(kshape);
    let ktotal: usize = kshape.iter().product();
    let std = math::sqrt(2.0 / fan_in as f64);
    let n: usize = wshape.iter().product();
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let v = normal_sample(rng) * std;
        let slot = i % (cin * ktotal);
        let live = mask.map_or(true, |m| m[slot]);
        w.push(T::from_f64(if live { v } else { 0.0 }));
    }
    ConvLayer {
        w: TensorOf::from_vec(&wshape, w),
        b: TensorOf::zeros(&[cout]),
    }
}

fn zero_layer<T: Elem>(cout: usize, cin: usize, kshape: &[usize]) -> ConvLayer<T> {
    let mut wshape = vec![cout, cin];
    wshape.extend_from_slice(kshape);
    ConvLayer {
        w: TensorOf::zeros(&wshape),
        b: TensorOf::zeros(&[cout]),
    }
}

fn residual_kshape(kind: ResidualKind) -> Vec<usize> {
    match kind {
        ResidualKind::Conv2d => vec![3, 3],
        ResidualKind::Conv3d => vec![3, 3, 3],
        ResidualKind::Conv2dPerFrame => vec![1, 3, 3],
    }
}

fn build_entropy_net<T: Elem>(
    rng: &mut impl RngCore,
    cfg: &CodecConfig,
    grid: usize,
    offsets: Option<&MaskOffsets>,
) -> EntropyNet<T> {
    let (kshape, cin, mask) = entropy::first_layer_mask(cfg, grid, offsets);
    let taps = mask.iter().filter(|&&b| b).count();
    let (w1, w2) = cfg.entropy_widths;
    let first = he_layer(rng, w1, cin, &kshape, taps, Some(&mask));
    let rest = vec![
        he_layer(rng, w2, w1, &[], w1, None),
        he_layer(rng, 2, w2, &[], w2, None),
    ];
    EntropyNet {
        first,
        mask: Arc::new(mask),
        rest,
    }
}

/// Fresh model state: zero latents, He-initialized 1x1 stacks, zero residual
/// convolutions and biases. `mean_rgb` seeds the last synthesis bias when the
/// config asks for it. Deterministic given the seed.
pub fn init_model<T: Elem>(
    cfg: &CodecConfig,
    dims: &[usize],
    seed: u64,
    mean_rgb: Option<[f64; 3]>,
    mask_offsets: Option<MaskOffsets>,
) -> Result<ModelOf<T>> {
    cfg.validate_dims(dims)?;
    let mut rng = rng::stream(seed, "init", 0);

    let grids = cfg
        .grid_shapes(dims)
        .iter()
        .map(|s| TensorOf::zeros(s))
        .collect();

    let n = cfg.n_grids;
    let (s1, s2) = cfg.synthesis_widths;
    let mut stack = vec![
        he_layer(&mut rng, s1, n, &[], n, None),
        he_layer(&mut rng, s2, s1, &[], s1, None),
        he_layer(&mut rng, 3, s2, &[], s2, None),
    ];
    if cfg.mean_rgb_bias {
        let rgb = mean_rgb.unwrap_or([0.0; 3]);
        stack[2].b = TensorOf::from_f64_slice(&[3], &rgb);
    }
    let rk = residual_kshape(cfg.residual);
    let residual = vec![zero_layer(3, 3, &rk), zero_layer(3, 3, &rk)];

    let net_count = if cfg.per_grid_entropy { cfg.n_grids } else { 1 };
    let nets = (0..net_count)
        .map(|g| build_entropy_net(&mut rng, cfg, g, mask_offsets.as_ref()))
        .collect();

    Ok(ModelOf {
        config: cfg.clone(),
        dims: dims.to_vec(),
        grids,
        synthesis: SynthesisParams { stack, residual },
        entropy: EntropyParams { nets },
        mask_offsets,
    })
}

impl<T: Elem> ModelOf<T> {
    pub fn npix(&self) -> usize {
        self.dims.iter().product()
    }

    /// Latents hard-rounded to integers (still in step units).
    pub fn quantized_grids(&self) -> Vec<TensorOf<T>> {
        self.grids.iter().map(quant::quantize_latents).collect()
    }

    /// Mean RGB of an input tensor (3, spatial...), for bias init.
    pub fn mean_rgb(x: &TensorOf<T>) -> [f64; 3] {
        let plane: usize = x.shape()[1..].iter().product();
        let mut out = [0.0f64; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..plane {
                acc += x.data()[c * plane + i].to_f64();
            }
            *o = acc / plane as f64;
        }
        out
    }
}

/// Identifies one coded group of parameters. Weights and biases quantize
/// with separate steps; masked first-layer weights only include live taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Weight,
    Bias,
}

/// Flat copy of one parameter group in the frozen serialization order.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub values: Vec<f64>,
}

fn layer_groups<T: Elem>(layer: &ConvLayer<T>, mask: Option<&[bool]>, out: &mut Vec<ParamGroup>) {
    let values = match mask {
        None => layer.w.data().iter().map(|v| v.to_f64()).collect(),
        Some(m) => {
            // Live taps only, in storage (row-major) order.
            let slot = m.len();
            layer
                .w
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| m[i % slot])
                .map(|(_, v)| v.to_f64())
                .collect()
        }
    };
    out.push(ParamGroup {
        kind: GroupKind::Weight,
        values,
    });
    out.push(ParamGroup {
        kind: GroupKind::Bias,
        values: layer.b.data().iter().map(|v| v.to_f64()).collect(),
    });
}

impl<T: Elem> ModelOf<T> {
    /// All parameter groups in the frozen order: synthesis stack, synthesis
    /// residuals, then each entropy net (masked first layer, 1x1 stack).
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        for l in &self.synthesis.stack {
            layer_groups(l, None, &mut out);
        }
        for l in &self.synthesis.residual {
            layer_groups(l, None, &mut out);
        }
        for net in &self.entropy.nets {
            layer_groups(&net.first, Some(&net.mask), &mut out);
            for l in &net.rest {
                layer_groups(l, None, &mut out);
            }
        }
        out
    }

    /// Writes groups back in the same order as [`param_groups`]. Masked
    /// first-layer slots that are not live stay zero.
    pub fn set_param_groups(&mut self, groups: &[Vec<f64>]) {
        let mut it = groups.iter();
        let mut take = |layer: &mut ConvLayer<T>, mask: Option<&[bool]>| {
            let w = it.next().expect("missing weight group");
            match mask {
                None => {
                    assert_eq!(w.len(), layer.w.numel(), "weight group size");
                    for (dst, &v) in layer.w.data_mut().iter_mut().zip(w) {
                        *dst = T::from_f64(v);
                    }
                }
                Some(m) => {
                    let slot = m.len();
                    let mut src = w.iter();
                    for (i, dst) in layer.w.data_mut().iter_mut().enumerate() {
                        if m[i % slot] {
                            *dst = T::from_f64(*src.next().expect("short masked weight group"));
                        } else {
                            *dst = T::from_f64(0.0);
                        }
                    }
                    assert!(src.next().is_none(), "long masked weight group");
                }
            }
            let b = it.next().expect("missing bias group");
            assert_eq!(b.len(), layer.b.numel(), "bias group size");
            for (dst, &v) in layer.b.data_mut().iter_mut().zip(b) {
                *dst = T::from_f64(v);
            }
        };
        for l in &mut self.synthesis.stack {
            take(l, None);
        }
        for l in &mut self.synthesis.residual {
            take(l, None);
        }
        for net in &mut self.entropy.nets {
            let mask = net.mask.clone();
            take(&mut net.first, Some(&mask));
            for l in &mut net.rest {
                take(l, None);
            }
        }
        assert!(it.next().is_none(), "extra parameter groups");
    }
}

impl<T: Elem> ModelOf<T> {
    /// Visits every trainable tensor in the canonical order: latent grids,
    /// synthesis stack (w, b per layer), synthesis residuals, then each
    /// entropy net (first w, b, then the 1x1 stack). Optimizer state and
    /// graph leaves index into this order.
    pub fn visit_params(&self, f: &mut impl FnMut(&TensorOf<T>)) {
        for g in &self.grids {
            f(g);
        }
        for l in self.synthesis.stack.iter().chain(&self.synthesis.residual) {
            f(&l.w);
            f(&l.b);
        }
        for net in &self.entropy.nets {
            f(&net.first.w);
            f(&net.first.b);
            for l in &net.rest {
                f(&l.w);
                f(&l.b);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut TensorOf<T>)) {
        for g in &mut self.grids {
            f(g);
        }
        for l in self
            .synthesis
            .stack
            .iter_mut()
            .chain(&mut self.synthesis.residual)
        {
            f(&mut l.w);
            f(&mut l.b);
        }
        for net in &mut self.entropy.nets {
            f(&mut net.first.w);
            f(&mut net.first.b);
            for l in &mut net.rest {
                f(&mut l.w);
                f(&mut l.b);
            }
        }
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit_params(&mut |t| out.push(t.numel()));
        out
    }
}

/// Graph handles for a fully lifted model.
pub struct LiftedModel {
    /// Raw latent leaves, step units (before any warp).
    pub latents: Vec<crate::tensor::Var>,
    pub synth: synthesis::SynthVars,
    pub nets: Vec<entropy::NetVars>,
    /// Every leaf in the canonical parameter order (see `visit_params`).
    pub leaves: Vec<crate::tensor::Var>,
}

/// Lifts the whole model into a graph, leaf order matching `visit_params`.
pub fn lift_model<T: Elem>(
    g: &mut crate::tensor::Graph<T>,
    m: &ModelOf<T>,
    trainable: bool,
) -> LiftedModel {
    let rank = m.dims.len();
    let latents: Vec<_> = m.grids.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
    let synth = synthesis::lift_synthesis(g, &m.synthesis, rank, trainable);
    let nets = entropy::lift_entropy(g, &m.entropy, rank, trainable);
    let mut leaves = latents.clone();
    for &(w, b) in synth.stack.iter().chain(&synth.residual) {
        leaves.push(w);
        leaves.push(b);
    }
    for net in &nets {
        leaves.push(net.first_w);
        leaves.push(net.first_b);
        for &(w, b) in &net.rest {
            leaves.push(w);
            leaves.push(b);
        }
    }
    LiftedModel {
        latents,
        synth,
        nets,
        leaves,
    }
}

/// Number of media channels (always RGB).
pub fn channel_count(_media: Media) -> usize {
    3
}

/// True when the context spec needs learned offsets before final training.
pub fn needs_mask_learning(cfg: &CodecConfig) -> bool {
    matches!(cfg.context, ContextSpec::Custom { .. })
}
