//! Autoregressive entropy model over the latent grids.
//!
//! Two evaluation paths share one arithmetic contract:
//!
//! * the batched graph path (training), and
//! * [`GridCoder`], which evaluates one position at a time (range coding).
//!
//! Both produce bit-identical raw network outputs (location and raw
//! log-scale heads). The coding scale is then always derived in f64 as
//! `clamp(exp(raw + shift), sigma_min, sigma_max)`; the graph applies the
//! same formula through its exp/clamp ops only to drive gradients.

use crate::config::{CodecConfig, ContextSpec};
use crate::model::{EntropyNet, EntropyParams, MaskOffsets};
use crate::tensor::kernels::{active_taps, conv_at, resize_linear};
use crate::tensor::{causal_mask_2d, causal_mask_3d, dense, Elem, Graph, TensorOf, Var};
use crate::{laplace, math};

/// First-layer context geometry: kernel spatial shape, input channel count,
/// and the per-(channel, tap) mask in storage order.
///
/// For learned-mask configs, `offsets` selects the final per-grid rectangle
/// on the previous frame; without offsets the mask is the wide causal window
/// used while learning.
pub fn first_layer_mask(
    cfg: &CodecConfig,
    grid: usize,
    offsets: Option<&MaskOffsets>,
) -> (Vec<usize>, usize, Vec<bool>) {
    match cfg.context {
        ContextSpec::Causal2d { l } => {
            let mut mask = causal_mask_2d(l);
            let cin = if cfg.prev_grid_conditioning {
                // Second channel: 3x3 window (center included) of the
                // downsampled previous grid, which is fully decoded already.
                let c = (l / 2) as isize;
                for ky in 0..l {
                    for kx in 0..l {
                        let dy = ky as isize - c;
                        let dx = kx as isize - c;
                        mask.push(dy.abs() <= 1 && dx.abs() <= 1);
                    }
                }
                2
            } else {
                1
            };
            (vec![l, l], cin, mask)
        }
        ContextSpec::Causal3d { kt, kh, kw } => (vec![kt, kh, kw], 1, causal_mask_3d(kt, kh, kw)),
        ContextSpec::Custom {
            wide, l, c, cp, k_learned, ..
        } => {
            let kshape = vec![3, wide, wide];
            match offsets {
                None => (kshape, 1, causal_mask_3d(3, wide, wide)),
                Some(offs) => {
                    let half = (wide / 2) as isize;
                    let lh = (l / 2) as isize;
                    let mut mask = Vec::with_capacity(3 * wide * wide);
                    // Previous frame: the learned rectangle, top grids only.
                    let rect = (grid < k_learned).then(|| offs[grid]);
                    for ky in 0..wide as isize {
                        for kx in 0..wide as isize {
                            let (dy, dx) = (ky - half, kx - half);
                            mask.push(rect.is_some_and(|(oy, ox)| {
                                dy >= oy as isize
                                    && dy < oy as isize + c as isize
                                    && dx >= ox as isize
                                    && dx < ox as isize + cp as isize
                            }));
                        }
                    }
                    // Current frame: l x l causal box around the center.
                    for ky in 0..wide as isize {
                        for kx in 0..wide as isize {
                            let (dy, dx) = (ky - half, kx - half);
                            let in_box = dy.abs() <= lh && dx.abs() <= lh;
                            mask.push(in_box && (dy < 0 || (dy == 0 && dx < 0)));
                        }
                    }
                    // Future frame: nothing.
                    mask.extend(std::iter::repeat(false).take(wide * wide));
                    (kshape, 1, mask)
                }
            }
        }
    }
}

/// Graph handles for one lifted entropy net.
pub struct NetVars {
    pub first_w: Var,
    pub first_b: Var,
    pub mask: std::sync::Arc<Vec<bool>>,
    pub rest: Vec<(Var, Var)>,
}

/// Lifts entropy parameters into a graph. 1x1 layers get explicit unit
/// kernel dims so they run through the shared convolution kernel.
pub fn lift_entropy<T: Elem>(
    g: &mut Graph<T>,
    p: &EntropyParams<T>,
    spatial_rank: usize,
    trainable: bool,
) -> Vec<NetVars> {
    p.nets
        .iter()
        .map(|net| {
            let mut unit = vec![0usize; 2 + spatial_rank];
            NetVars {
                first_w: g.leaf(net.first.w.clone(), trainable),
                first_b: g.leaf(net.first.b.clone(), trainable),
                mask: net.mask.clone(),
                rest: net
                    .rest
                    .iter()
                    .map(|l| {
                        unit[0] = l.w.shape()[0];
                        unit[1] = l.w.shape()[1];
                        unit[2..].fill(1);
                        (g.leaf(l.w.reshaped(&unit), trainable), g.leaf(l.b.clone(), trainable))
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Context input for one grid: the delta-scaled grid itself plus, when the
/// config conditions on the previous grid, a channel holding its
/// delta-scaled bilinear downsample (zeros for the first grid).
pub fn entropy_input_graph<T: Elem>(
    g: &mut Graph<T>,
    warped: &[Var],
    grid: usize,
    cfg: &CodecConfig,
) -> Var {
    let x0 = g.scale(warped[grid], cfg.delta);
    if !cfg.prev_grid_conditioning {
        return g.stack(&[x0]);
    }
    let shape = g.shape(x0).to_vec();
    let prev = if grid == 0 {
        g.constant(TensorOf::zeros(&shape))
    } else {
        let p = g.scale(warped[grid - 1], cfg.delta);
        g.resample(p, &shape)
    };
    g.stack(&[x0, prev])
}

/// Raw heads (2, spatial...): channel 0 location, channel 1 raw log-scale.
pub fn entropy_raw_graph<T: Elem>(
    g: &mut Graph<T>,
    input: Var,
    net: &NetVars,
    cfg: &CodecConfig,
) -> Var {
    let act = |g: &mut Graph<T>, v: Var| if cfg.gelu { g.gelu(v) } else { g.relu(v) };
    let mut h = g.masked_conv(input, net.first_w, net.first_b, net.mask.clone());
    h = act(g, h);
    let last = net.rest.len() - 1;
    for (i, &(w, b)) in net.rest.iter().enumerate() {
        h = g.conv(h, w, b);
        if i < last {
            h = act(g, h);
        }
    }
    h
}

/// Total coded-rate surrogate in bits for one grid, given its warped latents.
pub fn grid_rate_graph<T: Elem>(
    g: &mut Graph<T>,
    warped: &[Var],
    grid: usize,
    net: &NetVars,
    cfg: &CodecConfig,
) -> Var {
    let input = entropy_input_graph(g, warped, grid, cfg);
    let raw = entropy_raw_graph(g, input, net, cfg);
    let mu = g.channel(raw, 0);
    let ls = g.channel(raw, 1);
    let shifted = g.add_scalar(ls, cfg.log_scale_shift);
    let e = g.exp(shifted);
    // Straight-through clamp: the scale head starts saturated at sigma_max
    // (zero activations through exp(+shift)) and needs gradient to escape.
    let sigma = g.clamp_ste(e, cfg.sigma_min, cfg.sigma_max);
    g.laplace_rate_bits(warped[grid], mu, sigma)
}

/// Total rate surrogate over all grids, in bits.
pub fn rate_bits_graph<T: Elem>(
    g: &mut Graph<T>,
    warped: &[Var],
    nets: &[NetVars],
    cfg: &CodecConfig,
) -> Var {
    let mut total: Option<Var> = None;
    for grid in 0..warped.len() {
        let net = if nets.len() == 1 { &nets[0] } else { &nets[grid] };
        let bits = grid_rate_graph(g, warped, grid, net, cfg);
        total = Some(match total {
            None => bits,
            Some(t) => g.add(t, bits),
        });
    }
    total.expect("at least one grid")
}

/// Sequential per-position evaluator for one grid. Holds the delta-scaled
/// context state; the decoder fills it as symbols arrive, the encoder fills
/// it up front from already-known latents (identical by causality).
pub struct GridCoder<'a, T: Elem> {
    net: &'a EntropyNet<T>,
    taps: Vec<(usize, usize, [isize; 3])>,
    state: TensorOf<T>,
    plane: usize,
    delta: f64,
    gelu: bool,
    shift: f64,
    smin: f64,
    smax: f64,
}

impl<'a, T: Elem> GridCoder<'a, T> {
    /// `prev_scaled`: the delta-scaled previous grid at its own resolution
    /// (only for prev-grid-conditioned configs; None for the first grid).
    pub fn new(
        cfg: &CodecConfig,
        net: &'a EntropyNet<T>,
        shape: &[usize],
        prev_scaled: Option<&TensorOf<T>>,
    ) -> Self {
        let cin = net.first.w.shape()[1];
        let kshape = &net.first.w.shape()[2..];
        let taps = active_taps(cin, kshape, Some(&net.mask));
        let mut sshape = vec![cin];
        sshape.extend_from_slice(shape);
        let mut state = TensorOf::zeros(&sshape);
        let plane: usize = shape.iter().product();
        if let Some(prev) = prev_scaled {
            assert_eq!(cin, 2, "previous-grid channel on a 1-channel context");
            let ds = resize_linear(prev, shape);
            state.data_mut()[plane..].copy_from_slice(ds.data());
        }
        GridCoder {
            net,
            taps,
            state,
            plane,
            delta: cfg.delta,
            gelu: cfg.gelu,
            shift: cfg.log_scale_shift,
            smin: cfg.sigma_min,
            smax: cfg.sigma_max,
        }
    }

    /// Records a decoded (or known) latent, in step units, at a linear
    /// raster index of the grid.
    pub fn place(&mut self, lin: usize, step_units: f64) {
        debug_assert!(lin < self.plane);
        self.state.data_mut()[lin] = T::from_f64(step_units * self.delta);
    }

    fn activate(&self, v: &mut [T]) {
        for x in v {
            let f = x.to_f64();
            *x = T::from_f64(if self.gelu { math::gelu(f) } else { f.max(0.0) });
        }
    }

    /// Raw heads at one position: (location, raw log-scale). Bit-identical
    /// to the graph path at the same state.
    pub fn raw_heads(&self, pos: &[usize]) -> (T, T) {
        let w1 = self.net.first.w.shape()[0];
        let mut h: Vec<T> = (0..w1)
            .map(|co| conv_at(&self.state, &self.net.first.w, &self.net.first.b, &self.taps, co, pos))
            .collect();
        self.activate(&mut h);
        let last = self.net.rest.len() - 1;
        for (i, l) in self.net.rest.iter().enumerate() {
            h = dense(&l.w, &l.b, &h);
            if i < last {
                self.activate(&mut h);
            }
        }
        (h[0], h[1])
    }

    /// Laplace parameters at one position. The scale leaves the f32 domain
    /// here: one frozen f64 formula shared by encoder and decoder.
    pub fn mu_sigma(&self, pos: &[usize]) -> (f64, f64) {
        let (mu, ls) = self.raw_heads(pos);
        let sigma = math::exp(ls.to_f64() + self.shift).clamp(self.smin, self.smax);
        (mu.to_f64(), sigma)
    }
}

/// Walks a 2- or 3-d shape in raster order.
pub fn for_each_pos(shape: &[usize], mut f: impl FnMut(&[usize], usize)) {
    let mut lin = 0usize;
    match *shape {
        [h, w] => {
            for y in 0..h {
                for x in 0..w {
                    f(&[y, x], lin);
                    lin += 1;
                }
            }
        }
        [t, h, w] => {
            for ft in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        f(&[ft, y, x], lin);
                        lin += 1;
                    }
                }
            }
        }
        _ => panic!("unsupported rank {}", shape.len()),
    }
}

fn scaled<T: Elem>(t: &TensorOf<T>, s: f64) -> TensorOf<T> {
    let data: Vec<T> = t.data().iter().map(|v| T::from_f64(v.to_f64() * s)).collect();
    TensorOf::from_vec(t.shape(), data)
}

#[derive(Debug, Clone)]
pub struct RateBreakdown {
    pub total_bits: f64,
    pub per_grid: Vec<f64>,
}

fn rate_walk<T: Elem>(
    cfg: &CodecConfig,
    entropy: &EntropyParams<T>,
    grids: &[TensorOf<T>],
    alphabet: Option<&[u16]>,
) -> RateBreakdown {
    let mut per_grid = Vec::with_capacity(grids.len());
    for (n, grid) in grids.iter().enumerate() {
        let prev = (cfg.prev_grid_conditioning && n > 0).then(|| scaled(&grids[n - 1], cfg.delta));
        let mut coder = GridCoder::new(cfg, entropy.net_for_grid(n), grid.shape(), prev.as_ref());
        for (i, v) in grid.data().iter().enumerate() {
            coder.place(i, v.to_f64());
        }
        let a = alphabet.map(|a| a[n] as f64);
        let mut bits = 0.0f64;
        for_each_pos(grid.shape(), |pos, lin| {
            let (mu, sigma) = coder.mu_sigma(pos);
            let z = grid.data()[lin].to_f64();
            bits += match a {
                None => -laplace::bin_log2_prob(z, mu, sigma),
                Some(a) => laplace::coded_bits(z, mu, sigma, a),
            };
        });
        per_grid.push(bits);
    }
    RateBreakdown {
        total_bits: per_grid.iter().sum(),
        per_grid,
    }
}

/// Model-facing rate bookkeeping: evaluates every position through the same
/// f64 chain the range coder uses and sums -log2 of the unbounded-support
/// bin probabilities (the quantity the training loss optimizes).
pub fn exact_rate_bits<T: Elem>(
    cfg: &CodecConfig,
    entropy: &EntropyParams<T>,
    grids: &[TensorOf<T>],
) -> RateBreakdown {
    rate_walk(cfg, entropy, grids, None)
}

/// Coder-facing rate bookkeeping: the same walk, but charging each symbol
/// what the finite-alphabet tables charge (edge symbols absorb their tails,
/// 16-bit frequency floor). `alphabet[n]` bounds grid n's symbols.
pub fn coded_rate_bits<T: Elem>(
    cfg: &CodecConfig,
    entropy: &EntropyParams<T>,
    grids: &[TensorOf<T>],
    alphabet: &[u16],
) -> RateBreakdown {
    rate_walk(cfg, entropy, grids, Some(alphabet))
}
