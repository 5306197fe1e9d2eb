//! Reverse-mode tape.
//!
//! A [`Graph`] is rebuilt per training step: leaves go in, ops append nodes
//! (values computed eagerly), [`Graph::backward`] walks the tape once in
//! reverse. Adjoints accumulate in f64 regardless of the storage type so
//! gradient precision does not degrade with tensor size, and every
//! accumulation order is fixed, making gradients deterministic.

use std::sync::Arc;

use super::kernels;
use super::{Elem, TensorOf};
use crate::{laplace, math, quant};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mse(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        mask: Option<Arc<Vec<bool>>>,
    },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ClampSte(Var),
    Resize(Var),
    SoftRound(Var, f64),
    SoftRoundInverse(Var, f64),
    RoundSte(Var, f64),
    Stack(Vec<Var>),
    Channel(Var, usize),
    LaplaceRateBits {
        z: Var,
        mu: Var,
        sigma: Var,
    },
}

struct Node<T: Elem> {
    op: Op,
    value: TensorOf<T>,
    needs_grad: bool,
    /// Forward-pass byproducts the backward pass reuses (GELU keeps the
    /// normal CDF per element so the gradient needs no second erf).
    aux: Vec<f64>,
}

/// Gradients of one backward pass, indexed by [`Var`]; always f64.
pub struct Gradients {
    inner: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for a var, if any gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.inner.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Tape of tensor ops with reverse-mode differentiation.
pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: TensorOf<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Inserts a tensor; `trainable` marks it as a gradient target.
    pub fn leaf(&mut self, t: TensorOf<T>, trainable: bool) -> Var {
        self.push(Op::Leaf, t, trainable)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: TensorOf<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &TensorOf<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| T::from_f64(f(x.to_f64())))
            .collect();
        let value = TensorOf::from_vec(self.shape(a).to_vec().as_slice(), data);
        let needs = self.needs(a);
        self.push(op, value, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let value = TensorOf::from_vec(self.shape(a).to_vec().as_slice(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() - y.to_f64()))
            .collect();
        let value = TensorOf::from_vec(self.shape(a).to_vec().as_slice(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| T::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let value = TensorOf::from_vec(self.shape(a).to_vec().as_slice(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// Sum of all elements, as a [1]-shaped tensor (f64 accumulation).
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = 0.0f64;
        for &x in self.nodes[a.0].value.data() {
            acc += x.to_f64();
        }
        let needs = self.needs(a);
        self.push(Op::Sum(a), TensorOf::from_f64_slice(&[1], &[acc]), needs)
    }

    /// Mean squared error over all elements, as a [1]-shaped tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mse");
        let n = self.nodes[a.0].value.numel() as f64;
        let mut acc = 0.0f64;
        for (&x, &y) in self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
        {
            let d = x.to_f64() - y.to_f64();
            acc += d * d;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Op::Mse(a, b),
            TensorOf::from_f64_slice(&[1], &[acc / n]),
            needs,
        )
    }

    /// Same-padded convolution: x (cin, spatial...), w (cout, cin, k...), b (cout).
    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.conv_impl(x, w, b, None)
    }

    /// Convolution with a per-(cin, tap) boolean mask over the kernel.
    pub fn masked_conv(&mut self, x: Var, w: Var, b: Var, mask: Arc<Vec<bool>>) -> Var {
        self.conv_impl(x, w, b, Some(mask))
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        let value = kernels::conv_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            mask.as_ref().map(|m| m.as_slice()),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv { x, w, b, mask }, value, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.nodes[a.0].value.data();
        let mut aux = Vec::with_capacity(src.len());
        let data: Vec<T> = src
            .iter()
            .map(|&x| {
                let xf = x.to_f64();
                let cdf = math::norm_cdf(xf);
                aux.push(cdf);
                T::from_f64(xf * cdf)
            })
            .collect();
        let value = TensorOf::from_vec(self.shape(a).to_vec().as_slice(), data);
        let needs = self.needs(a);
        let v = self.push(Op::Gelu(a), value, needs);
        self.nodes[v.0].aux = aux;
        v
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), math::exp)
    }

    /// Hard clamp; gradient is zero outside [lo, hi].
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds inverted: [{lo}, {hi}]");
        self.map_unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Clamp forward, identity backward. Saturated values still receive the
    /// full gradient, so a head initialized against a bound can escape it.
    pub fn clamp_ste(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds inverted: [{lo}, {hi}]");
        self.map_unary(a, Op::ClampSte(a), |x| x.clamp(lo, hi))
    }

    /// Linear resample to `dst` (any direction), rank 1..3.
    pub fn resample(&mut self, x: Var, dst: &[usize]) -> Var {
        let value = kernels::resize_linear(&self.nodes[x.0].value, dst);
        let needs = self.needs(x);
        self.push(Op::Resize(x), value, needs)
    }

    /// Bilinear upsample of a (h, w) tensor; target must not shrink.
    pub fn bilinear_upsample(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "bilinear_upsample wants a rank-2 tensor");
        assert!(
            h >= s[0] && w >= s[1],
            "bilinear_upsample cannot shrink {:?} to {:?}",
            s,
            [h, w]
        );
        self.resample(x, &[h, w])
    }

    /// Trilinear upsample of a (t, h, w) tensor; target must not shrink.
    pub fn trilinear_upsample(&mut self, x: Var, t: usize, h: usize, w: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "trilinear_upsample wants a rank-3 tensor");
        assert!(
            t >= s[0] && h >= s[1] && w >= s[2],
            "trilinear_upsample cannot shrink {:?} to {:?}",
            s,
            [t, h, w]
        );
        self.resample(x, &[t, h, w])
    }

    pub fn soft_round(&mut self, a: Var, t: f64) -> Var {
        self.map_unary(a, Op::SoftRound(a, t), |x| quant::soft_round(x, t))
    }

    pub fn soft_round_inverse(&mut self, a: Var, t: f64) -> Var {
        self.map_unary(a, Op::SoftRoundInverse(a, t), |x| {
            quant::soft_round_inverse(x, t)
        })
    }

    /// Noisy soft rounding r_T(s_T(z) + noise) with `centered_noise` = u - 1/2.
    pub fn softround_noise(&mut self, z: Var, centered_noise: Var, t: f64) -> Var {
        let s = self.soft_round(z, t);
        let y = self.add(s, centered_noise);
        self.soft_round_inverse(y, t)
    }

    /// Hard rounding forward, soft-round slope s'_T backward.
    pub fn round_ste(&mut self, a: Var, t: f64) -> Var {
        self.map_unary(a, Op::RoundSte(a, t), quant::round_half_away)
    }

    /// Stacks k same-shaped tensors into (k, ...).
    pub fn stack(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "stack of zero tensors");
        let s0 = self.shape(vars[0]).to_vec();
        let mut data = Vec::with_capacity(vars.len() * self.nodes[vars[0].0].value.numel());
        let mut needs = false;
        for &v in vars {
            assert_eq!(self.shape(v), s0.as_slice(), "stack: ragged shapes");
            data.extend_from_slice(self.nodes[v.0].value.data());
            needs |= self.needs(v);
        }
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(&s0);
        self.push(Op::Stack(vars.to_vec()), TensorOf::from_vec(&shape, data), needs)
    }

    /// Extracts channel `idx` of a (C, ...) tensor, dropping the C axis.
    pub fn channel(&mut self, x: Var, idx: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() >= 2, "channel() wants a rank >= 2 tensor");
        assert!(idx < s[0], "channel {idx} out of {}", s[0]);
        let plane: usize = s[1..].iter().product();
        let data = self.nodes[x.0].value.data()[idx * plane..(idx + 1) * plane].to_vec();
        let needs = self.needs(x);
        self.push(Op::Channel(x, idx), TensorOf::from_vec(&s[1..], data), needs)
    }

    /// Total rate in bits: sum over elements of -log2 P(bin z | mu, sigma).
    pub fn laplace_rate_bits(&mut self, z: Var, mu: Var, sigma: Var) -> Var {
        self.same_shape(z, mu, "laplace_rate_bits z/mu");
        self.same_shape(z, sigma, "laplace_rate_bits z/sigma");
        let mut acc = 0.0f64;
        for ((&zv, &mv), &sv) in self.nodes[z.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[mu.0].value.data())
            .zip(self.nodes[sigma.0].value.data())
        {
            let s = sv.to_f64();
            debug_assert!(s > 0.0, "Laplace scale must be positive");
            acc += -laplace::bin_log2_prob(zv.to_f64(), mv.to_f64(), s);
        }
        let needs = self.needs(z) || self.needs(mu) || self.needs(sigma);
        self.push(
            Op::LaplaceRateBits { z, mu, sigma },
            TensorOf::from_f64_slice(&[1], &[acc]),
            needs,
        )
    }

    /// Reverse pass from a scalar loss. Returns per-var f64 gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { inner: grads }
    }

    /// TEMPORARY profiling variant of [`Self::backward`]; delete before release.
    pub fn backward_timed(&self, loss: Var) -> Vec<(&'static str, f64, usize)> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut acc: std::collections::HashMap<&'static str, (f64, usize)> =
            std::collections::HashMap::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let name = match &self.nodes[i].op {
                Op::Leaf => "leaf",
                Op::Add(..) => "add",
                Op::Sub(..) => "sub",
                Op::Mul(..) => "mul",
                Op::Scale(..) => "scale",
                Op::AddScalar(..) => "add_scalar",
                Op::Sum(..) => "sum",
                Op::Mse(..) => "mse",
                Op::Conv { .. } => "conv",
                Op::Gelu(..) => "gelu",
                Op::Relu(..) => "relu",
                Op::Exp(..) => "exp",
                Op::Clamp(..) => "clamp",
                Op::ClampSte(..) => "clamp_ste",
                Op::Resize(..) => "resize",
                Op::SoftRound(..) => "soft_round",
                Op::SoftRoundInverse(..) => "soft_round_inverse",
                Op::RoundSte(..) => "round_ste",
                Op::Stack(..) => "stack",
                Op::Channel(..) => "channel",
                Op::LaplaceRateBits { .. } => "laplace_rate_bits",
            };
            let t0 = std::time::Instant::now();
            self.propagate(i, &g, &mut grads);
            let dt = t0.elapsed().as_secs_f64();
            let e = acc.entry(name).or_insert((0.0, 0));
            e.0 += dt;
            e.1 += 1;
            grads[i] = Some(g);
        }
        let mut v: Vec<_> = acc.into_iter().map(|(k, (t, n))| (k, t, n)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    fn ensure<'a>(
        &self,
        grads: &'a mut Vec<Option<Vec<f64>>>,
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        slot.as_mut()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.ensure(grads, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.ensure(grads, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += y.to_f64() * gv;
                    }
                }
                if let Some(db) = self.ensure(grads, *b) {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += x.to_f64() * gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                if let Some(da) = self.ensure(grads, *a) {
                    for d in da.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::Mse(a, b) => {
                let g0 = g[0];
                let n = self.nodes[a.0].value.numel() as f64;
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let scale = 2.0 / n * g0;
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += scale * (x.to_f64() - y.to_f64());
                    }
                }
                if let Some(db) = self.ensure(grads, *b) {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= scale * (x.to_f64() - y.to_f64());
                    }
                }
            }
            Op::Conv { x, w, b, mask } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                // The three vars are always distinct tensors, so their grad
                // slots can be taken out and written to directly.
                debug_assert!(x.0 != w.0 && x.0 != b.0 && w.0 != b.0);
                let mut take = |v: Var| {
                    self.needs(v).then(|| {
                        grads[v.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0f64; self.nodes[v.0].value.numel()])
                    })
                };
                let mut dx = take(*x);
                let mut dw = take(*w);
                let mut db = take(*b);
                kernels::conv_backward(
                    xv,
                    wv,
                    mask.as_ref().map(|m| m.as_slice()),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
                if let Some(db) = db {
                    grads[b.0] = Some(db);
                }
            }
            Op::Gelu(a) => {
                let av = self.nodes[a.0].value.data();
                let cdf = &node.aux;
                if let Some(da) = self.ensure(grads, *a) {
                    // Same per-element chain as gelu_deriv with the forward CDF
                    // reused. Four elements per pass so the exp latency chains
                    // overlap; each element's arithmetic is unchanged.
                    let deriv = |x: T, phi: f64| {
                        let xf = x.to_f64();
                        phi + xf * math::FRAC_1_SQRT_2PI * math::exp(-0.5 * xf * xf)
                    };
                    let n = da.len();
                    let n4 = n / 4 * 4;
                    let (dh, dt) = da.split_at_mut(n4);
                    for (((d, gc), xc), pc) in dh
                        .chunks_exact_mut(4)
                        .zip(g[..n4].chunks_exact(4))
                        .zip(av[..n4].chunks_exact(4))
                        .zip(cdf[..n4].chunks_exact(4))
                    {
                        let d0 = deriv(xc[0], pc[0]);
                        let d1 = deriv(xc[1], pc[1]);
                        let d2 = deriv(xc[2], pc[2]);
                        let d3 = deriv(xc[3], pc[3]);
                        d[0] += d0 * gc[0];
                        d[1] += d1 * gc[1];
                        d[2] += d2 * gc[2];
                        d[3] += d3 * gc[3];
                    }
                    for (i, d) in dt.iter_mut().enumerate() {
                        *d += deriv(av[n4 + i], cdf[n4 + i]) * g[n4 + i];
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        if x.to_f64() > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let out = node.value.data();
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += y.to_f64() * gv;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.nodes[a.0].value.data();
                let (lo, hi) = (*lo, *hi);
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        let xf = x.to_f64();
                        if xf >= lo && xf <= hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ClampSte(a) => {
                if let Some(da) = self.ensure(grads, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Resize(a) => {
                let src_shape = self.nodes[a.0].value.shape().to_vec();
                let dst_shape = node.value.shape().to_vec();
                if let Some(da) = self.ensure(grads, *a) {
                    kernels::resize_backward(&src_shape, &dst_shape, g, da);
                }
            }
            Op::SoftRound(a, t) => {
                let av = self.nodes[a.0].value.data();
                let t = *t;
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d += quant::soft_round_deriv(x.to_f64(), t) * gv;
                    }
                }
            }
            Op::SoftRoundInverse(a, t) => {
                let av = self.nodes[a.0].value.data();
                let t = *t;
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d += quant::soft_round_inverse_deriv(x.to_f64(), t) * gv;
                    }
                }
            }
            Op::RoundSte(a, t) => {
                let av = self.nodes[a.0].value.data();
                let t = *t;
                if let Some(da) = self.ensure(grads, *a) {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *d += quant::soft_round_deriv(x.to_f64(), t) * gv;
                    }
                }
            }
            Op::Stack(vars) => {
                let plane = self.nodes[vars[0].0].value.numel();
                for (k, &v) in vars.iter().enumerate() {
                    if let Some(dv) = self.ensure(grads, v) {
                        for (d, &gv) in dv.iter_mut().zip(&g[k * plane..(k + 1) * plane]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Channel(x, idx) => {
                let plane = node.value.numel();
                if let Some(dx) = self.ensure(grads, *x) {
                    for (d, &gv) in dx[idx * plane..(idx + 1) * plane].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::LaplaceRateBits { z, mu, sigma } => {
                let g0 = g[0];
                let zv = self.nodes[z.0].value.data();
                let mv = self.nodes[mu.0].value.data();
                let sv = self.nodes[sigma.0].value.data();
                let need_z = self.needs(*z);
                let need_mu = self.needs(*mu);
                let need_s = self.needs(*sigma);
                let n = zv.len();
                let mut dz = if need_z { vec![0.0; n] } else { Vec::new() };
                let mut dmu = if need_mu { vec![0.0; n] } else { Vec::new() };
                let mut ds = if need_s { vec![0.0; n] } else { Vec::new() };
                for j in 0..n {
                    let bb = laplace::bin_bits_grad(
                        zv[j].to_f64(),
                        mv[j].to_f64(),
                        sv[j].to_f64(),
                    );
                    if need_z {
                        dz[j] = bb.dz * g0;
                    }
                    if need_mu {
                        dmu[j] = bb.dmu * g0;
                    }
                    if need_s {
                        ds[j] = bb.db * g0;
                    }
                }
                if let Some(dst) = self.ensure(grads, *z) {
                    for (d, s) in dst.iter_mut().zip(&dz) {
                        *d += s;
                    }
                }
                if let Some(dst) = self.ensure(grads, *mu) {
                    for (d, s) in dst.iter_mut().zip(&dmu) {
                        *d += s;
                    }
                }
                if let Some(dst) = self.ensure(grads, *sigma) {
                    for (d, s) in dst.iter_mut().zip(&ds) {
                        *d += s;
                    }
                }
            }
        }
    }
}
