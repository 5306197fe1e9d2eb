//! Convolution and resampling kernels.
//!
//! Every output element is computed as one serial f64 chain in a frozen
//! order (bias first, then taps ascending by (input channel, kernel raster
//! index)), rounded once to the storage type. Any other evaluation path that
//! must agree bit-for-bit (the single-position entropy evaluation, the
//! decoder) replays the same chain.

use super::{Elem, TensorOf};

/// Tap list of a (possibly masked) convolution kernel, in the frozen
/// accumulation order: input channel major, kernel raster index minor.
/// Each entry is (ci, flat kernel index, spatial deltas relative to center).
pub(crate) fn active_taps(
    cin: usize,
    kshape: &[usize],
    mask: Option<&[bool]>,
) -> Vec<(usize, usize, [isize; 3])> {
    let ktotal: usize = kshape.iter().product();
    if let Some(m) = mask {
        assert_eq!(
            m.len(),
            cin * ktotal,
            "mask length {} != cin {cin} * kernel {ktotal}",
            m.len()
        );
    }
    let mut taps = Vec::new();
    for ci in 0..cin {
        for k in 0..ktotal {
            if mask.map_or(true, |m| m[ci * ktotal + k]) {
                let mut rem = k;
                let mut delta = [0isize; 3];
                // Unravel k into kernel coordinates, then center.
                for (axis, &kd) in kshape.iter().enumerate().rev() {
                    let c = rem % kd;
                    rem /= kd;
                    delta[axis] = c as isize - (kd / 2) as isize;
                }
                taps.push((ci, k, delta));
            }
        }
    }
    taps
}

fn spatial_strides(shape: &[usize]) -> [usize; 3] {
    let mut s = [0usize; 3];
    let n = shape.len();
    let mut acc = 1usize;
    for i in (0..n).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Spatial extents padded to three axes (dummy leading axes of size 1), so
/// every kernel walks one (outer, middle, contiguous) loop nest.
fn padded_dims(spatial: &[usize]) -> [usize; 3] {
    let mut d = [1usize; 3];
    d[3 - spatial.len()..].copy_from_slice(spatial);
    d
}

/// Tap delta aligned to [`padded_dims`] (leading axes get delta 0).
fn padded_delta(delta: &[isize; 3], sdim: usize) -> [isize; 3] {
    let mut e = [0isize; 3];
    e[3 - sdim..].copy_from_slice(&delta[..sdim]);
    e
}

/// In-bounds index range of one axis under a tap shift: the positions p with
/// 0 <= p + e < d.
fn axis_span(d: usize, e: isize) -> (usize, usize) {
    let lo = 0.max(-e) as usize;
    let hi = (d as isize).min(d as isize - e).max(lo as isize) as usize;
    (lo, hi)
}

/// Pixel-tile width for the 1x1 conv fast paths: big enough to amortize the
/// channel loops, small enough that all channel tiles fit in L2 together.
const CONV_TILE: usize = 2048;

/// Eight-lane interleaved dot product. Deterministic (fixed lane assignment
/// and combine order) but not latency-bound like a single serial chain.
fn dot_interleaved<T: Elem>(xs: &[T], g: &[f64]) -> f64 {
    let mut a = [0.0f64; 8];
    let n8 = xs.len() / 8 * 8;
    for i in (0..n8).step_by(8) {
        for l in 0..8 {
            a[l] += xs[i + l].to_f64() * g[i + l];
        }
    }
    for i in n8..xs.len() {
        a[i - n8] += xs[i].to_f64() * g[i];
    }
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))
}

/// Eight-lane interleaved sum, same scheme as [`dot_interleaved`].
fn sum_interleaved(g: &[f64]) -> f64 {
    let mut a = [0.0f64; 8];
    let n8 = g.len() / 8 * 8;
    for i in (0..n8).step_by(8) {
        for l in 0..8 {
            a[l] += g[i + l];
        }
    }
    for i in n8..g.len() {
        a[i - n8] += g[i];
    }
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))
}

/// Same-padded convolution. x: (cin, spatial...), w: (cout, cin, kernel...),
/// b: (cout). Kernel dims must be odd; out-of-bounds taps read as zero.
///
/// Loops run tap-outer over contiguous in-bounds spans, so each output
/// element still accumulates bias first and taps in ascending order (the
/// frozen chain), while the inner loops stay branch-free.
pub(crate) fn conv_forward<T: Elem>(
    x: &TensorOf<T>,
    w: &TensorOf<T>,
    b: &TensorOf<T>,
    mask: Option<&[bool]>,
) -> TensorOf<T> {
    let krank = w.ndim() - 2;
    assert!(
        (1..=3).contains(&krank),
        "conv kernel rank {krank} unsupported"
    );
    assert_eq!(
        x.ndim(),
        krank + 1,
        "input rank {} does not match kernel rank {krank}",
        x.ndim()
    );
    let cout = w.shape()[0];
    let cin = w.shape()[1];
    let kshape = &w.shape()[2..];
    assert_eq!(x.shape()[0], cin, "input channels != kernel cin");
    assert_eq!(b.shape(), [cout], "bias shape mismatch");
    assert!(kshape.iter().all(|&k| k % 2 == 1), "kernel dims must be odd");

    let spatial = &x.shape()[1..];
    let splane: usize = spatial.iter().product();
    let ktotal: usize = kshape.iter().product();
    let taps = active_taps(cin, kshape, mask);
    let sdim = spatial.len();
    let [d0, d1, d2] = padded_dims(spatial);

    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out_shape = vec![cout];
    out_shape.extend_from_slice(spatial);
    let mut out = vec![T::default(); cout * splane];

    // 1x1 kernels are channel matmuls; tile pixels so the channel tiles stay
    // cache-resident instead of cycling whole planes per (co, ci) pair. Each
    // output element keeps the exact chain of the general path below: bias
    // first, then input channels in ascending order.
    if ktotal == 1 && mask.is_none() {
        let mut acc = vec![0.0f64; CONV_TILE.min(splane)];
        let mut lo = 0;
        while lo < splane {
            let n = CONV_TILE.min(splane - lo);
            let acc = &mut acc[..n];
            for co in 0..cout {
                acc.fill(bd[co].to_f64());
                for ci in 0..cin {
                    let wv = wd[co * cin + ci].to_f64();
                    let xs = &xd[ci * splane + lo..ci * splane + lo + n];
                    for (a, s) in acc.iter_mut().zip(xs) {
                        *a += wv * s.to_f64();
                    }
                }
                let oplane = &mut out[co * splane + lo..co * splane + lo + n];
                for (o, &a) in oplane.iter_mut().zip(acc.iter()) {
                    *o = T::from_f64(a);
                }
            }
            lo += n;
        }
        return TensorOf::from_vec(&out_shape, out);
    }

    let mut acc = vec![0.0f64; splane];

    for co in 0..cout {
        let wrow = &wd[co * cin * ktotal..(co + 1) * cin * ktotal];
        acc.fill(bd[co].to_f64());
        for &(ci, k, delta) in &taps {
            let wv = wrow[ci * ktotal + k].to_f64();
            let xp = &xd[ci * splane..(ci + 1) * splane];
            let [e0, e1, e2] = padded_delta(&delta, sdim);
            let (lo0, hi0) = axis_span(d0, e0);
            let (lo1, hi1) = axis_span(d1, e1);
            let (lo2, hi2) = axis_span(d2, e2);
            if lo2 >= hi2 {
                continue;
            }
            let off = (e0 * d1 as isize + e1) * d2 as isize + e2;
            for i0 in lo0..hi0 {
                for i1 in lo1..hi1 {
                    let base = (i0 * d1 + i1) * d2;
                    let dst = &mut acc[base + lo2..base + hi2];
                    let src = &xp[(base as isize + lo2 as isize + off) as usize..][..dst.len()];
                    for (a, s) in dst.iter_mut().zip(src) {
                        *a += wv * s.to_f64();
                    }
                }
            }
        }
        let oplane = &mut out[co * splane..(co + 1) * splane];
        for (o, &a) in oplane.iter_mut().zip(&acc) {
            *o = T::from_f64(a);
        }
    }
    TensorOf::from_vec(&out_shape, out)
}

/// One output element of the same convolution, replaying the identical
/// accumulation chain as [`conv_forward`]. `pos` is spatial coordinates.
pub(crate) fn conv_at<T: Elem>(
    x: &TensorOf<T>,
    w: &TensorOf<T>,
    b: &TensorOf<T>,
    taps: &[(usize, usize, [isize; 3])],
    co: usize,
    pos: &[usize],
) -> T {
    let cin = w.shape()[1];
    let ktotal: usize = w.shape()[2..].iter().product();
    let spatial = &x.shape()[1..];
    let splane: usize = spatial.iter().product();
    let strides = spatial_strides(spatial);
    let xd = x.data();
    let wrow = &w.data()[co * cin * ktotal..(co + 1) * cin * ktotal];
    let mut acc = b.data()[co].to_f64();
    for &(ci, k, delta) in taps {
        let mut off = 0usize;
        let mut ok = true;
        for i in 0..spatial.len() {
            let q = pos[i] as isize + delta[i];
            if q < 0 || q >= spatial[i] as isize {
                ok = false;
                break;
            }
            off += q as usize * strides[i];
        }
        if ok {
            acc += wrow[ci * ktotal + k].to_f64() * xd[ci * splane + off].to_f64();
        }
    }
    T::from_f64(acc)
}

/// Backward pass of the same convolution. `dout` is (cout, spatial) flattened;
/// any of dx/dw/db may be absent. Accumulates (+=) in f64.
pub(crate) fn conv_backward<T: Elem>(
    x: &TensorOf<T>,
    w: &TensorOf<T>,
    mask: Option<&[bool]>,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let cout = w.shape()[0];
    let cin = w.shape()[1];
    let kshape = &w.shape()[2..];
    let ktotal: usize = kshape.iter().product();
    let spatial = &x.shape()[1..];
    let splane: usize = spatial.iter().product();
    let sdim = spatial.len();
    let taps = active_taps(cin, kshape, mask);
    let [d0, d1, d2] = padded_dims(spatial);

    let xd = x.data();
    let wd = w.data();

    // Same pixel tiling as the 1x1 forward path: the per-element dx chain
    // stays ascending in co, only the dw partial-sum grouping changes
    // (chunk-serial, still deterministic).
    if ktotal == 1 && mask.is_none() {
        if let Some(db) = db.as_deref_mut() {
            for co in 0..cout {
                db[co] += sum_interleaved(&dout[co * splane..(co + 1) * splane]);
            }
        }
        let mut lo = 0;
        while lo < splane {
            let n = CONV_TILE.min(splane - lo);
            for co in 0..cout {
                let g = &dout[co * splane + lo..co * splane + lo + n];
                for ci in 0..cin {
                    let xs = &xd[ci * splane + lo..ci * splane + lo + n];
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[co * cin + ci] += dot_interleaved(xs, g);
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = wd[co * cin + ci].to_f64();
                        let dxs = &mut dx[ci * splane + lo..ci * splane + lo + n];
                        for (d, &gi) in dxs.iter_mut().zip(g) {
                            *d += wv * gi;
                        }
                    }
                }
            }
            lo += n;
        }
        return;
    }

    for co in 0..cout {
        let dplane = &dout[co * splane..(co + 1) * splane];
        if let Some(db) = db.as_deref_mut() {
            db[co] += sum_interleaved(dplane);
        }
        for &(ci, k, delta) in &taps {
            let wval = wd[co * cin * ktotal + ci * ktotal + k].to_f64();
            let xplane = &xd[ci * splane..(ci + 1) * splane];
            let [e0, e1, e2] = padded_delta(&delta, sdim);
            let (lo0, hi0) = axis_span(d0, e0);
            let (lo1, hi1) = axis_span(d1, e1);
            let (lo2, hi2) = axis_span(d2, e2);
            if lo2 >= hi2 {
                continue;
            }
            let off = (e0 * d1 as isize + e1) * d2 as isize + e2;
            let mut wacc = 0.0f64;
            for i0 in lo0..hi0 {
                for i1 in lo1..hi1 {
                    let base = (i0 * d1 + i1) * d2;
                    let sbase = (base as isize + lo2 as isize + off) as usize;
                    let n = hi2 - lo2;
                    let g = &dplane[base + lo2..base + hi2];
                    let xs = &xplane[sbase..sbase + n];
                    wacc += dot_interleaved(xs, g);
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxs = &mut dx[ci * splane + sbase..ci * splane + sbase + n];
                        for (d, gi) in dxs.iter_mut().zip(g) {
                            *d += wval * gi;
                        }
                    }
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                dw[co * cin * ktotal + ci * ktotal + k] += wacc;
            }
        }
    }
}

/// Per-axis linear-interpolation table with half-pixel centers and clamped
/// borders: source coordinate of dst index d is (d + 0.5) * src/dst - 0.5.
pub(crate) fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    assert!(src >= 1 && dst >= 1, "resize axes must be nonempty");
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = (d as f64 + 0.5) * scale - 0.5;
            let f = s.floor();
            let w = s - f;
            let i0 = (f.max(0.0) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            // Clamped border: both taps collapse to the edge sample.
            let w = if f < 0.0 { 0.0 } else { w };
            (i0, i1, w)
        })
        .collect()
}

/// Linear resize (any direction) of a rank-1..3 tensor treated as pure
/// spatial data.
pub(crate) fn resize_linear<T: Elem>(src: &TensorOf<T>, dst_shape: &[usize]) -> TensorOf<T> {
    assert_eq!(
        src.ndim(),
        dst_shape.len(),
        "resize rank mismatch: {} vs {}",
        src.ndim(),
        dst_shape.len()
    );
    let xd = src.data();
    match *src.shape() {
        [sw] => {
            let tw = axis_table(sw, dst_shape[0]);
            let out: Vec<T> = tw
                .iter()
                .map(|&(x0, x1, wx)| {
                    let v = (1.0 - wx) * xd[x0].to_f64() + wx * xd[x1].to_f64();
                    T::from_f64(v)
                })
                .collect();
            TensorOf::from_vec(dst_shape, out)
        }
        [sh, sw] => {
            let th = axis_table(sh, dst_shape[0]);
            let tw = axis_table(sw, dst_shape[1]);
            let mut out = Vec::with_capacity(dst_shape.iter().product());
            for &(y0, y1, wy) in &th {
                for &(x0, x1, wx) in &tw {
                    let a = xd[y0 * sw + x0].to_f64();
                    let b = xd[y0 * sw + x1].to_f64();
                    let c = xd[y1 * sw + x0].to_f64();
                    let d = xd[y1 * sw + x1].to_f64();
                    let top = (1.0 - wx) * a + wx * b;
                    let bot = (1.0 - wx) * c + wx * d;
                    out.push(T::from_f64((1.0 - wy) * top + wy * bot));
                }
            }
            TensorOf::from_vec(dst_shape, out)
        }
        [st, sh, sw] => {
            let tt = axis_table(st, dst_shape[0]);
            let th = axis_table(sh, dst_shape[1]);
            let tw = axis_table(sw, dst_shape[2]);
            let mut out = Vec::with_capacity(dst_shape.iter().product());
            for &(z0, z1, wz) in &tt {
                for &(y0, y1, wy) in &th {
                    for &(x0, x1, wx) in &tw {
                        let p = |z: usize, y: usize, x: usize| xd[(z * sh + y) * sw + x].to_f64();
                        let f0 = (1.0 - wy) * ((1.0 - wx) * p(z0, y0, x0) + wx * p(z0, y0, x1))
                            + wy * ((1.0 - wx) * p(z0, y1, x0) + wx * p(z0, y1, x1));
                        let f1 = (1.0 - wy) * ((1.0 - wx) * p(z1, y0, x0) + wx * p(z1, y0, x1))
                            + wy * ((1.0 - wx) * p(z1, y1, x0) + wx * p(z1, y1, x1));
                        out.push(T::from_f64((1.0 - wz) * f0 + wz * f1));
                    }
                }
            }
            TensorOf::from_vec(dst_shape, out)
        }
        _ => panic!("resize supports rank 1..3, got {:?}", src.shape()),
    }
}

/// Backward of [`resize_linear`]: scatters `dout` (dst-shaped, flattened)
/// into `dsrc` (src-shaped, flattened) with the same interpolation weights.
pub(crate) fn resize_backward(
    src_shape: &[usize],
    dst_shape: &[usize],
    dout: &[f64],
    dsrc: &mut [f64],
) {
    match *src_shape {
        [sw] => {
            let tw = axis_table(sw, dst_shape[0]);
            for (d, &(x0, x1, wx)) in tw.iter().enumerate() {
                let g = dout[d];
                dsrc[x0] += (1.0 - wx) * g;
                dsrc[x1] += wx * g;
            }
        }
        [sh, sw] => {
            let th = axis_table(sh, dst_shape[0]);
            let tw = axis_table(sw, dst_shape[1]);
            let dw = dst_shape[1];
            for (dy, &(y0, y1, wy)) in th.iter().enumerate() {
                for (dx, &(x0, x1, wx)) in tw.iter().enumerate() {
                    let g = dout[dy * dw + dx];
                    dsrc[y0 * sw + x0] += (1.0 - wy) * (1.0 - wx) * g;
                    dsrc[y0 * sw + x1] += (1.0 - wy) * wx * g;
                    dsrc[y1 * sw + x0] += wy * (1.0 - wx) * g;
                    dsrc[y1 * sw + x1] += wy * wx * g;
                }
            }
        }
        [st, sh, sw] => {
            let tt = axis_table(st, dst_shape[0]);
            let th = axis_table(sh, dst_shape[1]);
            let tw = axis_table(sw, dst_shape[2]);
            let (dh, dwd) = (dst_shape[1], dst_shape[2]);
            for (dz, &(z0, z1, wz)) in tt.iter().enumerate() {
                for (dy, &(y0, y1, wy)) in th.iter().enumerate() {
                    for (dx, &(x0, x1, wx)) in tw.iter().enumerate() {
                        let g = dout[(dz * dh + dy) * dwd + dx];
                        for (zi, zw) in [(z0, 1.0 - wz), (z1, wz)] {
                            for (yi, yw) in [(y0, 1.0 - wy), (y1, wy)] {
                                for (xi, xw) in [(x0, 1.0 - wx), (x1, wx)] {
                                    dsrc[(zi * sh + yi) * sw + xi] += zw * yw * xw * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => panic!("resize supports rank 1..3, got {src_shape:?}"),
    }
}

/// Strictly-causal raster mask for an l x l context window: taps before the
/// center in raster order are on, the center and everything after are off.
pub fn causal_mask_2d(l: usize) -> Vec<bool> {
    assert!(l % 2 == 1, "context window must be odd, got {l}");
    let center = (l * l) / 2;
    (0..l * l).map(|k| k < center).collect()
}

/// Causal mask for a (kt, kh, kw) spatio-temporal window centered on the
/// current frame: full past frames, raster-causal current frame, no future.
pub fn causal_mask_3d(kt: usize, kh: usize, kw: usize) -> Vec<bool> {
    assert!(
        kt % 2 == 1 && kh % 2 == 1 && kw % 2 == 1,
        "context window dims must be odd"
    );
    let plane = kh * kw;
    let center_t = kt / 2;
    let center_p = plane / 2;
    (0..kt * plane)
        .map(|k| {
            let t = k / plane;
            let p = k % plane;
            t < center_t || (t == center_t && p < center_p)
        })
        .collect()
}

/// Dense layer on a single feature vector: bias-first accumulation, input
/// index ascending; identical chain to a 1x1 convolution at one position.
pub fn dense<T: Elem>(w: &TensorOf<T>, b: &TensorOf<T>, x: &[T]) -> Vec<T> {
    assert_eq!(w.ndim(), 2, "dense weight must be (out, in)");
    let (out_n, in_n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), in_n, "dense input length mismatch");
    assert_eq!(b.shape(), [out_n], "dense bias shape mismatch");
    let wd = w.data();
    (0..out_n)
        .map(|o| {
            let mut acc = b.data()[o].to_f64();
            for i in 0..in_n {
                acc += wd[o * in_n + i].to_f64() * x[i].to_f64();
            }
            T::from_f64(acc)
        })
        .collect()
}

/// Plain matrix-vector product in f64 (no bias), row-major w: (out, in).
pub fn matvec(w: &[f64], out_n: usize, in_n: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), out_n * in_n);
    assert_eq!(x.len(), in_n);
    (0..out_n)
        .map(|o| {
            let mut acc = 0.0f64;
            for i in 0..in_n {
                acc += w[o * in_n + i] * x[i];
            }
            acc
        })
        .collect()
}
