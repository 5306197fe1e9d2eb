//! Bitstream container: header, parameter segment, latent segment, and the
//! full decoder.
//!
//! Stream layout:
//!
//! ```text
//! header                        (see `header`)
//! parameter segment
//!   per group: max |int| (16 bits), scale-grid index (10 bits)
//!   zero padding to a byte boundary
//!   blob length u32, range-coded blob
//! latent segment
//!   per grid: checksum u32 over the decoded integers
//!   blob length u32, range-coded blob
//! ```
//!
//! Everything the coder consumes (Laplace locations, scales, tables) is
//! derived in f64 through one frozen expression order, so encoder and
//! decoder walk identical table sequences on any platform. Decoded
//! parameters and latents equal the encoder's quantized values exactly; the
//! decoded reconstruction is bit-identical to the encoder's own forward
//! pass on those values.

mod bits;
pub mod header;
pub mod range;
pub mod table;

use std::time::{Duration, Instant};

use crate::config::PARAM_STEPS;
use crate::error::{Error, Result};
use crate::model::entropy::{coded_rate_bits, for_each_pos, GridCoder, RateBreakdown};
use crate::model::{init_model, GroupKind, Model};
use crate::quant::round_half_away;
use crate::tensor::TensorOf;
use crate::{laplace, math};

use bits::{BitReader, BitWriter};
use header::Header;
use range::{RangeDecoder, RangeEncoder};
use table::{laplace_table, quantize_scale, scale_for_index};

/// Byte and ideal-bit accounting for one encoded stream.
#[derive(Debug, Clone)]
pub struct SizeBreakdown {
    pub header_bytes: usize,
    pub param_group_header_bytes: usize,
    pub param_blob_bytes: usize,
    pub latent_checksum_bytes: usize,
    pub latent_blob_bytes: usize,
    /// -sum log2 P of the parameter integers under the quantized scales
    /// and the coder's finite alphabet.
    pub param_bits_ideal: f64,
    /// -sum log2 P of the latents as the coder's tables charge them.
    pub latent_rate: RateBreakdown,
}

impl SizeBreakdown {
    /// Two u32 blob-length fields.
    const FRAMING: usize = 8;

    pub fn total_bytes(&self) -> usize {
        self.header_bytes
            + self.param_group_header_bytes
            + self.param_blob_bytes
            + self.latent_checksum_bytes
            + self.latent_blob_bytes
            + Self::FRAMING
    }

    /// Predicted stream size: exact framing plus entropy estimates of the
    /// two coded payloads.
    pub fn estimated_total_bytes(&self) -> f64 {
        (self.header_bytes
            + self.param_group_header_bytes
            + self.latent_checksum_bytes
            + Self::FRAMING) as f64
            + self.param_bits_ideal / 8.0
            + self.latent_rate.total_bits / 8.0
    }
}

/// Wall-clock breakdown of one decode.
#[derive(Debug, Clone, Default)]
pub struct DecodeTimings {
    pub header: Duration,
    pub params: Duration,
    pub latents: Duration,
    pub synthesis: Duration,
}

impl DecodeTimings {
    pub fn total(&self) -> Duration {
        self.header + self.params + self.latents + self.synthesis
    }
}

/// Result of decoding one stream.
pub struct Decoded {
    pub header: Header,
    /// Model state as the encoder quantized it (latents in step units).
    pub model: Model,
    /// Synthesized output clipped to [0, 1].
    pub reconstruction: TensorOf<f32>,
    pub timings: DecodeTimings,
    /// Multiply-accumulate count of the decode's network and resampling
    /// work (entropy rollout + synthesis), for cross-checking capacity
    /// estimates.
    pub macs: u64,
}

/// Per-group header: max |int| (16 bits) plus scale-grid index (10 bits).
const GROUP_HEAD_BITS: usize = 26;

/// One parameter group's coding plan.
struct GroupPlan {
    ints: Vec<i64>,
    max_mag: i64,
    scale_idx: usize,
    /// Quantized Laplace scale in step units.
    b_int: f64,
}

fn group_step(kind: GroupKind, w_idx: usize, b_idx: usize) -> f64 {
    match kind {
        GroupKind::Weight => PARAM_STEPS[w_idx],
        GroupKind::Bias => PARAM_STEPS[b_idx],
    }
}

/// Empirical Laplace scale of a quantized group: std(p)/sqrt(2), floored at
/// the scale grid's minimum, then snapped to the grid. Returned in value
/// units together with its grid index.
fn empirical_scale(ints: &[i64], step: f64) -> (usize, f64) {
    let n = ints.len() as f64;
    let mean = ints.iter().map(|&k| k as f64).sum::<f64>() * step / n;
    let var = ints
        .iter()
        .map(|&k| {
            let d = k as f64 * step - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let b = math::sqrt(var) * std::f64::consts::FRAC_1_SQRT_2;
    let idx = quantize_scale(b.max(1e-6));
    (idx, scale_for_index(idx))
}

fn plan_params(model: &Model, w_idx: usize, b_idx: usize) -> Result<Vec<GroupPlan>> {
    model
        .param_groups()
        .iter()
        .map(|g| {
            let step = group_step(g.kind, w_idx, b_idx);
            let ints: Vec<i64> = g
                .values
                .iter()
                .map(|&v| round_half_away(v / step) as i64)
                .collect();
            let max_mag = ints.iter().map(|k| k.abs()).max().unwrap_or(0);
            if max_mag > u16::MAX as i64 {
                return Err(Error::invalid(format!(
                    "parameter magnitude {max_mag} exceeds the coder alphabet at step {step}"
                )));
            }
            let (scale_idx, b) = empirical_scale(&ints, step);
            Ok(GroupPlan {
                ints,
                max_mag,
                scale_idx,
                b_int: b / step,
            })
        })
        .collect()
}

/// One candidate parameter quantization: the dequantized group values plus
/// the size accounting the step search scores, with nothing range-coded.
pub(crate) struct ParamQuant {
    /// Dequantized values (integer times step), one vec per group in the
    /// frozen serialization order.
    pub groups: Vec<Vec<f64>>,
    /// -sum log2 P of the integers under the snapped per-group scales and
    /// the coder's finite alphabet.
    pub ideal_bits: f64,
    /// Bit-packed per-group headers, padded to a byte boundary.
    pub header_bits: usize,
}

/// Quantizes every parameter group at the given step indices. Errors when a
/// group magnitude overflows the 16-bit alphabet.
pub(crate) fn quantize_param_groups(model: &Model, w_idx: usize, b_idx: usize) -> Result<ParamQuant> {
    let plans = plan_params(model, w_idx, b_idx)?;
    let kinds: Vec<GroupKind> = model.param_groups().iter().map(|g| g.kind).collect();
    let mut groups = Vec::with_capacity(plans.len());
    let mut ideal_bits = 0.0f64;
    for (p, &kind) in plans.iter().zip(&kinds) {
        let step = group_step(kind, w_idx, b_idx);
        groups.push(p.ints.iter().map(|&k| k as f64 * step).collect());
        for &k in &p.ints {
            ideal_bits += laplace::coded_bits(k as f64, 0.0, p.b_int, p.max_mag as f64);
        }
    }
    Ok(ParamQuant {
        groups,
        ideal_bits,
        header_bits: (plans.len() * GROUP_HEAD_BITS).div_ceil(8) * 8,
    })
}

/// Parameter segment bytes (group headers + blob) plus the ideal payload
/// bits under the quantized scales.
fn write_params(plans: &[GroupPlan]) -> Result<(Vec<u8>, Vec<u8>, f64)> {
    let mut bw = BitWriter::new();
    for p in plans {
        bw.push(p.max_mag as u64, 16);
        bw.push(p.scale_idx as u64, 10);
    }
    let heads = bw.into_bytes();
    let mut enc = RangeEncoder::new();
    let mut ideal = 0.0f64;
    for p in plans {
        let t = laplace_table(0.0, p.b_int, p.max_mag)?;
        for &k in &p.ints {
            enc.encode(&t, (k + p.max_mag) as usize);
            ideal += laplace::coded_bits(k as f64, 0.0, p.b_int, p.max_mag as f64);
        }
    }
    Ok((heads, enc.finish(), ideal))
}

/// Reads the parameter segment into per-group dequantized values.
/// `sizes`/`kinds` come from the model skeleton; consumed byte count is
/// returned so the caller can locate the latent segment.
fn read_params(
    buf: &[u8],
    base: usize,
    sizes: &[usize],
    kinds: &[GroupKind],
    w_idx: usize,
    b_idx: usize,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut br = BitReader::new(buf);
    let mut plans = Vec::with_capacity(sizes.len());
    for _ in sizes {
        let max_mag = br.pull(16).map_err(|e| at(e, base))? as i64;
        let scale_idx = br.pull(10).map_err(|e| at(e, base))? as usize;
        plans.push((max_mag, scale_idx));
    }
    br.align();
    let mut pos = br.consumed();
    let blob_len = read_u32(buf, &mut pos, base)? as usize;
    let end = pos
        .checked_add(blob_len)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::corrupt(base + pos, "parameter blob past end of stream"))?;
    let mut dec = RangeDecoder::new(&buf[pos..end]);
    let mut groups = Vec::with_capacity(sizes.len());
    for (gi, (&size, &kind)) in sizes.iter().zip(kinds).enumerate() {
        let (max_mag, scale_idx) = plans[gi];
        let step = group_step(kind, w_idx, b_idx);
        let b_int = scale_for_index(scale_idx) / step;
        let t = laplace_table(0.0, b_int, max_mag)?;
        let vals: Vec<f64> = (0..size)
            .map(|_| (dec.decode(&t) as i64 - max_mag) as f64 * step)
            .collect();
        groups.push(vals);
    }
    Ok((groups, end))
}

fn at(e: Error, base: usize) -> Error {
    match e {
        Error::CorruptBitstream { offset, reason } => Error::corrupt(base + offset, reason),
        other => other,
    }
}

fn read_u32(buf: &[u8], pos: &mut usize, base: usize) -> Result<u32> {
    let end = pos
        .checked_add(4)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::corrupt(base + *pos, "truncated length field"))?;
    let v = u32::from_le_bytes(buf[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

/// FNV-1a over the little-endian bytes of each latent integer.
fn grid_checksum(ints: &[i64]) -> u32 {
    let mut h = 0x811C_9DC5u32;
    for &k in ints {
        for b in (k as i32).to_le_bytes() {
            h = (h ^ b as u32).wrapping_mul(16_777_619);
        }
    }
    h
}

fn scaled_by(t: &TensorOf<f32>, s: f64) -> TensorOf<f32> {
    let data: Vec<f32> = t.data().iter().map(|&v| (v as f64 * s) as f32).collect();
    TensorOf::from_vec(t.shape(), data)
}

/// Latent alphabet bounds: per grid, max(1, max |int|).
pub(crate) fn grid_alphabet(grids: &[TensorOf<f32>]) -> Result<Vec<u16>> {
    grids
        .iter()
        .map(|g| {
            let m = g
                .data()
                .iter()
                .map(|&v| round_half_away(v as f64) as i64)
                .map(i64::abs)
                .max()
                .unwrap_or(0)
                .max(1);
            u16::try_from(m)
                .map_err(|_| Error::invalid(format!("latent magnitude {m} exceeds the coder alphabet")))
        })
        .collect()
}

/// Latent segment: per-grid checksums then one range-coded blob covering
/// all grids in decode order.
fn write_latents(model: &Model, grid_max: &[u16]) -> Result<(Vec<u8>, Vec<u8>)> {
    let cfg = &model.config;
    let mut checksums = Vec::with_capacity(4 * model.grids.len());
    let mut enc = RangeEncoder::new();
    for (n, grid) in model.grids.iter().enumerate() {
        let a = grid_max[n] as i64;
        let ints: Vec<i64> = grid
            .data()
            .iter()
            .map(|&v| round_half_away(v as f64) as i64)
            .collect();
        checksums.extend_from_slice(&grid_checksum(&ints).to_le_bytes());
        let prev = (cfg.prev_grid_conditioning && n > 0)
            .then(|| scaled_by(&model.grids[n - 1], cfg.delta));
        let mut coder = GridCoder::new(cfg, model.entropy.net_for_grid(n), grid.shape(), prev.as_ref());
        for (i, &k) in ints.iter().enumerate() {
            coder.place(i, k as f64);
        }
        let mut bad = None;
        for_each_pos(grid.shape(), |pos, lin| {
            if bad.is_some() {
                return;
            }
            let (mu, sigma) = coder.mu_sigma(pos);
            match laplace_table(mu, sigma, a) {
                Ok(t) => enc.encode(&t, (ints[lin] + a) as usize),
                Err(e) => bad = Some(e),
            }
        });
        if let Some(e) = bad {
            return Err(e);
        }
    }
    Ok((checksums, enc.finish()))
}

/// Serializes a quantized model. Latents must already be integers in step
/// units and parameters exact multiples of the steps named by the indices.
pub fn encode_bitstream(
    model: &Model,
    config_id: u16,
    w_idx: usize,
    b_idx: usize,
) -> Result<(Vec<u8>, SizeBreakdown)> {
    let cfg = &model.config;
    if crate::model::needs_mask_learning(cfg) && model.mask_offsets.is_none() {
        return Err(Error::invalid(
            "learned-mask config without selected mask offsets",
        ));
    }
    let grid_max = grid_alphabet(&model.grids)?;
    let head = Header {
        media: cfg.media,
        dims: model.dims.clone(),
        config_id,
        weight_step_idx: w_idx as u8,
        bias_step_idx: b_idx as u8,
        grid_max: grid_max.clone(),
        mask_offsets: model.mask_offsets.clone(),
    }
    .write();

    let plans = plan_params(model, w_idx, b_idx)?;
    let (group_heads, param_blob, param_bits_ideal) = write_params(&plans)?;
    let (checksums, latent_blob) = write_latents(model, &grid_max)?;
    let latent_rate = coded_rate_bits(cfg, &model.entropy, &model.grids, &grid_max);

    let breakdown = SizeBreakdown {
        header_bytes: head.len(),
        param_group_header_bytes: group_heads.len(),
        param_blob_bytes: param_blob.len(),
        latent_checksum_bytes: checksums.len(),
        latent_blob_bytes: latent_blob.len(),
        param_bits_ideal,
        latent_rate,
    };
    let mut out = head;
    out.extend_from_slice(&group_heads);
    out.extend_from_slice(&(param_blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&param_blob);
    out.extend_from_slice(&checksums);
    out.extend_from_slice(&(latent_blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&latent_blob);
    Ok((out, breakdown))
}

fn resample_macs(rank: usize, src: usize, dst: usize) -> u64 {
    // Linear interpolation costed at the finer of the two resolutions.
    (if rank == 2 { 8 } else { 16 }) * src.max(dst) as u64
}

fn entropy_position_macs(net: &crate::model::EntropyNet<f32>) -> u64 {
    let live = net.mask.iter().filter(|&&b| b).count() as u64;
    let mut cin = net.first.w.shape()[0] as u64;
    let mut macs = live * cin;
    for l in &net.rest {
        let cout = l.w.shape()[0] as u64;
        macs += cin * cout;
        cin = cout;
    }
    macs
}

fn synthesis_macs(model: &Model) -> u64 {
    let rank = model.dims.len();
    let npix: usize = model.dims.iter().product();
    let mut macs = 0u64;
    for g in &model.grids {
        if g.shape() != model.dims.as_slice() {
            macs += resample_macs(rank, g.numel(), npix);
        }
    }
    for l in &model.synthesis.stack {
        macs += (l.w.shape()[0] * l.w.shape()[1] * npix) as u64;
    }
    for l in &model.synthesis.residual {
        let sh = l.w.shape();
        let taps: usize = sh[2..].iter().product();
        macs += (sh[0] * sh[1] * taps * npix) as u64;
    }
    macs
}

/// Decodes a full stream: header, parameters, autoregressive latent
/// rollout, synthesis, clip. Returns the reconstruction together with the
/// decoded model state, per-phase timings, and the MAC count of the
/// network/resampling work performed.
pub fn decode(buf: &[u8]) -> Result<Decoded> {
    let t0 = Instant::now();
    let (head, mut pos) = Header::read(buf)?;
    let cfg = crate::config::config_by_id(head.config_id)?;
    cfg.validate_dims(&head.dims)
        .map_err(|e| Error::corrupt(6, e.to_string()))?;
    if crate::model::needs_mask_learning(&cfg) && head.mask_offsets.is_none() {
        return Err(Error::corrupt(
            pos,
            "learned-mask config but no mask offsets in header",
        ));
    }
    let mut model: Model = init_model(&cfg, &head.dims, 0, None, head.mask_offsets.clone())?;
    let mut timings = DecodeTimings {
        header: t0.elapsed(),
        ..DecodeTimings::default()
    };

    let t1 = Instant::now();
    let skeleton = model.param_groups();
    let sizes: Vec<usize> = skeleton.iter().map(|g| g.values.len()).collect();
    let kinds: Vec<GroupKind> = skeleton.iter().map(|g| g.kind).collect();
    let (groups, after_params) = read_params(
        &buf[pos..],
        pos,
        &sizes,
        &kinds,
        head.weight_step_idx as usize,
        head.bias_step_idx as usize,
    )?;
    model.set_param_groups(&groups);
    pos += after_params;
    timings.params = t1.elapsed();

    let t2 = Instant::now();
    let mut macs = 0u64;
    let shapes = cfg.grid_shapes(&head.dims);
    let mut checksums = Vec::with_capacity(shapes.len());
    for _ in &shapes {
        checksums.push(read_u32(buf, &mut pos, 0)?);
    }
    let blob_len = read_u32(buf, &mut pos, 0)? as usize;
    let end = pos
        .checked_add(blob_len)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::corrupt(pos, "latent blob past end of stream"))?;
    let mut dec = RangeDecoder::new(&buf[pos..end]);
    let mut prev_scaled: Option<TensorOf<f32>> = None;
    for (n, shape) in shapes.iter().enumerate() {
        let a = head.grid_max[n] as i64;
        let numel: usize = shape.iter().product();
        let prev = (cfg.prev_grid_conditioning && n > 0)
            .then(|| prev_scaled.take().expect("previous grid decoded"));
        if let Some(p) = &prev {
            macs += resample_macs(shape.len(), p.numel(), numel);
        }
        let net = model.entropy.net_for_grid(n);
        let mut coder = GridCoder::new(&cfg, net, shape, prev.as_ref());
        let pos_macs = entropy_position_macs(net);
        let mut ints = vec![0i64; numel];
        let mut bad = None;
        for_each_pos(shape, |p, lin| {
            if bad.is_some() {
                return;
            }
            let (mu, sigma) = coder.mu_sigma(p);
            match laplace_table(mu, sigma, a) {
                Ok(t) => {
                    let k = dec.decode(&t) as i64 - a;
                    coder.place(lin, k as f64);
                    ints[lin] = k;
                }
                Err(e) => bad = Some(e),
            }
        });
        if let Some(e) = bad {
            return Err(e);
        }
        macs += pos_macs * numel as u64;
        if grid_checksum(&ints) != checksums[n] {
            return Err(Error::corrupt(
                pos,
                format!("latent checksum mismatch on grid {n}"),
            ));
        }
        let data: Vec<f32> = ints.iter().map(|&k| k as f32).collect();
        let grid = TensorOf::from_vec(shape, data);
        if cfg.prev_grid_conditioning {
            prev_scaled = Some(scaled_by(&grid, cfg.delta));
        }
        model.grids[n] = grid;
    }
    timings.latents = t2.elapsed();

    let t3 = Instant::now();
    let raw = crate::model::synthesis::synthesize(&cfg, &model.synthesis, &model.grids, &head.dims);
    macs += synthesis_macs(&model);
    let clipped: Vec<f32> = raw.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    let reconstruction = TensorOf::from_vec(raw.shape(), clipped);
    timings.synthesis = t3.elapsed();

    Ok(Decoded {
        header: head,
        model,
        reconstruction,
        timings,
        macs,
    })
}

/// Encoder-side counterpart of the decoded reconstruction: synthesize the
/// quantized state and clip.
pub fn reconstruct(model: &Model) -> TensorOf<f32> {
    let raw = crate::model::synthesis::synthesize(&model.config, &model.synthesis, &model.grids, &model.dims);
    let clipped: Vec<f32> = raw.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    TensorOf::from_vec(raw.shape(), clipped)
}

/// True payload size of the two coded blobs, in bits.
pub fn payload_bits(b: &SizeBreakdown) -> f64 {
    ((b.param_blob_bytes + b.latent_blob_bytes) * 8) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config;
    use crate::quant::quantize_latents;
    use crate::rng;
    use rand::RngCore;

    /// Kodak-shaped model with random integer latents and noisy parameters,
    /// quantized to the given step indices.
    fn quantized_model(config_id: u16, dims: &[usize], seed: u64, w_idx: usize, b_idx: usize) -> Model {
        let cfg = config::config_by_id(config_id).unwrap();
        let mut m: Model = init_model(&cfg, dims, seed, Some([0.4, 0.5, 0.6]), None).unwrap();
        let mut r = rng::stream(seed, "coding-test", 1);
        for g in &mut m.grids {
            for v in g.data_mut() {
                *v = ((r.next_u64() % 9) as f64 - 4.0) as f32;
            }
        }
        for g in &mut m.grids {
            *g = quantize_latents(g);
        }
        // Perturb parameters so groups are not at init, then snap to steps.
        let mut groups: Vec<Vec<f64>> = m.param_groups().iter().map(|g| g.values.clone()).collect();
        let kinds: Vec<GroupKind> = m.param_groups().iter().map(|g| g.kind).collect();
        for (g, kind) in groups.iter_mut().zip(&kinds) {
            let step = group_step(*kind, w_idx, b_idx);
            for v in g.iter_mut() {
                let noise = (r.next_u64() % 2001) as f64 / 1000.0 - 1.0;
                *v = round_half_away((*v + 0.02 * noise) / step) * step;
            }
        }
        m.set_param_groups(&groups);
        m
    }

    #[test]
    fn parameter_segment_round_trips_and_sizes_to_its_estimate() {
        let m = quantized_model(1, &[64, 96], 5, 2, 1);
        let plans = plan_params(&m, 2, 1).unwrap();
        let (heads, blob, ideal) = write_params(&plans).unwrap();
        let mut seg = heads.clone();
        seg.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        seg.extend_from_slice(&blob);

        let skeleton = m.param_groups();
        let sizes: Vec<usize> = skeleton.iter().map(|g| g.values.len()).collect();
        let kinds: Vec<GroupKind> = skeleton.iter().map(|g| g.kind).collect();
        let (groups, used) = read_params(&seg, 0, &sizes, &kinds, 2, 1).unwrap();
        assert_eq!(used, seg.len());
        let mut decoded = m.clone();
        decoded.set_param_groups(&groups);
        for (g, s) in decoded.param_groups().iter().zip(&skeleton) {
            assert_eq!(g.values, s.values, "group of kind {:?}", s.kind);
        }
        let bits = (blob.len() * 8) as f64;
        assert!(ideal > 10_000.0, "want a nontrivial payload, got {ideal}");
        assert!(
            bits <= ideal * 1.02 && bits >= ideal * 0.98,
            "payload {bits} bits vs ideal {ideal}"
        );
    }

    #[test]
    fn all_zero_group_takes_minimum_scale_and_negligible_space() {
        let ints = vec![0i64; 512];
        let (idx, b) = empirical_scale(&ints, 1e-3);
        assert_eq!(idx, 0);
        assert!((b - 1e-6).abs() < 1e-12);
        let t = laplace_table(0.0, b / 1e-3, 0).unwrap();
        let mut enc = RangeEncoder::new();
        for _ in &ints {
            enc.encode(&t, 0);
        }
        assert!(enc.finish().len() <= 8);
    }

    #[test]
    fn zero_latents_cost_about_eight_bits_each() {
        let cfg = config::config_by_id(1).unwrap();
        let m: Model = init_model(&cfg, &[64, 96], 3, None, None).unwrap();
        let grid_max = grid_alphabet(&m.grids).unwrap();
        assert!(grid_max.iter().all(|&a| a == 1));
        let (_, blob) = write_latents(&m, &grid_max).unwrap();
        let latents: usize = m.grids.iter().map(|g| g.numel()).sum();
        let per = (blob.len() * 8) as f64 / latents as f64;
        assert!(
            (per - 8.2313).abs() < 0.05,
            "fresh-model latents cost {per} bits each"
        );
    }

    #[test]
    fn latent_payload_tracks_the_rate_estimate() {
        for (id, dims) in [(1u16, vec![64usize, 96]), (20, vec![64, 96])] {
            let m = quantized_model(id, &dims, 9, 3, 3);
            let grid_max = grid_alphabet(&m.grids).unwrap();
            let (_, blob) = write_latents(&m, &grid_max).unwrap();
            let est = coded_rate_bits(&m.config, &m.entropy, &m.grids, &grid_max).total_bits;
            let bits = (blob.len() * 8) as f64;
            assert!(est > 10_000.0, "config {id}: payload too small ({est})");
            assert!(
                (bits - est).abs() <= est * 0.01 + 128.0,
                "config {id}: payload {bits} vs estimate {est}"
            );
        }
    }

    #[test]
    fn full_stream_round_trips_bit_exactly() {
        let m = quantized_model(20, &[64, 96], 17, 2, 4);
        let (bytes, sizes) = encode_bitstream(&m, 20, 2, 4).unwrap();
        assert_eq!(bytes.len(), sizes.total_bytes());
        let est = sizes.estimated_total_bytes();
        assert!(
            (bytes.len() as f64 - est).abs() <= est * 0.01 + 64.0,
            "stream {} bytes vs estimate {est}",
            bytes.len()
        );

        let d = decode(&bytes).unwrap();
        assert_eq!(d.header.config_id, 20);
        for (a, b) in d.model.grids.iter().zip(&m.grids) {
            assert_eq!(a.data(), b.data());
        }
        let got: Vec<Vec<f64>> = d.model.param_groups().iter().map(|g| g.values.clone()).collect();
        let want: Vec<Vec<f64>> = m.param_groups().iter().map(|g| g.values.clone()).collect();
        assert_eq!(got, want);

        let enc_side = reconstruct(&m);
        assert_eq!(enc_side.shape(), d.reconstruction.shape());
        for (x, y) in enc_side.data().iter().zip(d.reconstruction.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        let again = decode(&bytes).unwrap();
        for (x, y) in again.reconstruction.data().iter().zip(d.reconstruction.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(again.macs, d.macs);
        assert!(d.macs > 0);
    }

    #[test]
    fn per_grid_entropy_video_round_trips() {
        let m = quantized_model(43, &[16, 32, 32], 23, 1, 1);
        let (bytes, _) = encode_bitstream(&m, 43, 1, 1).unwrap();
        let d = decode(&bytes).unwrap();
        for (a, b) in d.model.grids.iter().zip(&m.grids) {
            assert_eq!(a.data(), b.data());
        }
        let enc_side = reconstruct(&m);
        for (x, y) in enc_side.data().iter().zip(d.reconstruction.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn reconstruction_is_clipped() {
        let m = quantized_model(1, &[64, 96], 29, 0, 0);
        let (bytes, _) = encode_bitstream(&m, 1, 0, 0).unwrap();
        let d = decode(&bytes).unwrap();
        assert!(d
            .reconstruction
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn corruption_is_detected() {
        let m = quantized_model(1, &[64, 96], 31, 2, 2);
        let (bytes, sizes) = encode_bitstream(&m, 1, 2, 2).unwrap();
        // Flip a byte in the middle of the latent blob: the checksum on some
        // grid must catch the desynchronization.
        let mut corrupt = bytes.clone();
        let blob_start = bytes.len() - sizes.latent_blob_bytes;
        corrupt[blob_start + sizes.latent_blob_bytes / 2] ^= 0x40;
        assert!(decode(&corrupt).is_err());
        // Truncations anywhere must error out, never panic.
        for cut in [10, 40, bytes.len() / 2, bytes.len() - 3] {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
