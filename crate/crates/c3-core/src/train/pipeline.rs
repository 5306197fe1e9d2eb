//! Encode orchestration: initialize, train both stages, search the
//! parameter quantization, and serialize. The decoder applied to the result
//! reproduces the encoder-side reconstruction bit-exactly.

use crate::coding::{self, SizeBreakdown};
use crate::config::{config_by_id, decode_relevant_eq, CodecConfig};
use crate::error::{Error, Result};
use crate::model::{init_model, Model};
use crate::tensor::TensorOf;
use crate::train::{param_quant_search, run_stage1, run_stage2, QuantChoice, StageReport};

/// Everything one encode run produces beyond the raw bytes.
#[derive(Debug, Clone)]
pub struct EncodeOutcome {
    pub bytes: Vec<u8>,
    pub sizes: SizeBreakdown,
    pub config_id: u16,
    /// Quantized model exactly as the decoder will rebuild it.
    pub model: Model,
    pub choice: QuantChoice,
    pub stage1: StageReport,
    pub stage2: StageReport,
    /// Clipped reconstruction, bit-identical to the decoder's output.
    pub reconstruction: TensorOf<f32>,
}

impl EncodeOutcome {
    pub fn bits_per_pixel(&self) -> f64 {
        (self.bytes.len() * 8) as f64 / self.model.npix() as f64
    }

    /// Mean square error of the clipped reconstruction against the input.
    pub fn distortion(&self, x: &TensorOf<f32>) -> f64 {
        self.reconstruction
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| (a as f64 - b as f64) * (a as f64 - b as f64))
            .sum::<f64>()
            / x.numel() as f64
    }
}

fn validate_input(x: &TensorOf<f32>) -> Result<()> {
    if x.shape().len() < 2 || x.shape()[0] != 3 {
        return Err(Error::invalid(format!(
            "input shape {:?} is not (3, spatial...)",
            x.shape()
        )));
    }
    if !x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::invalid("input values must lie in [0, 1]"));
    }
    Ok(())
}

/// Overfits `x` under `cfg` and serializes the result. `config_id` names the
/// registry entry written to the header; `cfg` may differ from it only in
/// schedule and training-variant fields, which the decoder never sees.
pub fn encode(
    x: &TensorOf<f32>,
    cfg: &CodecConfig,
    config_id: u16,
    lambda: f64,
    seed: u64,
) -> Result<EncodeOutcome> {
    validate_input(x)?;
    if !decode_relevant_eq(&config_by_id(config_id)?, cfg) {
        return Err(Error::invalid(format!(
            "config disagrees with registry entry {config_id} on decode-relevant fields"
        )));
    }
    let mean = cfg.mean_rgb_bias.then(|| Model::mean_rgb(x));
    let m = init_model(cfg, &x.shape()[1..], seed, mean, None)?;
    encode_prepared(x, m, config_id, lambda, seed)
}

/// Same pipeline on an already-initialized model (the video path builds its
/// models separately because custom context masks are learned first).
pub fn encode_prepared(
    x: &TensorOf<f32>,
    mut m: Model,
    config_id: u16,
    lambda: f64,
    seed: u64,
) -> Result<EncodeOutcome> {
    let stage1 = run_stage1(&mut m, x, lambda, seed)?;
    let stage2 = run_stage2(&mut m, x, lambda)?;
    let (model, choice) = param_quant_search(&m, x, lambda)?;
    let (bytes, sizes) =
        coding::encode_bitstream(&model, config_id, choice.weight_step_idx, choice.bias_step_idx)?;
    let reconstruction = coding::reconstruct(&model);
    Ok(EncodeOutcome {
        bytes,
        sizes,
        config_id,
        model,
        choice,
        stage1,
        stage2,
        reconstruction,
    })
}

/// Encodes under every config in the set and keeps the stream minimizing
/// distortion + lambda * true coded bits per pixel. The winner's config ID
/// is already in its header.
pub fn encode_adaptive(
    x: &TensorOf<f32>,
    configs: &[(u16, CodecConfig)],
    lambda: f64,
    seed: u64,
) -> Result<EncodeOutcome> {
    if configs.is_empty() {
        return Err(Error::invalid("adaptive encode needs at least one config"));
    }
    let mut best: Option<(f64, EncodeOutcome)> = None;
    for (id, cfg) in configs {
        let out = encode(x, cfg, *id, lambda, seed)?;
        let objective = out.distortion(x) + lambda * out.bits_per_pixel();
        if best.as_ref().is_none_or(|(b, _)| objective < *b) {
            best = Some((objective, out));
        }
    }
    Ok(best.unwrap().1)
}
