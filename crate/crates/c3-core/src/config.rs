//! Codec configuration: architecture and schedule hyperparameters, plus the
//! registry of stable config IDs shared by encoder and decoder.
//!
//! A config ID identifies everything the decoder needs to rebuild the model
//! (architecture, context shape, activation, quantization step). Schedule
//! constants and init-only choices also live here but never affect decoding.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Media {
    Image,
    Video,
}

/// Shape of the entropy network's first-layer context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSpec {
    /// l x l strictly causal window on the same grid (images).
    Causal2d { l: usize },
    /// kt x kh x kw causal spatio-temporal window (video).
    Causal3d { kt: usize, kh: usize, kw: usize },
    /// Learned per-grid mask inside a wide window: a c x cp rectangle on the
    /// previous frame (for the top `k_learned` grids) plus a fixed l x l
    /// causal neighborhood on the current frame.
    Custom {
        wide: usize,
        l: usize,
        c: usize,
        cp: usize,
        k_learned: usize,
        mask_steps: usize,
    },
}

/// Residual tail of the synthesis network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// 3x3 convolutions (images).
    Conv2d,
    /// 3x3x3 convolutions (video).
    Conv3d,
    /// One shared 3x3 kernel applied to every frame (video option).
    Conv2dPerFrame,
}

/// Optimization constants. Encode-side only.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub a_start: f64,
    pub a_end: f64,
    pub grad_clip: f64,
    pub stage2_max_steps: usize,
    pub stage2_lr: f64,
    pub patience: usize,
    pub lr_decay: f64,
    pub lr_stop: f64,
}

impl Schedules {
    pub fn image_default() -> Self {
        Schedules {
            stage1_steps: 100_000,
            stage1_lr: 1e-2,
            t_start: 0.3,
            t_end: 0.1,
            a_start: 2.0,
            a_end: 1.0,
            grad_clip: 10.0,
            stage2_max_steps: 10_000,
            stage2_lr: 1e-4,
            patience: 20,
            lr_decay: 0.8,
            lr_stop: 1e-8,
        }
    }

    pub fn video_default() -> Self {
        Schedules {
            a_start: 1.75,
            grad_clip: 0.03,
            ..Schedules::image_default()
        }
    }
}

/// Encode-side knobs for feature knockouts. All default to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingVariant {
    /// Off: stage 1 adds centered uniform noise without soft-rounding and
    /// stage 2 uses a plain linear straight-through estimator.
    pub soft_round: bool,
    /// Off: stage-1 noise is always uniform (a pinned to 1).
    pub kumaraswamy: bool,
    /// Off: stage 2 keeps a fixed learning rate (no decay, no resets).
    pub adaptive_lr: bool,
}

impl Default for TrainingVariant {
    fn default() -> Self {
        TrainingVariant {
            soft_round: true,
            kumaraswamy: true,
            adaptive_lr: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub media: Media,
    pub n_grids: usize,
    pub use_highest_grid: bool,
    /// Hidden widths of the synthesis 1x1 stack (input N, output 3).
    pub synthesis_widths: (usize, usize),
    pub residual: ResidualKind,
    /// Init the last synthesis bias with the mean RGB of the input.
    pub mean_rgb_bias: bool,
    /// Hidden widths of the entropy 1x1 stack (output 2: location, log-scale).
    pub entropy_widths: (usize, usize),
    pub context: ContextSpec,
    /// Condition grid n on a 3x3 window of bilinearly downsampled grid n-1.
    pub prev_grid_conditioning: bool,
    /// Separate entropy parameters per grid.
    pub per_grid_entropy: bool,
    /// Latent quantization step; networks consume delta-scaled latents.
    pub delta: f64,
    /// Added to the raw log-scale head before exponentiation.
    pub log_scale_shift: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// GELU activations (false: ReLU).
    pub gelu: bool,
    pub schedules: Schedules,
    pub variant: TrainingVariant,
}

impl CodecConfig {
    pub fn kodak_default() -> Self {
        CodecConfig {
            media: Media::Image,
            n_grids: 7,
            use_highest_grid: true,
            synthesis_widths: (18, 18),
            residual: ResidualKind::Conv2d,
            mean_rgb_bias: false,
            entropy_widths: (18, 18),
            context: ContextSpec::Causal2d { l: 7 },
            prev_grid_conditioning: false,
            per_grid_entropy: false,
            delta: 0.4,
            log_scale_shift: 8.0,
            sigma_min: 1e-3,
            sigma_max: 150.0,
            gelu: true,
            schedules: Schedules::image_default(),
            variant: TrainingVariant::default(),
        }
    }

    pub fn clic_default() -> Self {
        CodecConfig {
            prev_grid_conditioning: true,
            ..CodecConfig::kodak_default()
        }
    }

    pub fn uvg_default() -> Self {
        CodecConfig {
            media: Media::Video,
            n_grids: 6,
            use_highest_grid: true,
            synthesis_widths: (32, 32),
            residual: ResidualKind::Conv3d,
            mean_rgb_bias: true,
            entropy_widths: (16, 16),
            context: ContextSpec::Causal3d { kt: 3, kh: 9, kw: 9 },
            prev_grid_conditioning: false,
            per_grid_entropy: false,
            delta: 0.3,
            log_scale_shift: 8.0,
            sigma_min: 1e-3,
            sigma_max: 150.0,
            gelu: true,
            schedules: Schedules::video_default(),
            variant: TrainingVariant::default(),
        }
    }

    /// Shapes of the latent grids for the given input extents
    /// ([h, w] or [t, h, w]); grid n is a factor 2^n coarser, with ceiling
    /// division for odd extents.
    pub fn grid_shapes(&self, dims: &[usize]) -> Vec<Vec<usize>> {
        let skip = if self.use_highest_grid { 0 } else { 1 };
        (0..self.n_grids)
            .map(|n| {
                let div = 1usize << (n + skip);
                dims.iter().map(|&d| d.div_ceil(div)).collect()
            })
            .collect()
    }

    /// Validates the input extents against the grid hierarchy.
    pub fn validate_dims(&self, dims: &[usize]) -> Result<()> {
        let want = match self.media {
            Media::Image => 2,
            Media::Video => 3,
        };
        if dims.len() != want {
            return Err(Error::invalid(format!(
                "expected {want} extents for this media type, got {dims:?}"
            )));
        }
        let min = 1usize << (self.n_grids - 1);
        if dims.iter().any(|&d| d < min) {
            return Err(Error::invalid(format!(
                "input {dims:?} smaller than 2^{} in some dimension for {} grids",
                self.n_grids - 1,
                self.n_grids
            )));
        }
        Ok(())
    }

    /// Number of active first-layer context taps on the same grid.
    pub fn same_grid_taps(&self) -> usize {
        match self.context {
            ContextSpec::Causal2d { l } => (l * l - 1) / 2,
            ContextSpec::Causal3d { kt, kh, kw } => (kt * kh * kw - 1) / 2,
            ContextSpec::Custom { l, .. } => (l * l - 1) / 2,
        }
    }

    pub fn with_stage1_steps(mut self, steps: usize) -> Self {
        self.schedules.stage1_steps = steps;
        self
    }

    pub fn with_stage2_max_steps(mut self, steps: usize) -> Self {
        self.schedules.stage2_max_steps = steps;
        self
    }
}

/// Steps allowed for network-parameter quantization.
pub const PARAM_STEPS: [f64; 7] = [5e-5, 1e-4, 5e-4, 1e-3, 3e-3, 6e-3, 1e-2];

/// The UVG entropy settings (per-grid flag, widths, context, grid count).
fn uvg_entropy_setting(cfg: &mut CodecConfig, setting: usize) {
    match setting {
        0 => {
            cfg.per_grid_entropy = false;
            cfg.entropy_widths = (16, 16);
            cfg.context = ContextSpec::Causal3d { kt: 3, kh: 9, kw: 9 };
            cfg.n_grids = 6;
        }
        1 => {
            cfg.per_grid_entropy = true;
            cfg.entropy_widths = (2, 2);
            cfg.context = ContextSpec::Causal3d { kt: 3, kh: 9, kw: 9 };
            cfg.n_grids = 5;
        }
        2 => {
            cfg.per_grid_entropy = true;
            cfg.entropy_widths = (8, 8);
            cfg.context = ContextSpec::Custom {
                wide: 65,
                l: 7,
                c: 4,
                cp: 4,
                k_learned: 3,
                mask_steps: 1000,
            };
            cfg.n_grids = 6;
        }
        _ => unreachable!(),
    }
}

/// The UVG synthesis settings (mean-RGB bias, residual kind).
fn uvg_synthesis_setting(cfg: &mut CodecConfig, setting: usize) {
    match setting {
        0 => {
            cfg.mean_rgb_bias = true;
            cfg.residual = ResidualKind::Conv2dPerFrame;
        }
        1 => {
            cfg.mean_rgb_bias = true;
            cfg.residual = ResidualKind::Conv3d;
        }
        2 => {
            cfg.mean_rgb_bias = false;
            cfg.residual = ResidualKind::Conv2dPerFrame;
        }
        _ => unreachable!(),
    }
}

/// Stable registry of (id, config). IDs are frozen: they are written into
/// bitstream headers.
pub fn registry() -> Vec<(u16, CodecConfig)> {
    let mut out = Vec::new();

    out.push((1, CodecConfig::kodak_default()));
    // Kodak adaptive: widths major, context middle, highest-grid flag minor.
    let mut id = 2;
    for widths in [(12, 12), (18, 18), (24, 24)] {
        for l in [7usize, 5] {
            for highest in [true, false] {
                let mut cfg = CodecConfig::kodak_default();
                cfg.synthesis_widths = widths;
                cfg.entropy_widths = widths;
                cfg.context = ContextSpec::Causal2d { l };
                cfg.use_highest_grid = highest;
                out.push((id, cfg));
                id += 1;
            }
        }
    }

    out.push((20, CodecConfig::clic_default()));
    // CLIC adaptive: widths major, highest-grid flag minor.
    let mut id = 21;
    for widths in [(12, 12), (18, 18), (24, 24)] {
        for highest in [true, false] {
            let mut cfg = CodecConfig::clic_default();
            cfg.synthesis_widths = widths;
            cfg.entropy_widths = widths;
            cfg.use_highest_grid = highest;
            out.push((id, cfg));
            id += 1;
        }
    }

    // UVG adaptive: entropy setting major, synthesis setting minor.
    let mut id = 40;
    for ent in 0..3 {
        for syn in 0..3 {
            let mut cfg = CodecConfig::uvg_default();
            uvg_entropy_setting(&mut cfg, ent);
            uvg_synthesis_setting(&mut cfg, syn);
            out.push((id, cfg));
            id += 1;
        }
    }

    // Knockout architectures (decode-relevant ablations of the Kodak base).
    let mut relu = CodecConfig::kodak_default();
    relu.gelu = false;
    out.push((60, relu));
    let mut noshift = CodecConfig::kodak_default();
    noshift.log_scale_shift = 0.0;
    out.push((61, noshift));
    let mut coarse = CodecConfig::kodak_default();
    coarse.delta = 1.0;
    out.push((62, coarse));

    out
}

pub fn config_by_id(id: u16) -> Result<CodecConfig> {
    registry()
        .into_iter()
        .find(|(i, _)| *i == id)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::invalid(format!("unknown config id {id}")))
}

/// ID of a config, comparing only decode-relevant fields (schedules and
/// encode-side variants do not change the bitstream format).
pub fn id_of(cfg: &CodecConfig) -> Option<u16> {
    registry()
        .into_iter()
        .find(|(_, c)| decode_relevant_eq(c, cfg))
        .map(|(i, _)| i)
}

pub(crate) fn decode_relevant_eq(a: &CodecConfig, b: &CodecConfig) -> bool {
    a.media == b.media
        && a.n_grids == b.n_grids
        && a.use_highest_grid == b.use_highest_grid
        && a.synthesis_widths == b.synthesis_widths
        && a.residual == b.residual
        && a.entropy_widths == b.entropy_widths
        && a.context == b.context
        && a.prev_grid_conditioning == b.prev_grid_conditioning
        && a.per_grid_entropy == b.per_grid_entropy
        && a.delta == b.delta
        && a.log_scale_shift == b.log_scale_shift
        && a.gelu == b.gelu
}

/// Adaptive config sets per benchmark, by name.
pub fn adaptive_set(name: &str) -> Result<Vec<(u16, CodecConfig)>> {
    let ids: &[u16] = match name {
        "kodak" => &[2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13],
        "clic" => &[21, 22, 23, 24, 25, 26],
        "uvg" => &[40, 41, 42, 43, 44, 45, 46, 47, 48],
        _ => return Err(Error::invalid(format!("unknown adaptive set {name:?}"))),
    };
    ids.iter().map(|&i| Ok((i, config_by_id(i)?))).collect()
}
