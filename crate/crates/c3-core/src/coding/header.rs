//! Fixed bitstream header.
//!
//! Layout, all multi-byte fields little-endian:
//!
//! ```text
//! magic "C3BS"            4
//! version                 1
//! media (0 image/1 video) 1
//! extents                 2 per dimension (h,w or t,h,w)
//! config id               2
//! weight step index       1
//! bias step index         1
//! grid count N            1
//! per-grid max |z|        2 per grid
//! flags                   1   bit 0: learned-mask extension follows
//! [mask extension]        1 + 2 per learned grid (count, then dy,dx as i8)
//! ```

use crate::config::{self, Media, PARAM_STEPS};
use crate::error::{Error, Result};
use crate::model::MaskOffsets;

pub const MAGIC: [u8; 4] = *b"C3BS";
pub const VERSION: u8 = 1;

const FLAG_MASK_OFFSETS: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub media: Media,
    pub dims: Vec<usize>,
    pub config_id: u16,
    pub weight_step_idx: u8,
    pub bias_step_idx: u8,
    /// Per-grid latent alphabet bound: symbols live in [-max, max].
    pub grid_max: Vec<u16>,
    pub mask_offsets: Option<MaskOffsets>,
}

impl Header {
    pub fn write(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(match self.media {
            Media::Image => 0,
            Media::Video => 1,
        });
        for &d in &self.dims {
            debug_assert!(d >= 1 && d <= u16::MAX as usize);
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.config_id.to_le_bytes());
        out.push(self.weight_step_idx);
        out.push(self.bias_step_idx);
        out.push(self.grid_max.len() as u8);
        for &m in &self.grid_max {
            out.extend_from_slice(&m.to_le_bytes());
        }
        match &self.mask_offsets {
            None => out.push(0),
            Some(offs) => {
                out.push(FLAG_MASK_OFFSETS);
                out.push(offs.len() as u8);
                for &(dy, dx) in offs {
                    out.push(dy as u8);
                    out.push(dx as u8);
                }
            }
        }
        out
    }

    /// Parses a header, returning it plus the number of bytes consumed.
    pub fn read(buf: &[u8]) -> Result<(Header, usize)> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let at = *pos;
            let end = at
                .checked_add(n)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| Error::corrupt(at, "truncated header"))?;
            *pos = end;
            Ok(&buf[at..end])
        };
        let u16_at = |pos: &mut usize| -> Result<u16> {
            let b = take(pos, 2)?;
            Ok(u16::from_le_bytes([b[0], b[1]]))
        };

        let magic = take(&mut pos, 4)?;
        if magic != MAGIC {
            return Err(Error::corrupt(0, "bad magic"));
        }
        let version = take(&mut pos, 1)?[0];
        if version != VERSION {
            return Err(Error::corrupt(4, format!("unsupported version {version}")));
        }
        let media = match take(&mut pos, 1)?[0] {
            0 => Media::Image,
            1 => Media::Video,
            m => return Err(Error::corrupt(5, format!("unknown media type {m}"))),
        };
        let ndims = if media == Media::Image { 2 } else { 3 };
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let d = u16_at(&mut pos)?;
            if d == 0 {
                return Err(Error::corrupt(pos - 2, "zero extent"));
            }
            dims.push(d as usize);
        }
        let config_id = u16_at(&mut pos)?;
        let cfg = config::config_by_id(config_id)
            .map_err(|e| Error::corrupt(pos - 2, e.to_string()))?;
        if cfg.media != media {
            return Err(Error::corrupt(5, "media type does not match config"));
        }
        let weight_step_idx = take(&mut pos, 1)?[0];
        let bias_step_idx = take(&mut pos, 1)?[0];
        if (weight_step_idx as usize) >= PARAM_STEPS.len()
            || (bias_step_idx as usize) >= PARAM_STEPS.len()
        {
            return Err(Error::corrupt(pos - 2, "step index out of range"));
        }
        let n = take(&mut pos, 1)?[0] as usize;
        if n != cfg.n_grids {
            return Err(Error::corrupt(
                pos - 1,
                format!("grid count {n} does not match config ({})", cfg.n_grids),
            ));
        }
        let mut grid_max = Vec::with_capacity(n);
        for _ in 0..n {
            grid_max.push(u16_at(&mut pos)?);
        }
        let flags = take(&mut pos, 1)?[0];
        if flags & !FLAG_MASK_OFFSETS != 0 {
            return Err(Error::corrupt(pos - 1, format!("unknown flags {flags:#x}")));
        }
        let mask_offsets = if flags & FLAG_MASK_OFFSETS != 0 {
            let k = take(&mut pos, 1)?[0] as usize;
            let mut offs = Vec::with_capacity(k);
            for _ in 0..k {
                let b = take(&mut pos, 2)?;
                offs.push((b[0] as i8, b[1] as i8));
            }
            Some(offs)
        } else {
            None
        };
        Ok((
            Header {
                media,
                dims,
                config_id,
                weight_step_idx,
                bias_step_idx,
                grid_max,
                mask_offsets,
            },
            pos,
        ))
    }
}
